"""Single-device memory accounting and step-time cost model.

The cost model is additive and linear: a fixed per-step overhead, per-sample
transfer and preprocess costs, per-sample compute, and a contention factor
for packed compute.  Shipped profiles are CALIBRATED to reproduce qualitative
behavior (OOM thresholds, switching-overhead magnitudes, improvement trends),
they are not measurements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

# per-member framework context residency, bytes
CONTEXT_BYTES = 256_000_000


class SimError(Exception):
    pass


class OOMError(SimError):
    def __init__(self, demand, capacity, what="pack"):
        self.demand = int(demand)
        self.capacity = int(capacity)
        self.deficit = int(demand - capacity)
        super().__init__(
            f"{what}: demand {self.demand} B exceeds capacity "
            f"{self.capacity} B by {self.deficit} B")


@dataclass(frozen=True)
class DeviceProfile:
    memory_capacity: int            # bytes
    fixed_step_overhead_ms: float   # t_fix
    transfer_ms_per_sample: float   # t_tx
    preprocess_ms_per_sample: float  # t_pre
    contention_factor: float = 1.0
    switch_overhead_ms: float = 0.0

    def __post_init__(self):
        if self.memory_capacity <= 0:
            raise SimError("memory capacity must be positive")
        if self.contention_factor < 1.0:
            raise SimError("contention factor must be >= 1")


@dataclass(frozen=True)
class ModelProfile:
    name: str
    parameter_bytes: int
    activation_bytes_per_sample: int
    compute_ms_per_sample: float
    optimizer_state_multiplier: float = 3.0  # SGD 1x ... Adam 3x


@dataclass(frozen=True)
class StepTimeReport:
    t_s_seq_ms: float
    t_s_pack_ms: float

    @property
    def impv(self) -> float:
        return (self.t_s_seq_ms - self.t_s_pack_ms) / self.t_s_seq_ms


def optimizer_multiplier(kind: str) -> float:
    return {"sgd": 1.0, "momentum": 2.0, "adagrad": 2.0, "adam": 3.0}[kind.lower()]


def estimate_memory(model: ModelProfile, batch_size: int) -> int:
    if batch_size < 1:
        raise SimError("batch size must be >= 1")
    return int(model.parameter_bytes * model.optimizer_state_multiplier
               + model.activation_bytes_per_sample * batch_size
               + CONTEXT_BYTES)


def check_fit(members, device: DeviceProfile):
    """members: (ModelProfile, batch_size) pairs.  Raises OOMError on overflow."""
    demand = sum(estimate_memory(m, b) for m, b in members)
    if demand > device.memory_capacity:
        raise OOMError(demand, device.memory_capacity)
    return demand


def _io_ms(device: DeviceProfile) -> float:
    return device.transfer_ms_per_sample + device.preprocess_ms_per_sample


def single_step_ms(model: ModelProfile, batch_size: int,
                   device: DeviceProfile) -> float:
    return (device.fixed_step_overhead_ms
            + batch_size * _io_ms(device)
            + batch_size * model.compute_ms_per_sample)


def estimate_step_time(members, device: DeviceProfile,
                       input_groups=None) -> StepTimeReport:
    """Packed vs sequential single-step time.

    members: (ModelProfile, batch_size) pairs.  input_groups partitions member
    indices into shared-input groups (default: all separate).  Each group's
    transfer is charged at the driver batch: padding a small member's stream
    up to the driver is the stall/overhead channel.
    """
    if not members:
        raise SimError("estimate_step_time needs at least one member")
    if input_groups is None:
        input_groups = [[i] for i in range(len(members))]
    t_seq = sum(single_step_ms(m, b, device) for m, b in members)
    driver = max(b for _, b in members)
    io = sum(driver * _io_ms(device) for _ in input_groups)
    compute = sum(b * m.compute_ms_per_sample for m, b in members)
    # a member packed alone contends with nothing: IMPV must be exactly zero
    contention = device.contention_factor if len(members) > 1 else 1.0
    t_pack = device.fixed_step_overhead_ms + io + contention * compute
    return StepTimeReport(t_s_seq_ms=t_seq, t_s_pack_ms=t_pack)


def epoch_time_ms(model: ModelProfile, batch_size: int, device: DeviceProfile,
                  n_samples: int) -> float:
    steps = math.ceil(n_samples / batch_size)
    return steps * single_step_ms(model, batch_size, device)


def sequential_epoch_ms(members, device: DeviceProfile, n_samples: int) -> float:
    """One-epoch sequential run: per-model epochs plus (n-1) context swaps."""
    total = sum(epoch_time_ms(m, b, device, n_samples) for m, b in members)
    return total + (len(members) - 1) * device.switch_overhead_ms


def switching_overhead(n_models: int, device: DeviceProfile) -> float:
    """SwOH(n): sequential epoch time minus the sum of standalone epoch times."""
    if n_models < 1:
        raise SimError("n_models must be >= 1")
    return (n_models - 1) * device.switch_overhead_ms


# --- calibrated-profile files ----------------------------------------------

_DEVICE_KEYS = {
    "memory_capacity": int,
    "fixed_step_overhead_ms": float,
    "transfer_ms_per_sample": float,
    "preprocess_ms_per_sample": float,
    "contention_factor": float,
    "switch_overhead_ms": float,
}
_MODEL_KEYS = {
    "name": str,
    "parameter_bytes": int,
    "activation_bytes_per_sample": int,
    "compute_ms_per_sample": float,
    "optimizer_state_multiplier": float,
}


def _parse_kv(text: str, path) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SimError(f"{path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _build(values: dict, keys: dict, cls, path):
    kwargs = {}
    for key, value in values.items():
        if key == "kind":
            continue
        if key not in keys:
            raise SimError(f"{path}: unknown key {key!r}")
        conv = keys[key]
        kwargs[key] = conv(float(value)) if conv is int else conv(value)
    return cls(**kwargs)


def load_profile(path):
    """Load a key=value profile file; returns DeviceProfile or ModelProfile."""
    with open(path) as fh:
        values = _parse_kv(fh.read(), path)
    kind = values.get("kind", "model" if "name" in values else "device")
    if kind == "device":
        return _build(values, _DEVICE_KEYS, DeviceProfile, path)
    return _build(values, _MODEL_KEYS, ModelProfile, path)


def builtin_profile(name: str):
    """One of the shipped calibrated profiles, by stem (e.g. "mlp3")."""
    ref = resources.files("packtrain") / "profiles" / f"{name}.profile"
    try:
        text = ref.read_text()
    except FileNotFoundError:
        raise SimError(f"no builtin profile named {name!r}") from None
    values = _parse_kv(text, f"builtin:{name}")
    kind = values.get("kind", "model" if "name" in values else "device")
    if kind == "device":
        return _build(values, _DEVICE_KEYS, DeviceProfile, name)
    return _build(values, _MODEL_KEYS, ModelProfile, name)


def engine_model_profile(handle) -> ModelProfile:
    """Memory/cost profile derived from a real engine model."""
    param_count = sum(arr.size for arr in handle.params.values())
    widths = [handle.arch.input_dim, *handle.arch.hidden, handle.arch.classes]
    return ModelProfile(
        name=handle.model_id,
        parameter_bytes=param_count * 8,
        activation_bytes_per_sample=sum(widths) * 8,
        compute_ms_per_sample=param_count * 2e-6,
        optimizer_state_multiplier=optimizer_multiplier(handle.optimizer.kind),
    )


class DeviceAccountant:
    """Tracks which models occupy a device and how many bytes they hold."""

    def __init__(self, device: DeviceProfile):
        self.device = device
        self.resident: dict = {}

    @property
    def used(self) -> int:
        return sum(self.resident.values())

    def register(self, model_id: str, nbytes: int):
        if model_id in self.resident:
            raise SimError(f"{model_id!r} is already resident")
        if self.used + nbytes > self.device.memory_capacity:
            raise OOMError(self.used + nbytes, self.device.memory_capacity,
                           what=f"load {model_id!r}")
        self.resident[model_id] = int(nbytes)

    def release(self, model_id: str) -> int:
        if model_id not in self.resident:
            raise SimError(f"{model_id!r} is not resident")
        return self.resident.pop(model_id)

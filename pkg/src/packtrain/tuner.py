"""Hyperband and pack-aware Hyperband over the tuning search space.

Grouping strategies (knn / random / batchsize) only change how survivors are
executed, never which survive: selection depends purely on per-config losses,
so all strategies pick the same best configuration for identical losses.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import device_sim, engine, packing
from .data import Dataset, epoch_permutation
from .device_sim import (DeviceProfile, ModelProfile, OOMError, check_fit,
                         estimate_memory, estimate_step_time,
                         optimizer_multiplier)

BATCH_SIZES = (20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70)
OPTIMIZERS = ("adam", "sgd", "adagrad", "momentum")
LEARNING_RATES = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
ACTIVATIONS = ("sigmoid", "leaky_relu", "tanh", "relu")

# effectively-unbounded device used when an executor has no memory model
_UNBOUNDED = DeviceProfile(memory_capacity=int(1e18), fixed_step_overhead_ms=0,
                           transfer_ms_per_sample=0, preprocess_ms_per_sample=0)


class TunerError(Exception):
    pass


class ExecutorError(TunerError):
    pass


@dataclass(frozen=True)
class HyperparamConfig:
    config_id: int
    batch_size: int
    optimizer: str
    learning_rate: float
    activation: str
    indices: tuple  # (batch_idx, optimizer_idx, lr_idx, activation_idx)


class ConfigSpace:
    """Cartesian grid over batch size, optimizer, learning rate, activation."""

    def __init__(self, batch_sizes=BATCH_SIZES, optimizers=OPTIMIZERS,
                 learning_rates=LEARNING_RATES, activations=ACTIVATIONS):
        self.batch_sizes = tuple(batch_sizes)
        self.optimizers = tuple(optimizers)
        self.learning_rates = tuple(learning_rates)
        self.activations = tuple(activations)

    @property
    def size(self) -> int:
        return (len(self.batch_sizes) * len(self.optimizers)
                * len(self.learning_rates) * len(self.activations))

    def config(self, config_id: int) -> HyperparamConfig:
        if not 0 <= config_id < self.size:
            raise TunerError(f"config_id {config_id} out of range")
        i = config_id
        i, ai = divmod(i, len(self.activations))
        i, li = divmod(i, len(self.learning_rates))
        bi, oi = divmod(i, len(self.optimizers))
        return HyperparamConfig(
            config_id=config_id,
            batch_size=self.batch_sizes[bi],
            optimizer=self.optimizers[oi],
            learning_rate=self.learning_rates[li],
            activation=self.activations[ai],
            indices=(bi, oi, li, ai),
        )


def _rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def sample_configs(space: ConfigSpace, n: int, seed) -> list:
    """n distinct configs, uniform without replacement, deterministic per seed."""
    if n > space.size:
        raise TunerError(f"cannot sample {n} from {space.size} configs")
    ids = _rng("sample", seed).choice(space.size, size=n, replace=False)
    return [space.config(int(i)) for i in ids]


def _dimension_gaps(a: HyperparamConfig, b: HyperparamConfig):
    ab, ao, al, aa = a.indices
    bb, bo, bl, ba = b.indices
    return (abs(ab - bb), float(ao != bo), abs(al - bl), float(aa != ba))


def config_distance(a, b, metric="indexsum") -> float:
    """Distance in config space.

    "indexsum": per-dimension index gaps summed, categorical dims 0/1.
    "euclid": root of summed squares of the same per-dimension terms.
    A callable is used as-is (e.g. the training-time metric).
    """
    if callable(metric):
        return float(metric(a, b))
    gaps = _dimension_gaps(a, b)
    if metric == "indexsum":
        return float(sum(gaps))
    if metric == "euclid":
        return float(math.sqrt(sum(g * g for g in gaps)))
    raise TunerError(f"unknown distance metric {metric!r}")


def make_traintime_metric(model: ModelProfile, device: DeviceProfile):
    """Distance = normalized |T_s(Pack{a,b}) - (T_s(a)+T_s(b))| from the simulator."""
    def metric(a, b):
        ma = model_profile_for(model, a)
        mb = model_profile_for(model, b)
        members = [(ma, a.batch_size), (mb, b.batch_size)]
        groups = ([[0, 1]] if a.batch_size == b.batch_size else [[0], [1]])
        report = estimate_step_time(members, device, groups)
        return abs(report.t_s_seq_ms - report.t_s_pack_ms) / report.t_s_seq_ms
    return metric


def model_profile_for(base: ModelProfile, config: HyperparamConfig) -> ModelProfile:
    """The base profile with optimizer state sized for the config's optimizer."""
    return ModelProfile(
        name=base.name,
        parameter_bytes=base.parameter_bytes,
        activation_bytes_per_sample=base.activation_bytes_per_sample,
        compute_ms_per_sample=base.compute_ms_per_sample,
        optimizer_state_multiplier=optimizer_multiplier(config.optimizer),
    )


@dataclass
class PackGroup:
    members: list
    predicted_memory: int
    centroid_id: int


def _require_fits(config, nbytes, capacity):
    if nbytes > capacity:
        raise OOMError(nbytes, capacity,
                       what=f"config {config.config_id} alone")


def pack_opt_knn(configs, device, mem_fn, threshold, rng,
                 metric="indexsum") -> list:
    """Centroid-greedy grouping: random centroid, nearest neighbors within the
    similarity threshold until memory runs out; repeat until all are placed."""
    capacity = device.memory_capacity
    unassigned = sorted(configs, key=lambda c: c.config_id)
    groups = []
    while unassigned:
        centroid = unassigned.pop(int(rng.integers(len(unassigned))))
        mem = mem_fn(centroid)
        _require_fits(centroid, mem, capacity)
        members = [centroid]
        ranked = sorted(unassigned,
                        key=lambda c: (config_distance(centroid, c, metric),
                                       c.config_id))
        for cand in ranked:
            if config_distance(centroid, cand, metric) > threshold:
                break
            need = mem_fn(cand)
            if mem + need > capacity:
                continue
            members.append(cand)
            mem += need
        for cand in members[1:]:
            unassigned.remove(cand)
        groups.append(PackGroup(members=members, predicted_memory=mem,
                                centroid_id=centroid.config_id))
    return groups


def pack_opt_random(configs, m, device, mem_fn, rng) -> list:
    """Random groups of at most m configs, each fitting in device memory."""
    if m < 1:
        raise TunerError("random pack size m must be >= 1")
    capacity = device.memory_capacity
    order = sorted(configs, key=lambda c: c.config_id)
    order = [order[i] for i in rng.permutation(len(order))]
    groups = []
    for config in order:
        need = mem_fn(config)
        _require_fits(config, need, capacity)
        placed = False
        if groups:
            group = groups[-1]
            if (len(group.members) < m
                    and group.predicted_memory + need <= capacity):
                group.members.append(config)
                group.predicted_memory += need
                placed = True
        if not placed:
            groups.append(PackGroup(members=[config], predicted_memory=need,
                                    centroid_id=config.config_id))
    return groups


def pack_opt_batchsize(configs, device, mem_fn) -> list:
    """Groups share an exact batch size, greedily filled until memory."""
    capacity = device.memory_capacity
    by_batch: dict = {}
    for config in sorted(configs, key=lambda c: c.config_id):
        by_batch.setdefault(config.batch_size, []).append(config)
    groups = []
    for batch in sorted(by_batch):
        current = None
        for config in by_batch[batch]:
            need = mem_fn(config)
            _require_fits(config, need, capacity)
            if current is None or current.predicted_memory + need > capacity:
                current = PackGroup(members=[config], predicted_memory=need,
                                    centroid_id=config.config_id)
                groups.append(current)
            else:
                current.members.append(config)
                current.predicted_memory += need
    return groups


@dataclass(frozen=True)
class AuditRecord:
    bracket: int
    rung: int
    group: int
    config_id: int
    epochs: int
    loss: float
    time_ms: float

    def line(self) -> str:
        return (f"bracket={self.bracket} rung={self.rung} group={self.group} "
                f"config_id={self.config_id} epochs={self.epochs} "
                f"loss={self.loss!r} time_ms={self.time_ms!r}")


@dataclass
class TuneResult:
    best_config: HyperparamConfig
    best_loss: float
    records: list
    total_time_ms: float
    total_epochs: int
    failures: list = field(default_factory=list)


def bracket_schedule(R: int, eta: int):
    """[(s, n, r)] for brackets s_max .. 0."""
    if R < 1 or eta < 2:
        raise TunerError("need R >= 1 and eta >= 2")
    s_max = int(math.floor(math.log(R) / math.log(eta)))
    out = []
    for s in range(s_max, -1, -1):
        n = math.ceil((s_max + 1) * eta ** s / (s + 1))
        r = R * eta ** (-s)
        out.append((s, n, r))
    return out


def _make_groups(strategy, configs, executor, rng, threshold, m, metric):
    if strategy in ("none", "original"):
        return [PackGroup([c], 0, c.config_id)
                for c in sorted(configs, key=lambda c: c.config_id)]
    device = getattr(executor, "device", None) or _UNBOUNDED
    mem_fn = getattr(executor, "memory_bytes", lambda c: 0)
    if strategy == "knn":
        return pack_opt_knn(configs, device, mem_fn, threshold, rng, metric)
    if strategy == "random":
        return pack_opt_random(configs, m, device, mem_fn, rng)
    if strategy == "batchsize":
        return pack_opt_batchsize(configs, device, mem_fn)
    raise TunerError(f"unknown strategy {strategy!r}")


def packed_hyperband(R, eta, executor, seed, strategy="knn", space=None,
                     threshold=6.0, m=27, metric="indexsum") -> TuneResult:
    """Hyperband where each rung's survivors execute in packed groups.

    strategy "none" is plain Hyperband.  A group that OOMs at execution time
    degrades to singleton execution instead of aborting the run.
    """
    space = space or ConfigSpace()
    records, failures = [], []
    total_time = 0.0
    total_epochs = 0
    best_loss, best_config = math.inf, None
    for s, n, r in bracket_schedule(R, eta):
        configs = sample_configs(space, n, (seed, s))
        try:
            for i in range(s + 1):
                r_i = max(1, int(round(r * eta ** i)))
                rng = _rng("group", seed, s, i)
                groups = _make_groups(strategy, configs, executor, rng,
                                      threshold, m, metric)
                losses = {}
                for gi, group in enumerate(groups):
                    try:
                        got, t_ms = executor.evaluate(group.members, r_i)
                    except OOMError:
                        got, t_ms = {}, 0.0
                        for config in group.members:
                            one, t_one = executor.evaluate([config], r_i)
                            got.update(one)
                            t_ms += t_one
                    total_time += t_ms
                    losses.update(got)
                    for config in sorted(group.members,
                                         key=lambda c: c.config_id):
                        records.append(AuditRecord(
                            bracket=s, rung=i, group=gi,
                            config_id=config.config_id, epochs=r_i,
                            loss=got[config.config_id], time_ms=t_ms))
                    total_epochs += r_i * len(group.members)
                ranked = sorted(configs,
                                key=lambda c: (losses[c.config_id], c.config_id))
                if losses[ranked[0].config_id] < best_loss:
                    best_loss = losses[ranked[0].config_id]
                    best_config = ranked[0]
                configs = ranked[:len(configs) // eta]
                if not configs:
                    break
        except ExecutorError as exc:
            failures.append((s, str(exc)))
            continue
    return TuneResult(best_config=best_config, best_loss=best_loss,
                      records=records, total_time_ms=total_time,
                      total_epochs=total_epochs, failures=failures)


def hyperband(R, eta, executor, seed, space=None) -> TuneResult:
    return packed_hyperband(R, eta, executor, seed, strategy="none",
                            space=space)


# --- executors -------------------------------------------------------------

class StubExecutor:
    """Fixed loss oracle; zero cost.  For selection-invariance testing."""

    def __init__(self, loss_fn):
        self.loss_fn = loss_fn
        self.device = None

    def memory_bytes(self, config) -> int:
        return 0

    def evaluate(self, configs, epochs):
        return ({c.config_id: float(self.loss_fn(c, epochs)) for c in configs},
                0.0)


def _stub_loss(seed, config_id, cum_epochs) -> float:
    rng = _rng("simloss", seed, config_id)
    start = rng.uniform(0.8, 2.5)
    floor = rng.uniform(0.1, 0.6)
    return floor + (start - floor) * math.exp(-cum_epochs / 20.0)


class SimulatedExecutor:
    """Charges cost-model time for training groups; losses from a seeded stub."""

    def __init__(self, model: ModelProfile, device: DeviceProfile,
                 n_samples=10_000, seed=0):
        self.model = model
        self.device = device
        self.n_samples = n_samples
        self.seed = seed
        self.cum_epochs: dict = {}

    def memory_bytes(self, config) -> int:
        return estimate_memory(model_profile_for(self.model, config),
                               config.batch_size)

    def _epoch_ms(self, configs) -> float:
        n = self.n_samples
        pos = {c.config_id: 0 for c in configs}
        total = 0.0
        while any(p < n for p in pos.values()):
            active = [c for c in configs if pos[c.config_id] < n]
            members = [(model_profile_for(self.model, c), c.batch_size)
                       for c in active]
            keyed: dict = {}
            for idx, c in enumerate(active):
                keyed.setdefault((pos[c.config_id], c.batch_size),
                                 []).append(idx)
            groups = [keyed[k] for k in sorted(keyed)]
            steps = min(math.ceil((n - pos[c.config_id]) / c.batch_size)
                        for c in active)
            report = estimate_step_time(members, self.device, groups)
            total += steps * report.t_s_pack_ms
            for c in active:
                pos[c.config_id] = min(n, pos[c.config_id]
                                       + steps * c.batch_size)
        return total

    def evaluate(self, configs, epochs):
        members = [(model_profile_for(self.model, c), c.batch_size)
                   for c in configs]
        check_fit(members, self.device)  # may raise OOMError
        time_ms = (self.device.switch_overhead_ms
                   + epochs * self._epoch_ms(configs))
        losses = {}
        for c in configs:
            cum = self.cum_epochs.get(c.config_id, 0) + epochs
            self.cum_epochs[c.config_id] = cum
            losses[c.config_id] = _stub_loss(self.seed, c.config_id, cum)
        return losses, time_ms


class EngineExecutor:
    """Trains real MLPs (packed or standalone) on a dataset; loss is the
    cross-entropy on a held-out validation split fixed per seed."""

    def __init__(self, dataset: Dataset, hidden=(16,), seed=0,
                 val_fraction=0.1, device=None):
        split = epoch_permutation(dataset.dataset_id + "|valsplit", dataset.n,
                                  seed)
        n_val = max(1, int(dataset.n * val_fraction))
        val_idx, train_idx = split[:n_val], split[n_val:]
        self.train = Dataset(dataset.dataset_id + "-train",
                             dataset.features[train_idx],
                             dataset.labels[train_idx], dataset.class_count)
        self.val_x = dataset.features[val_idx]
        self.val_y = dataset.labels[val_idx]
        self.hidden = tuple(hidden)
        self.seed = seed
        self.device = device
        self.handles: dict = {}
        self.datasets = {self.train.dataset_id: self.train}

    def memory_bytes(self, config) -> int:
        handle = self._handle(config)
        return estimate_memory(device_sim.engine_model_profile(handle),
                               config.batch_size)

    def _handle(self, config) -> packing.ModelHandle:
        if config.config_id not in self.handles:
            arch = packing.MLPArch(
                input_dim=self.train.dim, hidden=self.hidden,
                classes=self.train.class_count, activation=config.activation)
            self.handles[config.config_id] = packing.make_handle(
                model_id=f"cfg{config.config_id:04d}", arch=arch,
                optimizer=config.optimizer,
                learning_rate=config.learning_rate,
                batch_size=config.batch_size, target_steps=1,
                dataset_binding=self.train.dataset_id, seed=self.seed)
            self.handles[config.config_id].target_steps = 0
        return self.handles[config.config_id]

    def _val_loss(self, handle) -> float:
        feeds = {f"{handle.model_id}/x": self.val_x,
                 f"{handle.model_id}/y": self.val_y}
        state = engine.forward(handle.graph, handle.params, feeds)
        return state.losses[handle.model_id]

    def evaluate(self, configs, epochs):
        t0 = time.perf_counter()
        handles = [self._handle(c) for c in configs]
        steps_per_epoch = {h.model_id: math.ceil(self.train.n / h.batch_size)
                           for h in handles}
        for h in handles:
            h.target_steps = h.cursor.steps_done + epochs * steps_per_epoch[h.model_id]
        if len(handles) > 1:
            packed = packing.dedup_inputs(packing.pack_models(handles))
            while any(not h.finished for h in handles):
                packing.packed_step(packed, self.datasets)
        else:
            h = handles[0]
            while not h.finished:
                packing.standalone_step(h, self.datasets)
        losses = {c.config_id: self._val_loss(h)
                  for c, h in zip(configs, handles)}
        return losses, (time.perf_counter() - t0) * 1000.0

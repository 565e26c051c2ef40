"""The pack / load / free / pad primitives.

Member graphs are fused into one differentiable graph whose outputs are the
concatenation of member outputs.  Each member keeps its own optimizer, data
cursor and parameter set; a packed step advances every active member by
exactly one update and must reproduce the member's standalone trajectory.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine
from .data import Dataset, batch_at, epoch_permutation, preprocess
from .engine import ComputationGraph

CHECKPOINT_MAGIC = b"PKCK"
CHECKPOINT_VERSION = 1


class PackError(Exception):
    pass


class ReplanNeeded(PackError):
    """No member can take a step under the current epoch plan."""


@dataclass(frozen=True)
class MLPArch:
    input_dim: int
    hidden: tuple
    classes: int
    activation: str = "relu"


@dataclass
class ProgressCursor:
    steps_done: int = 0
    epoch_index: int = 0
    pos: int = 0                      # samples consumed in the current epoch
    samples_used: np.ndarray | None = None  # per-index use count, current epoch

    def start_epoch(self, n: int):
        self.pos = 0
        self.samples_used = np.zeros(n, dtype=np.int64)


@dataclass
class ModelHandle:
    model_id: str
    arch: MLPArch
    graph: ComputationGraph
    params: dict
    optimizer: engine.OptimizerState
    batch_size: int
    target_steps: int
    dataset_binding: str
    cursor: ProgressCursor = field(default_factory=ProgressCursor)

    @property
    def finished(self) -> bool:
        return self.cursor.steps_done >= self.target_steps


def make_handle(model_id, arch: MLPArch, optimizer, learning_rate, batch_size,
                target_steps, dataset_binding, seed) -> ModelHandle:
    if batch_size < 1 or target_steps < 1:
        raise PackError("batch_size and target_steps must be >= 1")
    graph = engine.build_mlp(model_id, arch.input_dim, arch.hidden, arch.classes,
                             arch.activation, dataset_binding)
    params = engine.init_parameters(graph, seed)
    return ModelHandle(
        model_id=model_id, arch=arch, graph=graph, params=params,
        optimizer=engine.make_optimizer(optimizer, learning_rate),
        batch_size=batch_size, target_steps=target_steps,
        dataset_binding=dataset_binding,
    )


def _fuse(members) -> ComputationGraph:
    nodes, input_ports, label_ports = [], {}, {}
    output_ports, loss_heads, param_shapes = {}, {}, {}
    for h in members:
        g = h.graph
        nodes.extend(g.nodes)
        input_ports.update(g.input_ports)
        label_ports.update(g.label_ports)
        output_ports.update(g.output_ports)
        loss_heads.update(g.loss_heads)
        param_shapes.update(g.param_shapes)
    model_id = "pack(" + ",".join(h.model_id for h in members) + ")"
    return ComputationGraph(
        model_id=model_id, nodes=nodes, input_ports=input_ports,
        label_ports=label_ports, output_ports=output_ports,
        loss_heads=loss_heads, param_shapes=param_shapes,
    )


@dataclass
class PackedModel:
    members: list
    fused_graph: ComputationGraph
    share_inputs: bool = False
    last_step_stats: dict = field(default_factory=dict)

    @property
    def driver_batch(self) -> int:
        active = [m.batch_size for m in self.members if not m.finished]
        return max(active) if active else 0

    def member(self, model_id) -> ModelHandle:
        for h in self.members:
            if h.model_id == model_id:
                return h
        raise PackError(f"unknown model_id {model_id!r}")

    def input_groups(self):
        """Partition of members by (dataset, cursor position, batch size)."""
        groups: dict = {}
        for h in self.members:
            key = (h.dataset_binding, h.cursor.epoch_index, h.cursor.pos,
                   h.batch_size)
            groups.setdefault(key, []).append(h)
        return [groups[k] for k in sorted(groups)]

    def pad_slice_plan(self):
        """Per-member (offset, length) into the padded driver batch."""
        return {h.model_id: (0, h.batch_size) for h in self.members
                if not h.finished}


def pack_models(handles) -> PackedModel:
    if not handles:
        raise PackError("pack needs at least one model")
    ids = [h.model_id for h in handles]
    if len(set(ids)) != len(ids):
        raise PackError(f"duplicate model_id in pack: {sorted(ids)}")
    return PackedModel(members=list(handles), fused_graph=_fuse(handles))


def dedup_inputs(packed: PackedModel) -> PackedModel:
    """Rewrite members in the same input group to share one physical input.

    Value-preserving by construction: group members already consume identical
    samples, this only collapses the duplicate transfers.
    """
    return replace(packed, share_inputs=True)


def _merged_params(members) -> dict:
    merged = {}
    for h in members:
        merged.update(h.params)
    return merged


def _next_batch(handle: ModelHandle, datasets, spec=None, cache=None):
    """The member's next (features, labels, indices) from its own cursor."""
    ds: Dataset = datasets[handle.dataset_binding]
    cur = handle.cursor
    if cur.samples_used is None:
        cur.start_epoch(ds.n)
    take = min(handle.batch_size, ds.n - cur.pos)
    perm = epoch_permutation(ds.dataset_id, ds.n, cur.epoch_index)
    x, y, idx = batch_at(ds, perm, cur.pos, take)
    if spec is not None:
        x = preprocess(spec, x, idx, ds.dataset_id, cache)
    return x, y, idx, take


def _roll_if_needed(handle: ModelHandle, datasets):
    ds = datasets[handle.dataset_binding]
    cur = handle.cursor
    if cur.samples_used is None:
        cur.start_epoch(ds.n)
    if cur.pos >= ds.n:
        cur.epoch_index += 1
        cur.start_epoch(ds.n)


def packed_step(packed: PackedModel, datasets, preprocess_spec=None,
                cache=None, stop_at_epoch_end=False):
    """Train every active member for exactly one synchronized step.

    Returns per-member losses.  With ``stop_at_epoch_end`` members that have
    exhausted their epoch stay parked instead of rolling into the next one;
    if nobody can step, ReplanNeeded is raised.
    """
    active = [h for h in packed.members if not h.finished]
    if not stop_at_epoch_end:
        for h in active:
            _roll_if_needed(h, datasets)
    else:
        for h in active:
            if h.cursor.samples_used is None:
                h.cursor.start_epoch(datasets[h.dataset_binding].n)
        active = [h for h in active
                  if h.cursor.pos < datasets[h.dataset_binding].n]
    if not active:
        raise ReplanNeeded("no member has both remaining steps and epoch data")

    driver = max(h.batch_size for h in active)
    groups: dict = {}
    for h in active:
        key = (h.dataset_binding, h.cursor.epoch_index, h.cursor.pos,
               h.batch_size)
        groups.setdefault(key, []).append(h)

    feeds, valid_rows, takes = {}, {}, {}
    alias = {}
    physical = 0
    for key in sorted(groups):
        group = groups[key]
        lead = group[0]
        x, y, idx, take = _next_batch(lead, datasets, preprocess_spec, cache)
        # pad to the driver batch; padded rows are zero and masked out below
        xp = np.zeros((driver, x.shape[1]))
        xp[:take] = x
        yp = np.zeros(driver, dtype=np.int64)
        yp[:take] = y
        if packed.share_inputs:
            physical += 1
            feeds[f"{lead.model_id}/x"] = xp
            feeds[f"{lead.model_id}/y"] = yp
            for h in group:
                alias[f"{h.model_id}/x"] = f"{lead.model_id}/x"
                alias[f"{h.model_id}/y"] = f"{lead.model_id}/y"
        else:
            for h in group:
                physical += 1
                feeds[f"{h.model_id}/x"] = xp.copy()
                feeds[f"{h.model_id}/y"] = yp.copy()
        for h in group:
            valid_rows[h.model_id] = take
            takes[h.model_id] = (idx, take)

    # finished/parked members stay resident but leave the step's graph
    graph = (packed.fused_graph if len(active) == len(packed.members)
             else _fuse(active))
    graph.port_alias = alias if packed.share_inputs else {}
    params = _merged_params(active)
    state = engine.forward(graph, params, feeds, valid_rows)
    heads = [h.model_id for h in active]
    grads = engine.backward(graph, params, state, heads=heads)

    for h in active:
        prefix = f"{h.model_id}/"
        member_grads = {k: g for k, g in grads.items() if k.startswith(prefix)}
        engine.apply_update(h.optimizer, h.params, member_grads)
        idx, take = takes[h.model_id]
        h.cursor.steps_done += 1
        h.cursor.pos += take
        h.cursor.samples_used[idx] += 1

    packed.last_step_stats = {
        "physical_inputs": physical,
        "groups": len(groups),
        "driver_batch": driver,
    }
    return {h.model_id: state.losses[h.model_id] for h in active}


def standalone_step(handle: ModelHandle, datasets, preprocess_spec=None,
                    cache=None):
    """One unpacked training step; the reference trajectory for losslessness."""
    if handle.finished:
        raise PackError(f"{handle.model_id}: no remaining steps")
    _roll_if_needed(handle, datasets)
    x, y, idx, take = _next_batch(handle, datasets, preprocess_spec, cache)
    feeds = {f"{handle.model_id}/x": x, f"{handle.model_id}/y": y}
    state = engine.forward(handle.graph, handle.params, feeds)
    grads = engine.backward(handle.graph, handle.params, state)
    engine.apply_update(handle.optimizer, handle.params, grads)
    cur = handle.cursor
    cur.steps_done += 1
    cur.pos += take
    cur.samples_used[idx] += 1
    return state.losses[handle.model_id]


def make_epoch_plan(members, datasets):
    """Phases of (driver model_id, steps) covering one epoch for every member.

    A phase ends when its driver (the largest-batch unfinished member, ties
    by model_id) exhausts its epoch; after the full plan every member has
    consumed each of its samples exactly once.
    """
    if not members:
        raise PackError("epoch plan needs at least one member")
    pos = {}
    for h in members:
        n = datasets[h.dataset_binding].n
        pos[h.model_id] = (h.cursor.pos if h.cursor.samples_used is not None
                           else 0, n)
    batch = {h.model_id: h.batch_size for h in members}
    plan = []
    while any(p < n for p, n in pos.values()):
        unfinished = [mid for mid, (p, n) in pos.items() if p < n]
        driver = min(unfinished, key=lambda mid: (-batch[mid], mid))
        steps = 0
        while True:
            done = False
            for mid in unfinished:
                p, n = pos[mid]
                if p >= n:
                    continue
                p += min(batch[mid], n - p)
                pos[mid] = (p, n)
                if p >= n:
                    done = True
            steps += 1
            if done:
                break
        plan.append((driver, steps))
    return plan


def run_epoch(packed: PackedModel, datasets, preprocess_spec=None, cache=None):
    """Execute packed steps until every member's current epoch is exhausted."""
    losses = []
    while True:
        try:
            losses.append(packed_step(packed, datasets, preprocess_spec, cache,
                                      stop_at_epoch_end=True))
        except ReplanNeeded:
            return losses


# --- checkpointing ---------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    model_id: str
    payload: bytes  # everything between the header and the digest
    digest: bytes

    def to_bytes(self) -> bytes:
        head = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
        return head + self.payload + self.digest

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise PackError("bad checkpoint magic")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise PackError(f"unsupported checkpoint version {version}")
        payload, digest = raw[8:-32], raw[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise PackError("checkpoint digest mismatch")
        model_id, _ = _read_str(payload, 0)
        return cls(model_id=model_id, payload=payload, digest=digest)


def _write_str(parts, s: str):
    raw = s.encode()
    parts.append(struct.pack("<H", len(raw)) + raw)


def _read_str(buf, off):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off:off + n].decode(), off + n


def _write_tensor(parts, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    parts.append(struct.pack("<B", arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    parts.append(arr.astype("<f8").tobytes())


def _read_tensor(buf, off):
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}Q", buf, off) if ndim else ()
    off += 8 * ndim
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return arr.reshape(shape).copy(), off + 8 * count


def checkpoint_model(handle: ModelHandle) -> Checkpoint:
    parts = []
    _write_str(parts, handle.model_id)
    arch = handle.arch
    parts.append(struct.pack("<IIB", arch.input_dim, arch.classes,
                             len(arch.hidden)))
    parts.append(struct.pack(f"<{len(arch.hidden)}I", *arch.hidden)
                 if arch.hidden else b"")
    _write_str(parts, arch.activation)
    _write_str(parts, handle.dataset_binding)
    parts.append(struct.pack("<IQ", handle.batch_size, handle.target_steps))
    opt = handle.optimizer
    _write_str(parts, opt.kind)
    parts.append(struct.pack("<dQ", opt.learning_rate, opt.step_counter))
    names = sorted(handle.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        _write_str(parts, name)
        _write_tensor(parts, handle.params[name])
    slot_items = [(p, s, arr) for p in sorted(opt.slots)
                  for s, arr in sorted(opt.slots[p].items())]
    parts.append(struct.pack("<I", len(slot_items)))
    for pname, sname, arr in slot_items:
        _write_str(parts, pname)
        _write_str(parts, sname)
        _write_tensor(parts, arr)
    cur = handle.cursor
    parts.append(struct.pack("<QQQ", cur.steps_done, cur.epoch_index, cur.pos))
    payload = b"".join(parts)
    return Checkpoint(model_id=handle.model_id, payload=payload,
                      digest=hashlib.sha256(payload).digest())


def restore_handle(ckpt: Checkpoint, datasets=None) -> ModelHandle:
    buf = ckpt.payload
    model_id, off = _read_str(buf, 0)
    input_dim, classes, n_hidden = struct.unpack_from("<IIB", buf, off)
    off += struct.calcsize("<IIB")
    hidden = struct.unpack_from(f"<{n_hidden}I", buf, off) if n_hidden else ()
    off += 4 * n_hidden
    activation, off = _read_str(buf, off)
    binding, off = _read_str(buf, off)
    batch_size, target_steps = struct.unpack_from("<IQ", buf, off)
    off += struct.calcsize("<IQ")
    opt_kind, off = _read_str(buf, off)
    lr, step_counter = struct.unpack_from("<dQ", buf, off)
    off += struct.calcsize("<dQ")
    (n_params,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(n_params):
        name, off = _read_str(buf, off)
        params[name], off = _read_tensor(buf, off)
    (n_slots,) = struct.unpack_from("<I", buf, off)
    off += 4
    opt = engine.make_optimizer(opt_kind, lr)
    opt.step_counter = step_counter
    for _ in range(n_slots):
        pname, off = _read_str(buf, off)
        sname, off = _read_str(buf, off)
        arr, off = _read_tensor(buf, off)
        opt.slots.setdefault(pname, {})[sname] = arr
    steps_done, epoch_index, pos = struct.unpack_from("<QQQ", buf, off)

    arch = MLPArch(input_dim, tuple(hidden), classes, activation)
    graph = engine.build_mlp(model_id, input_dim, tuple(hidden), classes,
                             activation, binding)
    cursor = ProgressCursor(steps_done=steps_done, epoch_index=epoch_index,
                            pos=pos)
    if datasets is not None and binding in datasets:
        ds = datasets[binding]
        cursor.samples_used = np.zeros(ds.n, dtype=np.int64)
        perm = epoch_permutation(ds.dataset_id, ds.n, epoch_index)
        cursor.samples_used[perm[:pos]] = 1
    return ModelHandle(
        model_id=model_id, arch=arch, graph=graph, params=params,
        optimizer=opt, batch_size=batch_size, target_steps=target_steps,
        dataset_binding=binding, cursor=cursor,
    )


def free_model(packed: PackedModel, model_id):
    """Checkpoint one member and drop it from the pack."""
    handle = packed.member(model_id)
    remaining = [h for h in packed.members if h.model_id != model_id]
    ckpt = checkpoint_model(handle)
    new_packed = PackedModel(
        members=remaining,
        fused_graph=_fuse(remaining) if remaining else _fuse([]),
        share_inputs=packed.share_inputs,
    )
    return ckpt, new_packed


def load_model(obj, device=None, datasets=None) -> ModelHandle:
    """Place a handle (or restore a checkpoint) onto a device's accounting."""
    handle = restore_handle(obj, datasets) if isinstance(obj, Checkpoint) else obj
    if device is not None:
        from .device_sim import engine_model_profile, estimate_memory
        profile = engine_model_profile(handle)
        device.register(handle.model_id,
                        estimate_memory(profile, handle.batch_size))
    return handle

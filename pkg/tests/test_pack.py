"""Packing semantics: lossless fusion, misaligned members, checkpointing."""
import numpy as np
import pytest

from packtrain import engine, packing
from packtrain.data import PreprocessCache, PreprocessSpec, synth_dataset
from packtrain.packing import (Checkpoint, MLPArch, PackError, ReplanNeeded,
                               checkpoint_model, dedup_inputs, free_model,
                               load_model, make_epoch_plan, make_handle,
                               pack_models, packed_step, restore_handle,
                               run_epoch, standalone_step)

ARCH = MLPArch(input_dim=6, hidden=(8,), classes=3)


def _dataset(n=120, seed=0):
    ds = synth_dataset(n, ARCH.input_dim, ARCH.classes, seed=seed)
    return {"d": ds}


def _handle(model_id, batch=10, steps=20, opt="sgd", lr=0.05, seed=0,
            binding="d", arch=ARCH):
    return make_handle(model_id, arch, opt, lr, batch, steps, binding, seed)


def _max_param_diff(a, b):
    return max(float(np.max(np.abs(a.params[k] - b.params[k])))
               for k in a.params)


def test_singleton_pack_matches_standalone_exactly():
    datasets = _dataset()
    packed_h = _handle("m", seed=3)
    solo = _handle("m", seed=3)
    packed = pack_models([packed_h])
    for _ in range(20):
        packed_step(packed, datasets)
        standalone_step(solo, datasets)
    assert _max_param_diff(packed_h, solo) <= 1e-12


@pytest.mark.parametrize("opt", engine.OPTIMIZERS)
def test_packed_pair_reproduces_standalone_trajectories(opt):
    datasets = _dataset()
    pa, pb = _handle("a", opt=opt, seed=1), _handle("b", opt=opt, seed=2)
    sa, sb = _handle("a", opt=opt, seed=1), _handle("b", opt=opt, seed=2)
    packed = pack_models([pa, pb])
    for _ in range(20):
        packed_step(packed, datasets)
    for _ in range(20):
        standalone_step(sa, datasets)
        standalone_step(sb, datasets)
    assert _max_param_diff(pa, sa) <= 1e-9
    assert _max_param_diff(pb, sb) <= 1e-9


def test_gradient_isolation_members_do_not_interact():
    """A member's first packed update is identical whether its pack-mate is
    a different model or absent entirely."""
    datasets = _dataset()
    alone = _handle("a", seed=1)
    with_b = _handle("a", seed=1)
    packed = pack_models([with_b, _handle("b", batch=7, seed=9,
                                          opt="adam", lr=0.001)])
    standalone_step(alone, datasets)
    packed_step(packed, datasets)
    assert _max_param_diff(alone, with_b) == 0.0


def test_dedup_inputs_is_value_preserving_and_collapses_transfers():
    datasets = _dataset()
    plain = [_handle("a", seed=1), _handle("b", seed=2)]
    deduped = [_handle("a", seed=1), _handle("b", seed=2)]
    p1 = pack_models(plain)
    p2 = dedup_inputs(pack_models(deduped))
    for _ in range(10):
        packed_step(p1, datasets)
        packed_step(p2, datasets)
    assert p1.last_step_stats["physical_inputs"] == 2
    assert p2.last_step_stats["physical_inputs"] == 1
    for a, b in zip(plain, deduped):
        assert _max_param_diff(a, b) == 0.0


def test_driver_batch_tracks_largest_active_member():
    datasets = _dataset(n=100)
    big = _handle("big", batch=50, steps=2)
    small = _handle("small", batch=10, steps=10)
    packed = pack_models([big, small])
    assert packed.driver_batch == 50
    packed_step(packed, datasets)
    assert packed.last_step_stats["driver_batch"] == 50
    packed_step(packed, datasets)
    assert big.finished
    packed_step(packed, datasets)
    assert packed.driver_batch == 10
    assert packed.last_step_stats["driver_batch"] == 10


def test_input_groups_key_on_binding_cursor_and_batch():
    datasets = _dataset()
    h1, h2, h3 = (_handle("a", batch=10), _handle("b", batch=10),
                  _handle("c", batch=20))
    packed = pack_models([h1, h2, h3])
    groups = packed.input_groups()
    assert sorted(len(g) for g in groups) == [1, 2]
    packed_step(packed, datasets)
    # a and b advance in lockstep, so they still share a group; c sits at a
    # different cursor position
    assert sorted(len(g) for g in packed.input_groups()) == [1, 2]


def test_misaligned_batches_progress_and_coverage():
    n = 1000
    datasets = {"d": synth_dataset(n, ARCH.input_dim, ARCH.classes, seed=4)}
    specs = [("m20", 20, 50), ("m50", 50, 20), ("m100", 100, 10)]
    members = [_handle(mid, batch=b, steps=s, seed=i)
               for i, (mid, b, s) in enumerate(specs)]
    solos = [_handle(mid, batch=b, steps=s, seed=i)
             for i, (mid, b, s) in enumerate(specs)]
    packed = pack_models(members)

    for _ in range(10):  # the largest-batch member's full epoch
        packed_step(packed, datasets)
    assert members[2].finished
    assert members[1].cursor.pos == n // 2  # halfway through its own epoch

    while any(not h.finished for h in members):
        packed_step(packed, datasets)
    for h, (mid, b, s) in zip(members, specs):
        assert h.cursor.steps_done == s
        np.testing.assert_array_equal(h.cursor.samples_used, 1)

    for solo in solos:
        while not solo.finished:
            standalone_step(solo, datasets)
    for h, solo in zip(members, solos):
        assert _max_param_diff(h, solo) <= 1e-9


def test_partial_final_batch_never_spans_epochs():
    datasets = _dataset(n=25)
    h = _handle("m", batch=10, steps=6)
    packed = pack_models([h])
    packed_step(packed, datasets)
    packed_step(packed, datasets)
    packed_step(packed, datasets)  # takes only the 5 leftover samples
    assert h.cursor.pos == 25 and h.cursor.epoch_index == 0
    packed_step(packed, datasets)  # rolls into epoch 1
    assert h.cursor.epoch_index == 1 and h.cursor.pos == 10


def test_epoch_plan_phases_and_replan_signal():
    datasets = _dataset(n=100)
    members = [_handle("a", batch=50, steps=100), _handle("b", batch=20, steps=100)]
    plan = make_epoch_plan(members, datasets)
    # largest batch drives first: it finishes in 2 steps, then the smaller
    # member needs 3 more to complete its own epoch
    assert plan == [("a", 2), ("b", 3)]
    packed = pack_models(members)
    losses = run_epoch(packed, datasets)
    assert len(losses) == sum(steps for _, steps in plan)
    for h in members:
        np.testing.assert_array_equal(h.cursor.samples_used, 1)
    with pytest.raises(ReplanNeeded):
        packed_step(packed, datasets, stop_at_epoch_end=True)


def test_epoch_plan_ties_break_by_model_id():
    datasets = _dataset(n=100)
    members = [_handle("z", batch=25, steps=10), _handle("a", batch=25, steps=10)]
    assert make_epoch_plan(members, datasets) == [("a", 4)]


def test_pack_rejects_duplicate_ids_and_empty():
    with pytest.raises(PackError):
        pack_models([_handle("m"), _handle("m")])
    with pytest.raises(PackError):
        pack_models([])


def test_finished_members_are_left_alone():
    datasets = _dataset()
    done = _handle("done", steps=1)
    working = _handle("working", steps=3)
    packed = pack_models([done, working])
    packed_step(packed, datasets)
    frozen = {k: v.copy() for k, v in done.params.items()}
    packed_step(packed, datasets)
    for k in frozen:
        np.testing.assert_array_equal(done.params[k], frozen[k])
    working.cursor.steps_done = working.target_steps
    with pytest.raises(ReplanNeeded):
        packed_step(packed, datasets)


def test_checkpoint_round_trip_is_exact():
    datasets = _dataset()
    h = _handle("m", opt="adam", lr=0.001, steps=30)
    for _ in range(7):
        standalone_step(h, datasets)
    ckpt = checkpoint_model(h)
    raw = ckpt.to_bytes()
    back = restore_handle(Checkpoint.from_bytes(raw), datasets)
    assert back.model_id == "m"
    assert back.arch == h.arch
    assert back.optimizer.kind == "adam"
    assert back.optimizer.step_counter == 7
    assert back.cursor.steps_done == 7 and back.cursor.pos == h.cursor.pos
    for k in h.params:
        np.testing.assert_array_equal(back.params[k], h.params[k])
    for p in h.optimizer.slots:
        for s in h.optimizer.slots[p]:
            np.testing.assert_array_equal(back.optimizer.slots[p][s],
                                          h.optimizer.slots[p][s])


def test_checkpoint_detects_corruption():
    ckpt = checkpoint_model(_handle("m"))
    raw = bytearray(ckpt.to_bytes())
    raw[20] ^= 0xFF
    with pytest.raises(PackError):
        Checkpoint.from_bytes(bytes(raw))
    with pytest.raises(PackError):
        Checkpoint.from_bytes(b"XXXX" + raw[4:])


def test_free_load_resume_equals_uninterrupted():
    datasets = _dataset()
    interrupted = _handle("m", opt="momentum", steps=40, seed=5)
    straight = _handle("m", opt="momentum", steps=40, seed=5)
    packed = pack_models([interrupted])
    for _ in range(15):
        packed_step(packed, datasets)
    ckpt, packed = free_model(packed, "m")
    assert packed.members == []
    resumed = load_model(Checkpoint.from_bytes(ckpt.to_bytes()),
                         datasets=datasets)
    packed = pack_models([resumed])
    while not resumed.finished:
        packed_step(packed, datasets)
    while not straight.finished:
        standalone_step(straight, datasets)
    assert _max_param_diff(resumed, straight) <= 1e-12


def test_mid_pack_replacement_scenario():
    """A short member finishes inside a pack, is freed, and a newcomer takes
    its place; everyone reaches target steps and the long-running member's
    trajectory is untouched by the membership change."""
    datasets = _dataset(n=200)
    short = _handle("short", batch=20, steps=10, seed=1)
    long_p = _handle("long", batch=10, steps=40, seed=2)
    long_s = _handle("long", batch=10, steps=40, seed=2)
    packed = pack_models([short, long_p])
    for _ in range(10):
        packed_step(packed, datasets)
    assert short.finished and not long_p.finished
    ckpt, packed = free_model(packed, "short")
    assert Checkpoint.from_bytes(ckpt.to_bytes()).model_id == "short"
    newcomer = _handle("late", batch=30, steps=15, seed=3)
    packed = pack_models(packed.members + [newcomer])
    while any(not h.finished for h in packed.members):
        packed_step(packed, datasets)
    assert long_p.cursor.steps_done == 40 and newcomer.cursor.steps_done == 15
    while not long_s.finished:
        standalone_step(long_s, datasets)
    assert _max_param_diff(long_p, long_s) <= 1e-9


def test_preprocessing_inside_pack_matches_standalone():
    datasets = _dataset()
    spec = PreprocessSpec(stages=(("normalize", 0.5, 2.0), ("jitter", 7)))
    cache = PreprocessCache()
    pa = _handle("a", seed=1)
    sa = _handle("a", seed=1)
    packed = dedup_inputs(pack_models([pa, _handle("b", seed=2)]))
    for _ in range(5):
        packed_step(packed, datasets, preprocess_spec=spec, cache=cache)
        standalone_step(sa, datasets, preprocess_spec=spec, cache=cache)
    assert _max_param_diff(pa, sa) == 0.0
    assert cache.hits > 0  # the standalone run reuses the packed run's rows


def test_load_model_registers_memory_on_device():
    from packtrain.device_sim import DeviceAccountant, DeviceProfile, OOMError
    device = DeviceAccountant(DeviceProfile(
        memory_capacity=300_000_000, fixed_step_overhead_ms=1,
        transfer_ms_per_sample=0.1, preprocess_ms_per_sample=0.1))
    load_model(_handle("m"), device=device)
    assert device.used > 0
    with pytest.raises(OOMError):
        load_model(_handle("m2"), device=device)
    assert "m2" not in device.resident

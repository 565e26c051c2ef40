"""Batch front-end: profiling matrices, tuning campaigns, and simulator
what-ifs driven by a declarative JSON experiment spec.

Exit codes: 0 ok, 2 bad spec, 3 fatal OOM (a single model is too large).
"""
from __future__ import annotations

import json
import os
import sys

import click

from . import device_sim, plots, tuner
from .data import synth_dataset
from .device_sim import OOMError, check_fit, estimate_step_time, estimate_memory


class SpecError(Exception):
    def __init__(self, spec_field, message):
        self.spec_field = spec_field
        super().__init__(f"spec field {spec_field!r}: {message}")


def _load_spec(path) -> dict:
    try:
        with open(path) as fh:
            spec = json.load(fh)
    except FileNotFoundError:
        raise SpecError("spec", f"{path}: no such file")
    except json.JSONDecodeError as exc:
        raise SpecError("spec", f"{path}: invalid JSON ({exc})")
    if not isinstance(spec, dict):
        raise SpecError("spec", "top level must be an object")
    return spec


def _require(spec, name, kind=None):
    if name not in spec:
        raise SpecError(name, "missing")
    value = spec[name]
    if kind is not None and not isinstance(value, kind):
        raise SpecError(name, f"expected {kind.__name__}")
    return value


def _resolve_device(ref):
    profile = _resolve_profile(ref, "device")
    if not isinstance(profile, device_sim.DeviceProfile):
        raise SpecError("device", f"{ref!r} is not a device profile")
    return profile


def _resolve_profile(ref, field="profiles"):
    try:
        if os.path.exists(ref):
            return device_sim.load_profile(ref)
        return device_sim.builtin_profile(ref)
    except device_sim.SimError as exc:
        raise SpecError(field, str(exc))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_report(rows, header, out_path):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[h]) for h in header))
    text = "\n".join(lines) + "\n"
    if out_path == "-":
        sys.stdout.write(text)
    else:
        with open(out_path, "w") as fh:
            fh.write(text)


PROFILE_HEADER = ["case", "profile", "members", "batch", "data", "optimizer",
                  "preprocess", "t_s_seq_ms", "t_s_pack_ms", "impv",
                  "memory_bytes", "swoh_ms", "oom"]


def _pack_row(case, label, members, groups, device, swoh_n, batch, data,
              optimizer="same", preprocess="on"):
    row = {"case": case, "profile": label, "members": len(members),
           "batch": batch, "data": data, "optimizer": optimizer,
           "preprocess": preprocess,
           "swoh_ms": device_sim.switching_overhead(swoh_n, device)}
    try:
        row["memory_bytes"] = check_fit(members, device)
        report = estimate_step_time(members, device, groups)
        row.update(t_s_seq_ms=report.t_s_seq_ms, t_s_pack_ms=report.t_s_pack_ms,
                   impv=report.impv, oom=0)
    except OOMError as exc:
        row.update(t_s_seq_ms=float("nan"), t_s_pack_ms=float("nan"),
                   impv=float("nan"), memory_bytes=exc.demand, oom=1)
    return row


def run_profile(spec, device) -> list:
    profiles = [_resolve_profile(p) for p in _require(spec, "profiles", list)]
    counts = spec.get("counts", [1, 2, 3, 4])
    batch_sizes = spec.get("batch_sizes", [32])
    rows = []
    for profile in profiles:
        for batch in batch_sizes:
            for count in counts:
                members = [(profile, batch)] * count
                groups = [list(range(count))]  # same data: one shared stream
                rows.append(_pack_row("sweep", profile.name, members, groups,
                                      device, count, batch, "same"))
    if spec.get("ablation") and len(profiles) >= 2 and len(batch_sizes) >= 2:
        rows.extend(_ablation_rows(profiles, batch_sizes, device))
    return rows


def _ablation_rows(profiles, batch_sizes, device):
    rows = []
    no_pre = device_sim.DeviceProfile(
        memory_capacity=device.memory_capacity,
        fixed_step_overhead_ms=device.fixed_step_overhead_ms,
        transfer_ms_per_sample=device.transfer_ms_per_sample,
        preprocess_ms_per_sample=0.0,
        contention_factor=device.contention_factor,
        switch_overhead_ms=device.switch_overhead_ms)
    for model_same in (True, False):
        for data_same in (True, False):
            for prep_on in (True, False):
                for opt_same in (True, False):
                    for batch_same in (True, False):
                        a = profiles[0]
                        b = profiles[0] if model_same else profiles[1]
                        ba = batch_sizes[0]
                        bb = batch_sizes[0] if batch_same else batch_sizes[1]
                        if not opt_same:
                            b = device_sim.ModelProfile(
                                name=b.name, parameter_bytes=b.parameter_bytes,
                                activation_bytes_per_sample=b.activation_bytes_per_sample,
                                compute_ms_per_sample=b.compute_ms_per_sample,
                                optimizer_state_multiplier=1.0)
                        members = [(a, ba), (b, bb)]
                        shared = data_same and batch_same
                        groups = [[0, 1]] if shared else [[0], [1]]
                        label = f"{a.name}+{b.name}"
                        rows.append(_pack_row(
                            "ablation", label, members, groups,
                            no_pre if not prep_on else device, 2, bb,
                            "same" if data_same else "different",
                            "same" if opt_same else "different",
                            "on" if prep_on else "off"))
    return rows


def run_simulate(spec, device) -> list:
    plans = _require(spec, "plans", list)
    rows = []
    for pi, plan in enumerate(plans):
        if not isinstance(plan, list) or not plan:
            raise SpecError("plans", f"plan {pi} must be a non-empty list")
        members, keys = [], []
        for entry in plan:
            profile = _resolve_profile(_require(entry, "profile", str), "plans")
            batch = _require(entry, "batch", int)
            members.append((profile, batch))
            keys.append((entry.get("data", "shared"), batch))
        groups: dict = {}
        for idx, key in enumerate(keys):
            groups.setdefault(key, []).append(idx)
        label = "+".join(f"{m.name}@{b}" for m, b in members)
        rows.append(_pack_row(f"plan{pi}:{label}", label, members,
                              list(groups.values()), device, len(members),
                              members[0][1],
                              "same" if len(groups) == 1 else "mixed"))
    return rows


TUNE_HEADER = ["strategy", "total_time_ms", "total_epochs", "best_config_id",
               "best_loss", "batch_size", "optimizer", "learning_rate",
               "activation"]


def _build_space(spec):
    if "space" not in spec:
        return tuner.ConfigSpace()
    sub = spec["space"]
    return tuner.ConfigSpace(
        batch_sizes=sub.get("batch_sizes", tuner.BATCH_SIZES),
        optimizers=sub.get("optimizers", tuner.OPTIMIZERS),
        learning_rates=sub.get("learning_rates", tuner.LEARNING_RATES),
        activations=sub.get("activations", tuner.ACTIVATIONS))


def run_tune(spec, device, seed, strategies=None, metric="indexsum",
             threshold=6.0) -> list:
    R = _require(spec, "R", int)
    eta = _require(spec, "eta", int)
    backend = spec.get("backend", "sim")
    space = _build_space(spec)
    strategies = strategies or spec.get(
        "strategies", ["original", "batchsize", "random", "knn"])
    m = spec.get("m", 27)
    threshold = spec.get("threshold", threshold)
    rows = []
    for strategy in strategies:
        if backend == "sim":
            model = _resolve_profile(spec.get("model_profile", "mlp3"),
                                     "model_profile")
            executor = tuner.SimulatedExecutor(
                model, device, n_samples=spec.get("n_samples", 10_000),
                seed=seed)
        elif backend == "engine":
            ds_spec = spec.get("dataset", {})
            dataset = synth_dataset(ds_spec.get("n", 500), ds_spec.get("d", 8),
                                    ds_spec.get("classes", 3), seed)
            executor = tuner.EngineExecutor(
                dataset, hidden=tuple(spec.get("hidden", [16])), seed=seed,
                device=device)
        else:
            raise SpecError("backend", f"unknown backend {backend!r}")
        metric_obj = metric
        if metric == "traintime":
            model = _resolve_profile(spec.get("model_profile", "mlp3"),
                                     "model_profile")
            metric_obj = tuner.make_traintime_metric(model, device)
        result = tuner.packed_hyperband(
            R, eta, executor, seed, strategy=strategy, space=space,
            threshold=threshold, m=m, metric=metric_obj)
        best = result.best_config
        rows.append({
            "strategy": strategy, "total_time_ms": result.total_time_ms,
            "total_epochs": result.total_epochs,
            "best_config_id": best.config_id, "best_loss": result.best_loss,
            "batch_size": best.batch_size, "optimizer": best.optimizer,
            "learning_rate": best.learning_rate,
            "activation": best.activation})
    return rows


@click.command()
@click.option("--spec", "spec_path", required=True,
              type=click.Path(), help="experiment spec (JSON)")
@click.option("--seed", type=int, default=None, help="override spec seed")
@click.option("--device", "device_ref", default=None,
              help="device profile path or builtin name")
@click.option("--out", "out_path", default=None,
              help="report path ('-' for stdout)")
@click.option("--strategy", default=None,
              type=click.Choice(["original", "batchsize", "random", "knn"]),
              help="run only this tuning strategy")
@click.option("--metric", default="indexsum",
              type=click.Choice(["indexsum", "euclid", "traintime"]))
@click.option("--threshold", type=float, default=6.0,
              help="kNN similarity threshold")
@click.option("--figures", "figures_dir", default=None,
              help="also render figures into this directory")
def main(spec_path, seed, device_ref, out_path, strategy, metric, threshold,
         figures_dir):
    """Run the experiment described by --spec and write a delimited report."""
    try:
        spec = _load_spec(spec_path)
        mode = _require(spec, "mode", str)
        seed = seed if seed is not None else spec.get("seed", 0)
        device = _resolve_device(device_ref or spec.get("device", "device_16gb"))
        out_path = out_path or spec.get("out", "-")
        if mode == "profile":
            rows = run_profile(spec, device)
            _write_report(rows, PROFILE_HEADER, out_path)
            if figures_dir:
                plots.render_profile_figures(rows, figures_dir)
        elif mode == "simulate":
            rows = run_simulate(spec, device)
            _write_report(rows, PROFILE_HEADER, out_path)
            if figures_dir:
                plots.render_simulate_figures(rows, figures_dir)
        elif mode == "tune":
            rows = run_tune(spec, device, seed,
                            strategies=[strategy] if strategy else None,
                            metric=metric, threshold=threshold)
            _write_report(rows, TUNE_HEADER, out_path)
            if figures_dir:
                plots.render_tune_figures(rows, figures_dir)
        else:
            raise SpecError("mode", f"unknown mode {mode!r}")
    except SpecError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except OOMError as exc:
        click.echo(f"fatal OOM: {exc}", err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()

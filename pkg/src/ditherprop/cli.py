"""Command-line entry point.

Exit codes: 0 success, 1 a verification check failed, 2 usage, config or
data error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import kernels, theory, verify
from .data import Dataset, load_mnist, synthetic_gaussian_task
from .distributed import noise_variance, parse_schedule, scaling_sweep
from .model import BackpropMode, build
from .quant import nsd_quantize
from .sparse import savings_ratio
from .tensor import Rng
from .trainer import (MetricsRecord, TrainConfig, sparsity_summary, train, worst_bitwidth)

log = logging.getLogger("ditherprop")

METRICS_HEADER = ["iteration", "epoch", "layer", "sparsity", "bitwidth", "loss"]
COMPARISON_HEADER = ["mode", "target_sparsity", "achieved_sparsity", "accuracy", "seed"]
SWEEP_KEYS = ["n_nodes", "s", "accuracy", "mean_sparsity", "worst_bitwidth", "comm_scalars",
              "macs", "macs_dense_equivalent", "rounds"]

CONFIG_SCHEMA = {
    "seed": None,
    "out": None,
    "model": None,
    "mode": {"variant", "s", "k", "target_sparsity", "sigma_floor"},
    "train": {"lr", "momentum", "weight_decay", "batch_size", "epochs", "lr_decay"},
    "data": {"dataset", "data_dir", "n_train", "n_test", "features", "classes",
             "separation", "noise", "train_limit", "test_limit"},
    "compare": {"targets", "seeds", "pilot_iterations", "s_max"},
    "distributed": {"n_values", "s_schedule", "max_rounds", "variance_reps", "variance_samples",
                    "verify_replicas"},
    "analyze": {"s_values", "n_samples", "probe_every"},
}

DEFAULTS = {
    "seed": 0,
    "out": "runs/latest",
    "model": {"hidden": [500, 500]},
    "mode": {"variant": "exact"},
    "train": {"lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 128, "epochs": 20},
    "data": {"dataset": "mnist", "n_train": 10000, "n_test": 2000, "features": 64,
             "classes": 10, "separation": 8.0, "noise": 0.2},
    "compare": {"targets": [0.95, 0.99], "seeds": [0, 1, 2], "pilot_iterations": 469,
                "s_max": 256.0},
    "distributed": {"n_values": [1, 2, 4, 8, 16], "s_schedule": "sqrt:2", "max_rounds": None,
                    "variance_reps": 500, "variance_samples": 16, "verify_replicas": True},
    "analyze": {"s_values": [1, 2, 3, 4, 6, 8], "n_samples": 1_000_000, "probe_every": 50},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "model":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(cfg: dict) -> None:
    for k, v in cfg.items():
        if k not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        allowed = CONFIG_SCHEMA[k]
        if allowed is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"config section {k!r} must be an object")
            bad = set(v) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {k!r}: {sorted(bad)}")


def resolve_config(args: argparse.Namespace) -> dict:
    user = {}
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        _check_keys(user)
    cfg = _merge(DEFAULTS, user)
    flags = {
        ("mode", "variant"): args.mode, ("mode", "s"): args.s, ("mode", "k"): args.k,
        ("mode", "target_sparsity"): args.target_sparsity,
        ("train", "epochs"): args.epochs, ("train", "batch_size"): args.batch,
        ("train", "lr"): args.lr, ("data", "dataset"): args.dataset,
        ("data", "data_dir"): args.data_dir or None,
        ("distributed", "s_schedule"): args.s_schedule,
    }
    for (sec, key), val in flags.items():
        if val is not None:
            cfg[sec][key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.nodes is not None:
        cfg["distributed"]["n_values"] = args.nodes
    if args.targets is not None:
        cfg["compare"]["targets"] = args.targets
    if args.seeds is not None:
        cfg["compare"]["seeds"] = args.seeds
    if not cfg["data"].get("data_dir") and os.environ.get("DATA_DIR"):
        cfg["data"]["data_dir"] = os.environ["DATA_DIR"]
    return cfg


def make_mode(cfg: dict) -> BackpropMode:
    m = dict(cfg["mode"])
    try:
        return BackpropMode(m.pop("variant"), **m)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def make_train_config(cfg: dict, mode: BackpropMode | None = None, seed=None) -> TrainConfig:
    t = dict(cfg["train"])
    if t.get("lr_decay") is not None:
        t["lr_decay"] = tuple(t["lr_decay"])
    try:
        return TrainConfig(mode=mode or make_mode(cfg), seed=cfg["seed"] if seed is None else seed, **t)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    d = cfg["data"]
    if d["dataset"] == "mnist":
        train_ds = load_mnist(d.get("data_dir"), "train")
        test_ds = load_mnist(d.get("data_dir"), "test")
    elif d["dataset"] == "synthetic":
        kw = dict(features=d["features"], classes=d["classes"], seed=cfg["seed"],
                  separation=d["separation"], noise=d["noise"])
        train_ds = synthetic_gaussian_task(d["n_train"], split="train", **kw)
        test_ds = synthetic_gaussian_task(d["n_test"], split="test", **kw)
    else:
        raise ConfigError(f"unknown dataset {d['dataset']!r}; use mnist or synthetic")
    if d.get("train_limit"):
        train_ds = train_ds.subset(slice(0, d["train_limit"]))
    if d.get("test_limit"):
        test_ds = test_ds.subset(slice(0, d["test_limit"]))
    return train_ds, test_ds


def model_factory(cfg: dict, train_ds: Dataset, seed: int):
    spec = cfg["model"]
    if not isinstance(spec, dict):
        raise ConfigError("model must be an object")

    def make():
        return build(spec, train_ds.n_features, train_ds.n_classes, seed)

    try:
        make()
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad model spec: {e}") from None
    return make


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class MetricsWriter:
    """Appends one CSV row per (iteration, layer) and flushes every iteration."""

    def __init__(self, path: Path):
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f)
        self.w.writerow(METRICS_HEADER)

    def __call__(self, rec: MetricsRecord) -> None:
        for layer, (sp, bw) in enumerate(zip(rec.sparsity, rec.bitwidth)):
            self.w.writerow([rec.iteration, rec.epoch, layer, f"{sp:.6f}", bw, f"{rec.loss:.6f}"])
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def run_training(cfg: dict, mode: BackpropMode, seed: int, train_ds, test_ds, make_model,
                 sink=None, max_iterations=None):
    tcfg = make_train_config(cfg, mode, seed)
    return train(make_model(), train_ds, tcfg, test_ds, sink=sink, max_iterations=max_iterations)


def summarize(result, tcfg: TrainConfig) -> dict:
    summ = sparsity_summary(result.records)
    return {
        "final_accuracy": result.epoch_accuracy[-1] if result.epoch_accuracy else None,
        "epoch_accuracy": result.epoch_accuracy,
        "mean_sparsity": summ["global"],
        "per_layer_sparsity": summ["per_layer"],
        "total_macs_performed": result.counter.macs_performed,
        "total_macs_dense_equivalent": result.counter.macs_dense_equivalent,
        "savings_ratio": savings_ratio(result.counter),
        "nsd_overhead_ops": result.nsd_overhead_ops,
        "worst_bitwidth": worst_bitwidth(result.records),
        "bitwidth_violations": sum(1 for r in result.records if max(r.bitwidth, default=0) > 8),
        "iterations": len(result.records),
        "mode": tcfg.mode.variant,
    }


# --- commands -------------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    mode = make_mode(cfg)
    tcfg = make_train_config(cfg, mode)
    train_ds, test_ds = load_data(cfg)
    make = model_factory(cfg, train_ds, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.csv")
    try:
        result = train(make(), train_ds, tcfg, test_ds, sink=writer)
    finally:
        writer.close()
    summary = summarize(result, tcfg)
    summary["config"] = cfg
    summary["backend"] = kernels.BACKEND
    _write_json(out / "summary.json", summary)
    print(f"accuracy {summary['final_accuracy']}  mean sparsity {summary['mean_sparsity']:.4f}  "
          f"savings ratio {summary['savings_ratio']:.4f}")
    return 0


def mean_sparsity_for(cfg, mode, train_ds, make_model, iterations) -> float:
    res = run_training(cfg, mode, cfg["seed"], train_ds, None, make_model,
                       max_iterations=iterations)
    return sparsity_summary(res.records)["global"]


def bisect_sparsity(sparsity_at, target: float, lo: float, hi: float, geometric: bool,
                    steps: int = 12, tol: float = 0.002) -> tuple[float, float, str]:
    """Find the knob value whose pilot sparsity is closest to ``target``.

    ``sparsity_at`` must be non-decreasing in the knob. Returns
    (value, achieved, status) with status ``"ok"``, ``"floor"`` when even
    ``lo`` overshoots the target, or ``"unreachable"`` when ``hi`` stays
    more than 0.02 short.
    """
    sp_lo = sparsity_at(lo)
    if sp_lo >= target:
        return lo, sp_lo, "ok" if sp_lo - target <= 0.02 else "floor"
    sp_hi = sparsity_at(hi)
    if sp_hi < target - 0.02:
        return hi, sp_hi, "unreachable"
    best = min(((lo, sp_lo), (hi, sp_hi)), key=lambda p: abs(p[1] - target))
    for _ in range(steps):
        if abs(best[1] - target) <= tol:
            break
        mid = (lo * hi) ** 0.5 if geometric else 0.5 * (lo + hi)
        sp = sparsity_at(mid)
        if abs(sp - target) < abs(best[1] - target):
            best = (mid, sp)
        if sp >= target:
            hi = mid
        else:
            lo = mid
    return best[0], best[1], "ok"


def calibrate(cfg, variant: str, target: float, train_ds, make_model):
    """Pilot-calibrated mode for ``variant`` at ``target`` mean sparsity."""
    it = cfg["compare"]["pilot_iterations"]
    if variant == "dithered":
        def mode_at(v):
            return BackpropMode("dithered", s=v)
        lo, hi, geometric = 1.0, float(cfg["compare"]["s_max"]), True
    else:
        # nominal per-layer target; small layers round k, so the mean needs tuning
        def mode_at(v):
            return BackpropMode("meprop", target_sparsity=v)
        lo, hi, geometric = 0.0, 1.0, False

    def sparsity_at(v):
        return mean_sparsity_for(cfg, mode_at(v), train_ds, make_model, it)

    value, achieved, status = bisect_sparsity(sparsity_at, target, lo, hi, geometric)
    return mode_at(value), achieved, status


def cmd_compare_meprop(cfg: dict) -> int:
    train_ds, test_ds = load_data(cfg)
    make = model_factory(cfg, train_ds, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows, warnings, calibration = [], [], []
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COMPARISON_HEADER)
        for target in cfg["compare"]["targets"]:
            for name in ("meprop", "dithered"):
                mode, pilot_sp, status = calibrate(cfg, name, target, train_ds, make)
                calibration.append({"mode": name, "target_sparsity": target, "status": status,
                                    "pilot_sparsity": pilot_sp, "s": mode.s,
                                    "nominal_target": mode.target_sparsity})
                if status != "ok":
                    msg = (f"target {target}: {name} pilot sparsity {pilot_sp:.4f} is more than "
                           f"0.02 from the target ({status})")
                    warnings.append(msg)
                    print(f"warning: {msg}" + ("; skipping" if status == "unreachable" else ""),
                          file=sys.stderr)
                    if status == "unreachable":
                        continue
                for seed in cfg["compare"]["seeds"]:
                    make_s = model_factory(cfg, train_ds, seed)
                    res = run_training(cfg, mode, seed, train_ds, test_ds, make_s)
                    row = [name, target, sparsity_summary(res.records)["global"],
                           res.epoch_accuracy[-1] if res.epoch_accuracy else float("nan"), seed]
                    w.writerow(row)
                    f.flush()
                    rows.append(row)
                    log.info("%s target=%.3f seed=%d -> %s", name, target, seed, row[2:4])
    _write_json(out / "comparison.json", {"rows": [dict(zip(COMPARISON_HEADER, r)) for r in rows],
                                          "calibration": calibration, "warnings": warnings,
                                          "config": cfg})
    return 0


def cmd_distributed(cfg: dict) -> int:
    mode = make_mode(cfg)
    if mode.variant == "exact":
        mode = BackpropMode("dithered", s=1.0)
    tcfg = make_train_config(cfg, mode)
    dcfg = cfg["distributed"]
    try:
        parse_schedule(dcfg["s_schedule"])(1)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad s schedule: {e}") from None
    train_ds, test_ds = load_data(cfg)
    make = model_factory(cfg, train_ds, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    points = scaling_sweep(make, train_ds, test_ds, list(dcfg["n_values"]), dcfg["s_schedule"],
                           tcfg, dcfg["max_rounds"], dcfg["verify_replicas"])
    report = {"points": [], "config": cfg, "backend": kernels.BACKEND}
    for p in points:
        d = asdict(p)
        d["macs"] = d.pop("macs_performed")
        report["points"].append({k: d[k] for k in SWEEP_KEYS})
    if dcfg["variance_reps"]:
        ns = [n for n in dcfg["n_values"] if dcfg["variance_samples"] % n == 0]
        sched = parse_schedule(dcfg["s_schedule"])
        fixed = BackpropMode(mode.variant, s=sched(1))
        k = dcfg["variance_samples"]
        net = make()
        var = [noise_variance(net, train_ds.images[:k], train_ds.labels[:k], fixed, n,
                              dcfg["variance_reps"], cfg["seed"]) for n in ns]
        report["noise_variance"] = {"n_values": ns, "variance": var, "s": fixed.s}
        if len(set(ns)) >= 3:
            report["variance_slope"] = theory.variance_slope(ns, var)
    _write_json(out / "sweep.json", report)
    for p in report["points"]:
        print(f"N={p['n_nodes']:<3d} s={p['s']:<7.3g} acc={p['accuracy']:.4f} "
              f"sparsity={p['mean_sparsity']:.4f} bits={p['worst_bitwidth']} comm={p['comm_scalars']}")
    return 0


def cmd_analyze_dither(cfg: dict, with_data: bool) -> int:
    acfg = cfg["analyze"]
    out = Path(cfg["out"])
    rng = Rng(cfg["seed"], (0xA7,))
    rows = []
    for s in acfg["s_values"]:
        g = rng.substream(int(s * 1000)).normal(size=(1000, max(1, acfg["n_samples"] // 1000)))
        emp = nsd_quantize(g, s, rng.substream(int(s * 1000), 1))[1].sparsity
        rows.append({"s": s, "predicted_p0": theory.predict_sparsity("gaussian", s),
                     "empirical_p0": emp,
                     "laplace_p0": theory.predict_sparsity("laplace", s)})
    moments = []
    for r in verify.X_OVER_DELTA:
        rep = theory.estimate_error_moments(r, 1.0, 100_000, rng.substream(7, int(r * 100) + 1000))
        moments.append(asdict(rep))
    report = {"sparsity": rows, "moments": moments, "config": cfg}
    if with_data:
        mode = make_mode(cfg)
        if not mode.dithered:
            mode = BackpropMode("dithered", s=3.0)
        train_ds, test_ds = load_data(cfg)
        make = model_factory(cfg, train_ds, cfg["seed"])
        layers = []

        def probe(rec, ctx):
            if rec.iteration % acfg["probe_every"] == 0:
                for st in ctx.stats:
                    layers.append({"iteration": rec.iteration, "layer": st.layer,
                                   "empirical": st.sparsity,
                                   "predicted": theory.predict_layer_sparsity(st.grad, mode.s)})

        tcfg = make_train_config(cfg, mode)
        train(make(), train_ds, tcfg, None, on_step=probe)
        report["layer_predictions"] = layers
        if layers:
            report["max_layer_prediction_error"] = max(abs(x["empirical"] - x["predicted"])
                                                       for x in layers)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "theory.json", report)
    with open(out / "theory.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["s", "predicted_p0", "empirical_p0", "laplace_p0"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"s={r['s']:<4g} predicted={r['predicted_p0']:.4f} empirical={r['empirical_p0']:.4f}")
    return 0


def cmd_verify(cfg: dict) -> int:
    return verify.main()


# --- argument parsing -------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--mode", choices=["exact", "dithered", "meprop", "exact_8bit",
                                           "dithered_8bit"])
    common.add_argument("--s", type=float, help="dither scale factor")
    common.add_argument("--k", type=int, help="meProp entries kept per column")
    common.add_argument("--target-sparsity", type=float, help="meProp target sparsity")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset", choices=["mnist", "synthetic"])
    common.add_argument("--data-dir", help="directory with MNIST IDX files (or set DATA_DIR)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--nodes", type=_int_list, help="comma-separated node counts")
    common.add_argument("--s-schedule", help="sqrt:S0, const:S0 or a number")
    common.add_argument("--targets", type=_float_list, help="comma-separated target sparsities")
    common.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ditherprop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model and write metrics")
    sub.add_parser("compare-meprop", parents=[common],
                   help="dithered backprop vs meProp at matched sparsity")
    sub.add_parser("distributed", parents=[common], help="synchronous data-parallel sweep over N")
    ad = sub.add_parser("analyze-dither", parents=[common],
                        help="sparsity and error-moment predictions vs measurement")
    ad.add_argument("--with-data", action="store_true",
                    help="also fit recorded layer gradients from a short training run")
    sub.add_parser("verify", parents=[common], help="run the statistical self-check")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "compare-meprop":
            return cmd_compare_meprop(cfg)
        if args.command == "distributed":
            return cmd_distributed(cfg)
        if args.command == "analyze-dither":
            return cmd_analyze_dither(cfg, args.with_data)
        return cmd_verify(cfg)
    except (ConfigError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

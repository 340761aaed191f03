"""Desk-scale studies: loss stability (PRL vs pixel L2), leave-one-out ablation,
and the decomposition parameter report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .data_io import SynthSpec, gen_synthetic, load_dataset
from .train import TrainConfig, evaluate, train


@dataclass
class ExperimentSpec:
    name: str = "study"
    dataset: dict | str = field(default_factory=dict)  # SynthSpec fields, or a dataset dir
    model: dict = field(default_factory=lambda: {"preset": "tiny"})
    loss_kinds: tuple[str, ...] = ("prl", "l2")
    epochs: int = 100
    repeats: int = 3
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str | None = None
    train: dict = field(default_factory=dict)
    configurations: list[dict] | None = None

    def __post_init__(self):
        self.loss_kinds = tuple(self.loss_kinds)
        self.seeds = tuple(self.seeds)[:self.repeats] if self.repeats else tuple(self.seeds)
        if len(self.seeds) < self.repeats:
            raise ValueError(f"{self.repeats} repeats requested but only {len(self.seeds)} seeds given")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def load_data(self):
        if isinstance(self.dataset, str):
            return load_dataset(self.dataset)
        return gen_synthetic(SynthSpec.from_dict(self.dataset))

    def model_config(self, seed, **overrides):
        return M.ModelConfig.from_dict({**self.model, "seed": seed, **overrides})

    def train_config(self, seed):
        return TrainConfig.from_dict({**self.train, "seed": seed})


def tail_variance(curve, fraction=0.25):
    """Population variance of the last ceil(fraction * len) entries."""
    if not curve:
        return float("nan")
    n = max(1, math.ceil(fraction * len(curve)))
    return float(np.var(np.asarray(curve[-n:], dtype=np.float64)))


@dataclass
class StabilityReport:
    curves: dict  # (kind, seed) -> [val MAE per epoch]
    tail_variance: dict  # (kind, seed) -> float
    diverged: dict  # (kind, seed) -> bool
    rng_hashes: dict  # (kind, seed) -> str
    bands: dict  # kind -> {"mean": [...], "min": [...], "max": [...]}
    summary: dict  # kind -> {"median_tail_variance", "median_final_mae", "n_runs"}
    results: dict = field(default_factory=dict, repr=False)

    def prl_more_stable(self):
        return self.summary["prl"]["median_tail_variance"] < self.summary["l2"]["median_tail_variance"]


def run_stability_study(spec: ExperimentSpec) -> StabilityReport:
    ds = spec.load_data()
    curves, tails, div, hashes, results = {}, {}, {}, {}, {}
    for seed in spec.seeds:
        for kind in spec.loss_kinds:
            res = train(ds, spec.model_config(seed), kind, spec.epochs, spec.train_config(seed))
            key = (kind, seed)
            curves[key] = res.log.val_mae_curve()
            tails[key] = tail_variance(curves[key])
            div[key] = res.log.diverged
            hashes[key] = res.log.rng_hash
            results[key] = res
    bands, summary = {}, {}
    for kind in dict.fromkeys(spec.loss_kinds):
        ok = [curves[(kind, s)] for s in spec.seeds if not div[(kind, s)]]
        if ok:
            arr = np.array(ok)
            bands[kind] = {"mean": arr.mean(0).tolist(), "min": arr.min(0).tolist(), "max": arr.max(0).tolist()}
        summary[kind] = {
            "n_runs": len(ok),
            "n_diverged": sum(div[(kind, s)] for s in spec.seeds),
            "median_tail_variance": float(np.median([tails[(kind, s)] for s in spec.seeds
                                                     if not div[(kind, s)]] or [np.nan])),
            "median_final_mae": float(np.median([c[-1] for c in ok] or [np.nan])),
        }
    report = StabilityReport(curves, tails, div, hashes, bands, summary, results)
    if spec.output_dir:
        write_stability(report, spec)
    return report


def write_stability(report: StabilityReport, spec: ExperimentSpec):
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["loss", "seed", "epoch", "val_mae"])
        for (kind, seed), curve in report.curves.items():
            for e, v in enumerate(curve):
                wr.writerow([kind, seed, e, repr(v)])
    with open(out / "bands.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["loss", "epoch", "mean", "min", "max"])
        for kind, b in report.bands.items():
            for e in range(len(b["mean"])):
                wr.writerow([kind, e, repr(b["mean"][e]), repr(b["min"][e]), repr(b["max"][e])])
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["loss", "n_runs", "n_diverged", "median_tail_variance", "median_final_mae"])
        for kind, s in report.summary.items():
            wr.writerow([kind, s["n_runs"], s["n_diverged"], repr(s["median_tail_variance"]),
                         repr(s["median_final_mae"])])
    lines = [f"stability study '{spec.name}': {len(spec.seeds)} seeds x {spec.epochs} epochs"]
    for (kind, seed), tv in report.tail_variance.items():
        flag = " DIVERGED (excluded)" if report.diverged[(kind, seed)] else ""
        lines.append(f"  {kind:>3} seed {seed}: tail variance {tv:.6g}, final val MAE "
                     f"{report.curves[(kind, seed)][-1] if report.curves[(kind, seed)] else float('nan'):.4f}"
                     f", rng {report.rng_hashes[(kind, seed)][:12]}{flag}")
    for kind, s in report.summary.items():
        lines.append(f"  {kind}: median tail variance {s['median_tail_variance']:.6g}, "
                     f"median final MAE {s['median_final_mae']:.4f}")
    if "prl" in report.summary and "l2" in report.summary:
        lines.append(f"  PRL tail variance below L2: {report.prl_more_stable()}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


ABLATION_FLAGS = ("CA", "DS", "DT", "PRL")
DEFAULT_ABLATION = [
    {"CA": False, "DS": False, "DT": False, "PRL": False},
    {"CA": False, "DS": True, "DT": True, "PRL": True},
    {"CA": True, "DS": False, "DT": True, "PRL": True},
    {"CA": True, "DS": True, "DT": False, "PRL": True},
    {"CA": True, "DS": True, "DT": True, "PRL": False},
    {"CA": True, "DS": True, "DT": True, "PRL": True},
]


def ablation_setup(spec: ExperimentSpec, flags: dict, seed: int):
    """(ModelConfig, loss kind) for one flag set: CA off bypasses attention, DS/DT off force
    every dilation rate in that block type to 1, PRL off swaps to pixel-wise L2."""
    base = spec.model_config(seed)
    s, t = base.spatial, base.temporal
    if not flags.get("DS", True):
        s = replace(s, dilation_rates=(1,) * len(s.dilation_rates))
    if not flags.get("DT", True):
        t = replace(t, dilation_rates=(1,) * len(t.dilation_rates))
    cfg = replace(base, spatial=s, temporal=t, attention=bool(flags.get("CA", True)))
    return cfg, "prl" if flags.get("PRL", True) else "l2"


def setup_diff(a, b):
    """Names of the components that differ between two ``(ModelConfig, loss)`` setups."""
    (ca, la), (cb, lb) = a, b
    diff = []
    if ca.attention != cb.attention:
        diff.append("CA")
    if ca.spatial.dilation_rates != cb.spatial.dilation_rates:
        diff.append("DS")
    if ca.temporal.dilation_rates != cb.temporal.dilation_rates:
        diff.append("DT")
    if la != lb:
        diff.append("PRL")
    rest_a = replace(ca, attention=True, spatial=replace(ca.spatial, dilation_rates=(1,)),
                     temporal=replace(ca.temporal, dilation_rates=(1,)))
    rest_b = replace(cb, attention=True, spatial=replace(cb.spatial, dilation_rates=(1,)),
                     temporal=replace(cb.temporal, dilation_rates=(1,)))
    if rest_a != rest_b:
        diff.append("other")
    return diff


def run_ablation(spec: ExperimentSpec):
    """Returns a list of rows: flags + per-seed and median MAE/MSE."""
    ds = spec.load_data()
    _, val = ds.split(spec.train_config(0).val_fraction)
    configs = spec.configurations or DEFAULT_ABLATION
    rows = []
    for flags in configs:
        per_seed = []
        for seed in spec.seeds:
            cfg, loss = ablation_setup(spec, flags, seed)
            res = train(ds, cfg, loss, spec.epochs, spec.train_config(seed))
            mae, mse = evaluate(val, cfg, res.params)
            per_seed.append({"seed": seed, "mae": mae, "mse": mse, "diverged": res.log.diverged})
        rows.append({**{k: bool(flags.get(k, True)) for k in ABLATION_FLAGS},
                     "MAE": float(np.median([r["mae"] for r in per_seed])),
                     "MSE": float(np.median([r["mse"] for r in per_seed])),
                     "runs": per_seed})
    if spec.output_dir:
        write_ablation(rows, spec)
    return rows


def write_ablation(rows, spec):
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mark = lambda v: "x" if v else ""
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([*ABLATION_FLAGS, "MAE", "MSE"])
        for r in rows:
            wr.writerow([mark(r[k]) for k in ABLATION_FLAGS] + [repr(r["MAE"]), repr(r["MSE"])])
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([*ABLATION_FLAGS, "seed", "MAE", "MSE", "diverged"])
        for r in rows:
            for run in r["runs"]:
                wr.writerow([mark(r[k]) for k in ABLATION_FLAGS] +
                            [run["seed"], repr(run["mae"]), repr(run["mse"]), run["diverged"]])
    full = [r for r in rows if all(r[k] for k in ABLATION_FLAGS)]
    lines = [f"ablation '{spec.name}': {len(spec.seeds)} seeds x {spec.epochs} epochs, median over seeds"]
    for r in rows:
        on = "+".join(k for k in ABLATION_FLAGS if r[k]) or "none"
        lines.append(f"  {on:<16} MAE {r['MAE']:.4f}  MSE {r['MSE']:.4f}")
    if full:
        worse = [r for r in rows if r is not full[0] and r["MAE"] < full[0]["MAE"]]
        lines.append("  full configuration has the lowest median MAE: "
                     f"{not worse} (expected direction, not guaranteed)")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def run_decomposition_report(cfg: M.ModelConfig, output_dir=None):
    cp = M.count_params(cfg)
    stages = cp["stages"]
    report = {
        "stages": stages,
        "total_params": cp["total"],
        "per_group": cp["per_group"],
        "stage_full3d_total": sum(s["full3d"] for s in stages),
        "stage_decomposed_total": sum(s["decomposed"] for s in stages),
        "reference_total": M.REFERENCE_PARAM_COUNT,
        "delta_vs_reference": cp["total"] - M.REFERENCE_PARAM_COUNT,
    }
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "decomposition.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["stage", "dilation", "c_in", "c_out", "full3d", "decomposed", "ratio", "kernel_ratio"])
            for s in stages:
                wr.writerow([s["stage"], s["dilation"], s["c_in"], s["c_out"], s["full3d"], s["decomposed"],
                             repr(s["ratio"]), repr(s["kernel_ratio"])])
        with open(out / "params.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["layer", "params"])
            for k, v in cp["per_layer"].items():
                wr.writerow([k, v])
            wr.writerow(["total", cp["total"]])
        (out / "summary.txt").write_text(format_decomposition(report))
    return report


def format_decomposition(report) -> str:
    lines = ["temporal stages: full 3x3x3 vs spatial 3x3 + temporal 3 (c_mid = c_out, no bias)"]
    for s in report["stages"]:
        lines.append(f"  {s['stage']:<18} r={s['dilation']} {s['c_in']}->{s['c_out']}: "
                     f"full {s['full3d']:>9}  decomposed {s['decomposed']:>9}  ratio {s['ratio']:.4f}  "
                     f"per-kernel {s['kernel_ratio']:.4f}")
    lines.append(f"  stage totals: full {report['stage_full3d_total']}  decomposed {report['stage_decomposed_total']}")
    for g, n in report["per_group"].items():
        lines.append(f"  {g:<10} {n:>12,}")
    lines.append(f"  total      {report['total_params']:>12,}")
    d = report["delta_vs_reference"]
    lines.append(f"  reference total {report['reference_total']:,} (18.14M); delta {d:+,} ({d / report['reference_total']:+.3%})")
    return "\n".join(lines) + "\n"

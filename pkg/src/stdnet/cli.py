"""Command-line entry point: ``stdnet <command> ...``.

Every command exits 0 on success; failures print a single ``error: <Kind>: <message>``
line on stderr and exit 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, experiments
from . import model as M
from .data_io import (SynthSpec, export_density, gen_synthetic, load_annotations, load_checkpoint,
                      load_clip, load_dataset, save_checkpoint, save_dataset)
from .density import density_for
from .train import TrainConfig, evaluate, train


def _read_json(path):
    return json.loads(Path(path).read_text())


def _model_and_train_cfg(path):
    d = _read_json(path) if path else {"preset": "tiny"}
    tcfg = TrainConfig.from_dict(d.pop("train", {}))
    return M.ModelConfig.from_dict(d), tcfg


def cmd_gen_synth(a):
    spec = SynthSpec.from_dict(_read_json(a.spec)) if a.spec else SynthSpec()
    ds = gen_synthetic(spec)
    save_dataset(ds, a.out)
    print(json.dumps({"clips": len(ds), "T": ds.T, "out": str(a.out)}))


def cmd_densitymap(a):
    anns = load_annotations(a.ann)
    match = [x for x in anns if x.frame_id == a.frame]
    if not match:
        raise KeyError(f"frame {a.frame} not in {a.ann}")
    dm = density_for(match[0], a.sigma)
    export_density(dm, a.out, a.format)
    print(json.dumps({"frame": a.frame, "count": dm.count, "points": len(match[0]), "out": str(a.out)}))


def cmd_train(a):
    cfg, tcfg = _model_and_train_cfg(a.config)
    if a.seed is not None:
        cfg.seed = tcfg.seed = a.seed
    ds = load_dataset(a.data)
    res = train(ds, cfg, a.loss, a.epochs, tcfg)
    if a.log:
        res.log.write(a.log)
    save_checkpoint(a.out, cfg, res.params)
    last = res.log.epoch_rows()[-1] if res.log.epoch_rows() else {}
    print(json.dumps({"checkpoint": str(a.out), "diverged": res.log.diverged,
                      "val_mae": last.get("val_mae"), "val_mse": last.get("val_mse")}))
    return 1 if res.log.diverged else 0


def cmd_eval(a):
    cfg, params = load_checkpoint(a.checkpoint)
    ds = load_dataset(a.data)
    if a.split == "val":
        ds = ds.split()[1]
    mae, mse = evaluate(ds, cfg, params)
    print(json.dumps({"clips": len(ds), "mae": mae, "mse": mse}))


def cmd_predict(a):
    cfg, params = load_checkpoint(a.checkpoint)
    clip = load_clip(a.clip, a.index)
    dm = M.forward(clip, cfg, params)
    export_density(dm, a.out, a.format)
    print(json.dumps({"count": dm.count, "out": str(a.out)}))


def cmd_gradcheck(a):
    names = None if a.all or not a.op else a.op
    results = checks.run(names)
    ok = True
    for name, r in results.items():
        ok &= bool(r.passed)
        print(f"{name:<16} {'PASS' if r.passed else 'FAIL'}  max_rel_err={r.max_rel_err:.3e}  n={r.n_checked}")
    return 0 if ok else 1


def cmd_attn_dump(a):
    cfg, params = load_checkpoint(a.checkpoint)
    clip = load_clip(a.clip, a.index)
    with open(a.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["block_id", "channel", "weight"])
        for block, alpha in M.attention_weights(clip, cfg, params):
            if alpha.ndim == 2:  # spatial gates: one vector per time slot
                for t in range(alpha.shape[1]):
                    for c, v in enumerate(alpha[:, t]):
                        wr.writerow([f"{block}/t{t}", c, repr(float(v))])
            else:
                for c, v in enumerate(alpha):
                    wr.writerow([block, c, repr(float(v))])
    print(json.dumps({"out": str(a.out)}))


def cmd_count_params(a):
    cfg, _ = _model_and_train_cfg(a.config) if a.config else (M.ModelConfig.full(), None)
    cp = M.count_params(cfg)
    for layer, n in cp["per_layer"].items():
        print(f"{layer:<24} {n:>12,}")
    print(f"{'total':<24} {cp['total']:>12,}")
    print(f"max temporal-stage decomposed/full3d ratio: {cp['decomposed_vs_full3d_ratio']:.4f}")


def cmd_study(a):
    if a.kind == "decomp":
        cfg, _ = _model_and_train_cfg(a.config) if a.config else (M.ModelConfig.full(), None)
        rep = experiments.run_decomposition_report(cfg, a.out)
        print(experiments.format_decomposition(rep), end="")
        return 0
    if not a.spec:
        raise ValueError(f"study {a.kind} needs --spec")
    spec = experiments.ExperimentSpec.from_dict(_read_json(a.spec))
    if a.out:
        spec.output_dir = a.out
    spec.output_dir = spec.output_dir or f"study_{a.kind}"
    if a.kind == "stability":
        experiments.run_stability_study(spec)
    else:
        experiments.run_ablation(spec)
    print((Path(spec.output_dir) / "summary.txt").read_text(), end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stdnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", help="generate a synthetic moving-crowd dataset")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("densitymap", help="render a ground-truth density map")
    s.add_argument("--ann", required=True)
    s.add_argument("--sigma", default="fixed:3", help="fixed:S or adaptive:BETA,K")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--format", choices=["dmap", "csv"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_densitymap)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--loss", choices=["prl", "l2"], default="prl")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--log")
    s.add_argument("--out", default="model.stdn")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MAE/MSE of a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["all", "val"], default="all")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict the density map of one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--format", choices=["dmap", "csv"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    s.add_argument("--op", action="append", choices=sorted(checks.CHECKS))
    s.add_argument("--all", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("attn-dump", help="export channel-attention weights for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn_dump)

    s = sub.add_parser("count-params", help="per-layer parameter table")
    s.add_argument("--config")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("study", help="run a scripted study")
    s.add_argument("kind", choices=["stability", "ablation", "decomp"])
    s.add_argument("--spec")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Training loop, evaluation and the CSV training log."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data_io import ClipDataset
from .losses import PRLConfig, compute_loss, mae_mse
from .optim import AdamState, NonFiniteGradient, adam_step, lr_at

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "step", "lr", "loss_total", "loss_z1", "loss_z2", "loss_z3", "val_mae", "val_mse"]


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    halve_every: int = 30
    batch_size: int = 1
    flip_prob: float = 0.5
    val_fraction: float = 0.2
    prl: PRLConfig = field(default_factory=PRLConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "prl" in d and isinstance(d["prl"], dict):
            d["prl"] = PRLConfig(**d["prl"])
        return cls(**d)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    diverged: bool = False
    rng_hash: str = ""

    def epoch_rows(self):
        return [r for r in self.rows if r["step"] == ""]

    def val_mae_curve(self):
        return [r["val_mae"] for r in self.epoch_rows()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class TrainResult:
    params: dict
    log: TrainLog
    config: M.ModelConfig
    seconds: float = 0.0  # wall time of the training loop, not part of the log


def predict_counts(ds: ClipDataset, cfg: M.ModelConfig, params, bypass_attention=False):
    return [float(M.forward(c.frames, cfg, params, bypass_attention=bypass_attention).values.sum())
            for c in ds.clips]


def evaluate(ds: ClipDataset, cfg: M.ModelConfig, params, bypass_attention=False):
    """Returns (MAE, MSE) of integrated counts over ``ds``."""
    preds = predict_counts(ds, cfg, params, bypass_attention)
    gts = [float(ds.density(i).sum()) for i in range(len(ds))]
    return mae_mse(preds, gts)


def _loss_fields(rep):
    z = {f"loss_z{i}": "" for i in (1, 2, 3)}
    for zz, _, v in rep.per_patch:
        if zz <= 3:
            z[f"loss_z{zz}"] = v
    return z


def train(ds: ClipDataset, cfg: M.ModelConfig, loss_kind: str = "prl", epochs: int = 1,
          tcfg: TrainConfig | None = None, params: dict | None = None,
          bypass_attention: bool | None = None) -> TrainResult:
    """Adam training on the leading clips of ``ds``, validating on the tail after each epoch.

    Data order and flip decisions come from an RNG seeded only by
    ``tcfg.seed``, so runs that differ only in ``loss_kind`` see identical
    batches.  A non-finite loss or gradient stops training; the returned params
    are those of the last good step and ``log.diverged`` is set.
    """
    tcfg = tcfg or TrainConfig()
    if ds.T != cfg.T:
        raise ValueError(f"dataset T={ds.T} but model T={cfg.T}")
    if bypass_attention is None:
        bypass_attention = not cfg.attention
    params = M.init_params(cfg) if params is None else params
    train_ds, val_ds = ds.split(tcfg.val_fraction)
    dt = cfg.np_dtype
    gts = [(train_ds.density(i).astype(dt), train_ds.density(i, flipped=True).astype(dt))
           for i in range(len(train_ds))]
    frames = [np.asarray(c.frames, dtype=dt) for c in train_ds.clips]
    val_gt = [float(val_ds.density(i).sum()) for i in range(len(val_ds))]

    t0 = time.perf_counter()
    rng = np.random.default_rng([tcfg.seed, 1])
    stream = hashlib.sha256()
    state = AdamState(lr=tcfg.base_lr)
    tlog = TrainLog()
    step = 0
    for epoch in range(epochs):
        state.lr = lr_at(epoch, tcfg.base_lr, tcfg.halve_every)
        order = rng.permutation(len(train_ds))
        flips = rng.random(len(train_ds)) < tcfg.flip_prob
        stream.update(order.tobytes() + flips.tobytes())
        totals = []
        for s in range(0, len(order), tcfg.batch_size):
            batch = order[s:s + tcfg.batch_size]
            preds, caches, targets = [], [], []
            for i in batch:
                clip = frames[i][..., ::-1] if flips[i] else frames[i]
                out, cache = M.forward(clip, cfg, params, return_cache=True, bypass_attention=bypass_attention)
                preds.append(out)
                caches.append(cache)
                targets.append(gts[i][1] if flips[i] else gts[i][0])
            rep, dpreds = compute_loss(loss_kind, preds, targets, tcfg.prl)
            if not np.isfinite(rep.total):
                log.warning("non-finite loss at epoch %d step %d; stopping", epoch, step)
                tlog.diverged = True
                break
            grads = None
            for g, cache in zip(dpreds, caches):
                gi = M.backward(g, cfg, params, cache)
                grads = gi if grads is None else {k: grads[k] + gi[k] for k in grads}
            try:
                adam_step(params, grads, state)
            except NonFiniteGradient as exc:
                log.warning("%s at epoch %d step %d; stopping", exc, epoch, step)
                tlog.diverged = True
                break
            totals.append(rep)
            tlog.rows.append({"epoch": epoch, "step": step, "lr": state.lr, "loss_total": rep.total,
                              **_loss_fields(rep), "val_mae": "", "val_mse": ""})
            step += 1
        if tlog.diverged:
            break
        if len(val_ds):
            preds = predict_counts(val_ds, cfg, params, bypass_attention)
            vmae, vmse = mae_mse(preds, val_gt)
        else:
            vmae = vmse = ""
        mean_total = float(np.mean([r.total for r in totals])) if totals else ""
        comp = {f"loss_z{z}": "" for z in (1, 2, 3)}
        if totals and totals[0].per_patch:
            for z in (1, 2, 3):
                vals = [r.component(z) for r in totals if r.component(z) is not None]
                if vals:
                    comp[f"loss_z{z}"] = float(np.mean(vals))
        tlog.rows.append({"epoch": epoch, "step": "", "lr": state.lr, "loss_total": mean_total,
                          **comp, "val_mae": vmae, "val_mse": vmse})
        log.info("epoch %d lr %.3g loss %s val_mae %s", epoch, state.lr, mean_total, vmae)
    tlog.rng_hash = stream.hexdigest()
    return TrainResult(params, tlog, cfg, time.perf_counter() - t0)

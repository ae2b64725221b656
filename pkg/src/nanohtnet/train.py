"""Fine-tuning, evaluation and benchmarking loops.

The network regresses metres; predictions are multiplied by ``OUTPUT_SCALE``
before the loss so that losses and metrics are both in millimetres.  The
training target is the root-relative pose in the frame of the camera that
produced the 2D input.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tn
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .datagen import Sequence3D, camera_frame_targets, horizontal_flip, read_dataset
from .errors import ConfigError, ContractError, TrainingError
from .metrics import mpjpe_loss, p_mpjpe_frames
from .mixers import _attn_shapes, attention_forward
from .model import (DESK, ModelConfig, as_tensors, flops_count, forward, init_params, init_tensor,
                    make_rng, supervision_indices)
from .optim import AdamState, adam_step
from .skeleton import SkeletonTopology, build_h36m17
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

OUTPUT_SCALE = 1000.0


@dataclass
class TrainConfig:
    model: ModelConfig = DESK
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.95
    seed: int = 0
    dataset: Optional[str] = None
    eval_dataset: Optional[str] = None
    pretrained: Optional[str] = None
    flip: bool = True
    stride: int = 1
    eval_stride: int = 3
    out_dir: Optional[str] = None

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 1 or self.batch_size < 1 or self.stride < 1 or self.eval_stride < 1:
            raise ConfigError("epochs, batch_size and strides must be positive")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Windows:
    inputs: np.ndarray     # [N, rf, J, 2]
    targets: np.ndarray    # [N, S, J, 3] mm, camera frame, root-relative
    seq_ids: np.ndarray    # [N]
    tags: list
    centre: int            # index of the window centre inside the S supervised frames
    view_ids: np.ndarray = None   # [N] camera that produced each window

    def __len__(self):
        return len(self.inputs)


def window_starts(frames: int, rf: int, stride: int = 1) -> np.ndarray:
    """Start indices of every full ``rf``-frame window, ``stride`` apart."""
    if frames < rf:
        return np.zeros(0, dtype=int)
    return np.arange(0, frames - rf + 1, stride)


def make_windows(seqs: list[Sequence3D], cfg: ModelConfig, stride: int = 1) -> Windows:
    if cfg.output_mode == "idct_full":
        sup = np.arange(cfg.rf)
    else:
        sup = supervision_indices(cfg.rf, cfg.t_k)
    centre = int(np.flatnonzero(sup == cfg.rf // 2)[0])
    xs, ys, ids, views, tags = [], [], [], [], []
    for si, seq in enumerate(seqs):
        starts = window_starts(seq.frames, cfg.rf, stride)
        if len(starts) == 0:
            logger.warning("sequence %d has %d frames < rf=%d; skipped", si, seq.frames, cfg.rf)
            continue
        for v in range(len(seq.cameras)):
            target = camera_frame_targets(seq, v).astype(np.float32)
            xs.append(np.stack([seq.poses2d[v, s:s + cfg.rf] for s in starts]))
            ys.append(np.stack([target[s + sup] for s in starts]))
            ids.extend([si] * len(starts))
            views.extend([v] * len(starts))
            tags.extend([seq.tag] * len(starts))
    if not xs:
        raise ContractError("no sequence is long enough for one window")
    return Windows(np.concatenate(xs), np.concatenate(ys), np.asarray(ids), tags, centre,
                   np.asarray(views))


# ---------------------------------------------------------------- steps


def loss_and_grads(params: dict, x: np.ndarray, y: np.ndarray, cfg: ModelConfig,
                   topo: Optional[SkeletonTopology] = None) -> tuple[float, dict]:
    tape = Tape()
    p = as_tensors(params, tape)
    pred = tn.scale(forward(p, Tensor(x), cfg, topo), OUTPUT_SCALE)
    loss = mpjpe_loss(pred, y)
    g = tn.backward(tape, loss)
    return float(loss.data), {k: g[t.node] for k, t in p.items()}


def predict_mm(params: dict, x: np.ndarray, cfg: ModelConfig, topo=None,
               batch: int = 256) -> np.ndarray:
    p = as_tensors(params)
    dtype = next(iter(params.values())).dtype
    out = [forward(p, Tensor(np.asarray(x[i:i + batch], dtype=dtype)), cfg, topo).data
           for i in range(0, len(x), batch)]
    return np.concatenate(out) * OUTPUT_SCALE


def flip_batch(x: np.ndarray, y: np.ndarray, mask: np.ndarray, topo: SkeletonTopology):
    """Mirror the items selected by ``mask`` in both the 2D input and 3D target."""
    if not mask.any():
        return x, y
    x, y = x.copy(), y.copy()
    x[mask] = horizontal_flip(x[mask], topo)
    y[mask] = horizontal_flip(y[mask], topo)
    return x, y


# ---------------------------------------------------------------- evaluation


def metrics_report(pred: np.ndarray, gt: np.ndarray, tags, seq_ids, centre: Optional[int] = None,
                   topo: Optional[SkeletonTopology] = None) -> dict:
    """MPJPE / P-MPJPE (mm) overall, per action tag, per sequence and per joint.

    ``pred`` and ``gt`` are ``[N, S, J, 3]``; every supervised pose counts once.
    """
    err = np.linalg.norm(pred.astype(np.float64) - gt, axis=-1)      # [N, S, J]
    pa = p_mpjpe_frames(pred, gt)                                     # [N, S]
    per_pose = err.mean(axis=-1)
    tags = np.asarray(tags)
    seq_ids = np.asarray(seq_ids)

    def block(mask):
        out = {"mpjpe": float(per_pose[mask].mean()),
               "p_mpjpe": float(np.nanmean(pa[mask])),
               "poses": int(per_pose[mask].size)}
        if centre is not None:
            out["centre_mpjpe"] = float(per_pose[mask, centre].mean())
            out["centre_p_mpjpe"] = float(np.nanmean(pa[mask, centre]))
        return out

    everything = np.ones(len(pred), dtype=bool)
    report = {"overall": block(everything),
              "per_action": {t: block(tags == t) for t in sorted(set(tags.tolist()))},
              "per_sequence": {int(s): block(seq_ids == s) for s in sorted(set(seq_ids.tolist()))},
              "per_joint_mpjpe": err.mean(axis=(0, 1)).tolist()}
    if topo is not None:
        report["per_ldof_mpjpe"] = {
            str(level): float(err[..., topo.joints_with_ldof((level,))].mean())
            for level in sorted(set(topo.ldof)) if level > 0}
    return report


def evaluate(params: dict, cfg: ModelConfig, seqs: list[Sequence3D], *, stride: int = 1,
             topo: Optional[SkeletonTopology] = None) -> dict:
    topo = topo or build_h36m17()
    w = make_windows(seqs, cfg, stride)
    pred = predict_mm(params, w.inputs, cfg, topo)
    return metrics_report(pred, w.targets, w.tags, w.seq_ids, w.centre, topo)


def mean_pose_baseline(train: Windows, evalw: Windows) -> float:
    """MPJPE of predicting the mean training pose for every evaluated frame."""
    mean = train.targets.reshape(-1, *train.targets.shape[-2:]).astype(np.float64).mean(axis=0)
    return float(np.linalg.norm(evalw.targets - mean, axis=-1).mean())


def temporal_mean_baseline(evalw: Windows) -> float:
    """MPJPE of predicting, for every (sequence, camera) stream, the temporal mean of its own
    ground truth.  This peeks at the evaluation labels, so it is a stricter bar than
    :func:`mean_pose_baseline`."""
    errs = np.empty(evalw.targets.shape[:-1])
    keys = evalw.seq_ids * (int(evalw.view_ids.max()) + 1) + evalw.view_ids
    for k in np.unique(keys):
        m = keys == k
        block = evalw.targets[m].astype(np.float64)
        errs[m] = np.linalg.norm(block - block.reshape(-1, *block.shape[-2:]).mean(0), axis=-1)
    return float(errs.mean())


# ---------------------------------------------------------------- training


@dataclass
class RunReport:
    history: list
    params: dict
    best_params: dict
    best_epoch: int
    best_mpjpe: float
    baseline_mpjpe: float
    temporal_mean_mpjpe: float = math.nan
    mismatches: list = field(default_factory=list)
    seconds: float = 0.0

    def train_losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history]

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_mpjpe": self.best_mpjpe,
                "baseline_mpjpe": self.baseline_mpjpe,
                "temporal_mean_mpjpe": self.temporal_mean_mpjpe, "seconds": self.seconds,
                "history": self.history, "mismatches": self.mismatches}


def split_sequences(seqs: list, eval_fraction: float = 0.2) -> tuple[list, list]:
    n_eval = max(1, int(round(eval_fraction * len(seqs))))
    if n_eval >= len(seqs):
        raise ConfigError("need at least two sequences to split train/eval")
    return seqs[:-n_eval], seqs[-n_eval:]


def train(cfg: TrainConfig, train_seqs: Optional[list] = None, eval_seqs: Optional[list] = None,
          init: Optional[dict] = None, topo: Optional[SkeletonTopology] = None) -> RunReport:
    """Seeded fine-tuning run.  Sequences may be passed directly or read from ``cfg.dataset``."""
    cfg.validate()
    topo = topo or build_h36m17()
    mcfg = cfg.model
    if train_seqs is None:
        if cfg.dataset is None:
            raise ConfigError("no training data: pass sequences or set dataset")
        train_seqs = read_dataset(cfg.dataset, topo)
        if eval_seqs is None and cfg.eval_dataset is None:
            train_seqs, eval_seqs = split_sequences(train_seqs)
    if eval_seqs is None:
        if cfg.eval_dataset is None:
            raise ConfigError("no evaluation data: pass sequences or set eval_dataset")
        eval_seqs = read_dataset(cfg.eval_dataset, topo)

    trw = make_windows(train_seqs, mcfg, cfg.stride)
    evw = make_windows(eval_seqs, mcfg, cfg.eval_stride)
    baseline = mean_pose_baseline(trw, evw)
    oracle = temporal_mean_baseline(evw)

    params = init if init is not None else init_params(mcfg, cfg.seed)
    mismatches: list = []
    if cfg.pretrained:
        loaded, _, _ = load_checkpoint(cfg.pretrained)
        params, mismatches = load_into(params, loaded)
        logger.info("loaded %s; re-initialized: %s", cfg.pretrained, mismatches)

    rng = make_rng(cfg.seed + 1)
    state = AdamState()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "train_log.jsonl", "w")

    history, best, best_params, best_epoch = [], math.inf, params, 0
    t_start = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
            order = rng.permutation(len(trw))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[i:i + cfg.batch_size])
                x, y = trw.inputs[idx], trw.targets[idx]
                if cfg.flip:
                    x, y = flip_batch(x, y, rng.random(len(idx)) < 0.5, topo)
                loss, grads = loss_and_grads(params, x, y, mcfg, topo)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
                params = adam_step(params, grads, state, lr)
                losses.append(loss * len(idx))
            train_loss = float(np.sum(losses) / len(trw))
            rep = evaluate(params, mcfg, eval_seqs, stride=cfg.eval_stride, topo=topo)
            row = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
                   "eval_mpjpe": rep["overall"]["mpjpe"], "eval_p_mpjpe": rep["overall"]["p_mpjpe"],
                   "eval_centre_mpjpe": rep["overall"]["centre_mpjpe"],
                   "seconds": time.perf_counter() - t0}
            history.append(row)
            logger.info("epoch %d loss %.2f eval %.2f", epoch, train_loss, row["eval_mpjpe"])
            if log is not None:
                log.write(json.dumps(row, sort_keys=True) + "\n")
                log.flush()
            if row["eval_mpjpe"] < best:
                best, best_params, best_epoch = row["eval_mpjpe"], params, epoch
                if out_dir is not None:
                    save_checkpoint(params, mcfg, out_dir / "best.ckpt",
                                    meta={"epoch": epoch, "eval_mpjpe": best})
    finally:
        if log is not None:
            log.close()
    return RunReport(history=history, params=params, best_params=best_params,
                     best_epoch=best_epoch, best_mpjpe=best, baseline_mpjpe=baseline,
                     temporal_mean_mpjpe=oracle,
                     mismatches=mismatches, seconds=time.perf_counter() - t_start)


def ipc_ablation(cfg: TrainConfig, train_seqs: list, eval_seqs: list,
                 topo: Optional[SkeletonTopology] = None) -> dict:
    """Train with and without IPC at equal width; compare error on 2/3-LDoF joints."""
    topo = topo or build_h36m17()
    joints = topo.joints_with_ldof((2, 3))
    out = {}
    for name, ablate in (("ipc", ()), ("no_ipc", ("ipc",))):
        run_cfg = replace(cfg, model=replace(cfg.model, ablate=tuple(ablate)), out_dir=None)
        run = train(run_cfg, train_seqs, eval_seqs, topo=topo)
        rep = evaluate(run.params, run_cfg.model, eval_seqs, stride=cfg.eval_stride, topo=topo)
        per_joint = np.asarray(rep["per_joint_mpjpe"])
        out[name] = {"distal_mpjpe": float(per_joint[joints].mean()),
                     "mpjpe": rep["overall"]["mpjpe"], "final_loss": run.history[-1]["train_loss"]}
    return out


# ---------------------------------------------------------------- benchmarking


def _timed(fn, iterations: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.asarray(times)


def bench(params: dict, cfg: ModelConfig, batch: int = 1, iterations: int = 10,
          warmup: int = 2, seed: int = 0) -> dict:
    """Inference latency of ``batch`` windows; warmup runs are discarded."""
    if batch < 1 or iterations < 1:
        raise ConfigError("batch and iterations must be positive")
    dtype = next(iter(params.values())).dtype
    x = make_rng(seed).normal(0.0, 0.3, size=(batch, cfg.rf, cfg.joints, 2)).astype(dtype)
    p = as_tensors(params)
    times = _timed(lambda: forward(p, Tensor(x), cfg), iterations, warmup)
    p50 = float(np.percentile(times, 50))
    flops = flops_count(cfg)
    return {"batch": batch, "iterations": iterations,
            "p50_ms": 1e3 * p50, "p95_ms": 1e3 * float(np.percentile(times, 95)),
            "throughput": batch / p50, "flops": flops, "flop_rate": flops * batch / p50}


def bench_tokenization(cfg: ModelConfig, batch: int = 1, iterations: int = 5, warmup: int = 1,
                       seed: int = 0) -> dict:
    """Paired timing of one spatial + one temporal attention layer under ETST and DTST.

    ETST attends over J joint tokens and t_k frequency tokens.  The DTST
    variant attends over the J joints of every frame and over the T frames of
    every joint, all at width C.
    """
    rng = make_rng(seed)
    C, J, T = cfg.channels, cfg.joints, cfg.rf
    p = {k: Tensor(init_tensor(k, s, rng)) for k, s in _attn_shapes("a", C).items()}

    def run(shapes):
        xs = [Tensor(rng.normal(size=s).astype(np.float32)) for s in shapes]
        return lambda: [attention_forward(x, p, cfg.heads, "a") for x in xs]

    etst = _timed(run([(batch, J, C), (batch, cfg.t_k, C)]), iterations, warmup)
    dtst = _timed(run([(batch, T, J, C), (batch, J, T, C)]), iterations, warmup)
    return {"etst_ms": 1e3 * float(np.median(etst)), "dtst_ms": 1e3 * float(np.median(dtst)),
            "rf": T, "t_k": cfg.t_k, "channels": C}

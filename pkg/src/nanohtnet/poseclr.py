"""Multi-view contrastive pre-training of the lifting backbone.

A query encoder ``f`` (backbone + projection) embeds one randomly chosen view
of an instant; ``views`` momentum encoders embed every view of the same
instant to give the positives.  Negatives are past keys held in a FIFO bank.
After pre-training only the backbone of ``f`` is exported.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tn
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, DimensionError
from .model import ModelConfig, as_tensors, encode, init_params, init_tensor, is_backbone, make_rng
from .optim import AdamState, adam_step
from .skeleton import SkeletonTopology, build_h36m17
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-4


@dataclass
class PretrainConfig:
    views: int = 4
    bank_capacity: int = 32768
    slice: int = 3
    decay: float = 0.999
    temperature: float = 0.07
    embed_dim: int = 128
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 1   # instants per optimizer step

    def validate(self) -> None:
        if self.views < 2:
            raise ConfigError("need at least two views")
        if self.bank_capacity <= 0 or self.bank_capacity % self.views:
            raise ConfigError("bank capacity must be a positive multiple of the view count")
        if not 0.0 <= self.decay <= 1.0:
            raise ConfigError("decay must lie in [0, 1]")
        if not self.temperature > 0 or self.slice < 1 or self.embed_dim < 1:
            raise ConfigError("temperature, slice and embed_dim must be positive")
        if self.epochs < 1 or not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("epochs, lr and batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- memory bank


class MemoryBank:
    """Fixed-capacity FIFO ring of unit vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._ring = np.zeros((capacity, dim))
        self._cursor = 0
        self.fill = 0

    def enqueue(self, vectors) -> None:
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.dim)
        norms = np.linalg.norm(vectors, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError(f"bank accepts unit vectors only (norms {norms.min():.6f}..{norms.max():.6f})")
        for v in vectors:
            self._ring[self._cursor] = v
            self._cursor = (self._cursor + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)

    def snapshot(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self.fill < self.capacity:
            return self._ring[:self.fill].copy()
        return np.concatenate([self._ring[self._cursor:], self._ring[:self._cursor]])

    def __len__(self):
        return self.fill


# ---------------------------------------------------------------- encoders


def projection_shapes(c_l: int, embed_dim: int) -> dict[str, tuple]:
    return {"proj.fc1.weight": (c_l, c_l), "proj.fc1.bias": (c_l,),
            "proj.fc2.weight": (c_l, embed_dim), "proj.fc2.bias": (embed_dim,)}


def init_encoder(cfg: ModelConfig, embed_dim: int, seed: int = 0, dtype=np.float32) -> dict:
    """Backbone (no regression head) plus projection parameters."""
    params = {k: v for k, v in init_params(cfg, seed, dtype).items() if is_backbone(k)}
    rng = make_rng(seed + 7919)
    for name, shape in projection_shapes(cfg.c_l, embed_dim).items():
        params[name] = init_tensor(name, shape, rng, dtype)
    return params


@dataclass
class EncoderPair:
    query: dict
    momentum: list = field(default_factory=list)

    @classmethod
    def create(cls, query: dict, views: int) -> "EncoderPair":
        return cls(query=query, momentum=[{k: v.copy() for k, v in query.items()} for _ in range(views)])


def encode_embedding(p: dict, x: Tensor, cfg: ModelConfig,
                     topo: Optional[SkeletonTopology] = None) -> Tensor:
    """``[..., T, J, 2] -> [..., embed_dim]`` unit vectors."""
    f_t, f_s = encode(p, x, cfg, topo)
    tokens = tn.concat([f_t, f_s], axis=-2)
    pooled = tn.mean(tokens, axis=-2)
    h = tn.gelu(tn.linear(pooled, p["proj.fc1.weight"], p["proj.fc1.bias"]))
    h = tn.linear(h, p["proj.fc2.weight"], p["proj.fc2.bias"])
    return tn.l2_normalize(h)


def _check_unit(name: str, v: np.ndarray) -> None:
    if v.size and np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > UNIT_TOL):
        raise ContractError(f"{name} must be unit vectors")


def info_nce(q: Tensor, positives, negatives, temperature: float) -> Tensor:
    """Contrastive loss of queries ``q [..., D]`` against ``positives [..., P, D]``.

    ``negatives [K, D]`` are shared by every query.  Each positive contributes
    ``-log(e^{q.k+/t} / (e^{q.k+/t} + sum_i e^{q.k-_i/t}))``; the result is the
    mean over positives and queries.
    """
    q = tn.as_tensor(q)
    pos = tn.as_tensor(positives, like=q)
    neg = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives, dtype=q.dtype)
    if pos.ndim < 2 or pos.shape[-2] == 0:
        raise ContractError("info_nce needs at least one positive")
    D = q.shape[-1]
    if pos.shape[-1] != D or (neg.size and neg.shape[-1] != D):
        raise DimensionError(f"embedding widths differ: q {q.shape}, positives {pos.shape}, negatives {neg.shape}")
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    _check_unit("query", q.data)
    _check_unit("positives", pos.data)
    _check_unit("negatives", neg)

    lead = q.shape[:-1]
    P = pos.shape[-2]
    qe = tn.reshape(q, (*lead, 1, D))
    lp = tn.scale(tn.sum(tn.mul(qe, pos), axis=-1), 1.0 / temperature)         # [..., P]
    lp = tn.reshape(lp, (*lead, P, 1))
    if neg.size:
        K = neg.shape[0]
        ln = tn.scale(tn.linear(q, Tensor(neg.T.copy())), 1.0 / temperature)  # [..., K]
        ln = tn.add(tn.reshape(ln, (*lead, 1, K)), Tensor(np.zeros((P, K), dtype=q.dtype)))
        logits = tn.concat([lp, ln], axis=-1)
    else:
        logits = lp
    per_pos = tn.sub(tn.logsumexp_lastdim(logits), tn.reshape(lp, (*lead, P)))
    return tn.mean(per_pos)


def momentum_update(query: dict, momentum: dict, m: float) -> dict:
    """Return ``m * momentum + (1 - m) * query`` for every tensor."""
    if not 0.0 <= m <= 1.0:
        raise ContractError("decay must lie in [0, 1]")
    if set(query) != set(momentum):
        raise DimensionError("encoders hold different tensor names")
    out = {}
    for name, theta_hat in momentum.items():
        theta = query[name]
        if theta.shape != theta_hat.shape:
            raise DimensionError(f"{name}: {theta.shape} vs {theta_hat.shape}")
        out[name] = (m * theta_hat + (1.0 - m) * theta).astype(theta_hat.dtype)
    return out


# ---------------------------------------------------------------- data


@dataclass
class Instant:
    seq_id: int
    frame: int
    windows: np.ndarray   # [views, rf, J, 2]


@dataclass
class SliceSample:
    instants: list
    skipped: int

    def __iter__(self):
        return iter(self.instants)

    def __len__(self):
        return len(self.instants)


def sample_slices(seqs: list, s: int, rf: int, seed: int = 0) -> SliceSample:
    """Instants ``0, s, 2s, ...`` of every sequence with the ``rf``-frame window of each view.

    Sequence order is shuffled by ``seed``; instants stay sorted within a
    sequence.  Instants whose centred window leaves the sequence are skipped
    and counted.
    """
    if s < 1:
        raise ContractError("slice must be >= 1")
    order = make_rng(seed).permutation(len(seqs))
    instants, skipped = [], 0
    half = rf // 2
    for si in order:
        seq = seqs[si]
        for t in range(0, seq.frames, s):
            start = t - half
            if start < 0 or start + rf > seq.frames:
                skipped += 1
                continue
            instants.append(Instant(int(si), t, seq.poses2d[:, start:start + rf]))
    return SliceSample(instants, skipped)


# ---------------------------------------------------------------- training


def _embed_no_grad(p: dict, x: np.ndarray, cfg: ModelConfig, topo) -> np.ndarray:
    dtype = next(iter(p.values())).dtype
    return encode_embedding(as_tensors(p), Tensor(np.asarray(x, dtype=dtype)), cfg, topo).data


def pretrain_step(batch: list, pair: EncoderPair, bank: MemoryBank, cfg: PretrainConfig,
                  mcfg: ModelConfig, state: AdamState, lr: float, rng: np.random.Generator,
                  topo: Optional[SkeletonTopology] = None) -> dict:
    topo = topo or build_h36m17()
    x = np.stack([inst.windows for inst in batch])              # [B, views, rf, J, 2]
    B, V = x.shape[:2]
    if V != cfg.views:
        raise DimensionError(f"instants carry {V} views, config expects {cfg.views}")
    chosen = rng.integers(0, V, size=B)
    # keys: view v through momentum encoder v, no tape involved
    keys = np.stack([_embed_no_grad(pair.momentum[v], x[:, v], mcfg, topo) for v in range(V)], axis=1)
    negatives = bank.snapshot()

    tape = Tape()
    p = as_tensors(pair.query, tape)
    dtype = next(iter(pair.query.values())).dtype
    q = encode_embedding(p, Tensor(x[np.arange(B), chosen].astype(dtype)), mcfg, topo)
    loss = info_nce(q, keys.astype(dtype), negatives.astype(dtype), cfg.temperature)
    g = tn.backward(tape, loss)
    pair.query = adam_step(pair.query, {k: g[t.node] for k, t in p.items()}, state, lr)
    pair.momentum = [momentum_update(pair.query, mom, cfg.decay) for mom in pair.momentum]
    bank.enqueue(keys.reshape(-1, keys.shape[-1]))

    qd = q.data.astype(np.float64)
    pos_sim = float(np.einsum("bd,bvd->bv", qd, keys).mean())
    neg_sim = float((qd @ negatives.T).mean()) if len(negatives) else float("nan")
    return {"loss": float(loss.data), "pos_sim": pos_sim, "neg_sim": neg_sim}


def pretrain_epoch(instants, pair: EncoderPair, bank: MemoryBank, cfg: PretrainConfig,
                   mcfg: ModelConfig, state: AdamState, rng: np.random.Generator,
                   lr: Optional[float] = None, topo=None) -> dict:
    """One pass over ``instants`` in a seeded random order; returns mean statistics."""
    instants = list(instants)
    order = rng.permutation(len(instants))
    stats = []
    for i in range(0, len(order), cfg.batch_size):
        batch = [instants[j] for j in order[i:i + cfg.batch_size]]
        stats.append(pretrain_step(batch, pair, bank, cfg, mcfg, state, lr or cfg.lr, rng, topo))
    neg = [s["neg_sim"] for s in stats if not math.isnan(s["neg_sim"])]
    return {"loss": float(np.mean([s["loss"] for s in stats])),
            "pos_sim": float(np.mean([s["pos_sim"] for s in stats])),
            "neg_sim": float(np.mean(neg)) if neg else float("nan"),
            "steps": len(stats), "bank_fill": bank.fill}


def view_similarity(query: dict, instants, mcfg: ModelConfig, topo=None) -> dict:
    """Mean cosine between different views of one instant (positive) and across instants (negative)."""
    instants = list(instants)
    z = np.stack([_embed_no_grad(query, inst.windows, mcfg, topo) for inst in instants])  # [N, V, D]
    N, V, _ = z.shape
    flat = z.reshape(N * V, -1).astype(np.float64)
    sims = flat @ flat.T
    owner = np.repeat(np.arange(N), V)
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(N * V, dtype=bool)
    return {"pos_sim": float(sims[same & off_diag].mean()),
            "neg_sim": float(sims[~same].mean())}


@dataclass
class PretrainResult:
    pair: EncoderPair
    history: list
    bank: MemoryBank
    skipped: int


def pretrain(cfg: PretrainConfig, mcfg: ModelConfig, seqs: list, seed: int = 0,
             log_path=None, topo=None) -> PretrainResult:
    cfg.validate()
    mcfg.validate()
    pair = EncoderPair.create(init_encoder(mcfg, cfg.embed_dim, seed), cfg.views)
    bank = MemoryBank(cfg.bank_capacity, cfg.embed_dim)
    sample = sample_slices(seqs, cfg.slice, mcfg.rf, seed)
    if not len(sample):
        raise ConfigError("no instant has a full window in every view")
    rng = make_rng(seed + 1)
    state = AdamState()
    history = []
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            row = {"epoch": epoch, **pretrain_epoch(sample, pair, bank, cfg, mcfg, state, rng, topo=topo)}
            history.append(row)
            logger.info("pretrain epoch %d loss %.4f pos %.3f neg %.3f", epoch, row["loss"],
                        row["pos_sim"], row["neg_sim"])
            if log is not None:
                log.write(json.dumps(row, sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    return PretrainResult(pair, history, bank, sample.skipped)


def export_encoder(pair: EncoderPair, mcfg: ModelConfig, path, meta: Optional[dict] = None) -> list[str]:
    """Write the backbone of the query encoder (no projection) as a checkpoint; return the names."""
    params = {k: v for k, v in pair.query.items() if is_backbone(k) and not k.startswith("proj.")}
    save_checkpoint(params, mcfg, path, meta=meta or {"source": "pretrain"})
    return list(params)

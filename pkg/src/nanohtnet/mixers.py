"""Spatial and temporal hierarchical mixers.

Every forward takes a flat parameter mapping (name -> Tensor) and a prefix;
inputs are ``[..., tokens, channels]`` so a leading batch axis is free.

Spatial mixer (channels split into thirds)::

    Y_ljc = ljc(X_ljc)
    Y_ipc = ipc(X_ipc + Y_ljc)
    Y_gbi = gbi(X_gbi + Y_ipc)
    out   = Z + MLP(LN(Z)),   Z = concat(Y_ljc, Y_ipc, Y_gbi)

The temporal mixer is the same with halves: ``ime`` then ``gcp``.
A sub-module listed in ``ablate`` becomes an identity map and owns no
parameters.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .skeleton import SkeletonTopology, temporal_path_adjacency
from .tensor import Tensor

SPATIAL_PARTS = ("ljc", "ipc", "gbi")
TEMPORAL_PARTS = ("ime", "gcp")


def _const(a: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(a, dtype=like.dtype))


# ---------------------------------------------------------------- parameter shapes


def _gcn_shapes(prefix: str, c: int) -> dict:
    return {f"{prefix}.w1": (c, c), f"{prefix}.w2": (c, c)}


def _ln_shapes(prefix: str, c: int) -> dict:
    return {f"{prefix}.gamma": (c,), f"{prefix}.beta": (c,)}


def _mlp_shapes(prefix: str, c: int, hidden: int) -> dict:
    shapes = _ln_shapes(f"{prefix}.ln", c)
    shapes.update({
        f"{prefix}.fc1.weight": (c, hidden), f"{prefix}.fc1.bias": (hidden,),
        f"{prefix}.fc2.weight": (hidden, c), f"{prefix}.fc2.bias": (c,),
    })
    return shapes


def _attn_shapes(prefix: str, c: int) -> dict:
    shapes = {}
    for name in ("q", "k", "v", "out"):
        shapes[f"{prefix}.w{name}"] = (c, c)
        shapes[f"{prefix}.b{name}"] = (c,)
    shapes.update(_ln_shapes(f"{prefix}.ln", c))
    return shapes


def _ipc_shapes(prefix: str, c: int) -> dict:
    shapes = {
        f"{prefix}.conv1.weight": (2, c, c), f"{prefix}.conv1.bias": (c,),
        f"{prefix}.conv2.weight": (3, c, c), f"{prefix}.conv2.bias": (c,),
    }
    shapes.update(_mlp_shapes(f"{prefix}.mlp1", c, c))
    shapes.update(_mlp_shapes(f"{prefix}.mlp2", c, c))
    return shapes


def spatial_mixer_shapes(prefix: str, channels: int, mlp_ratio: float = 1.0,
                         ablate: Iterable[str] = ()) -> dict:
    if channels % 3:
        raise ContractError(f"spatial mixer channels {channels} not divisible by 3")
    c = channels // 3
    ablate = set(ablate)
    shapes = {}
    if "ljc" not in ablate:
        shapes.update(_gcn_shapes(f"{prefix}.ljc", c))
    if "ipc" not in ablate:
        shapes.update(_ipc_shapes(f"{prefix}.ipc", c))
    if "gbi" not in ablate:
        shapes.update(_attn_shapes(f"{prefix}.gbi", c))
    shapes.update(_mlp_shapes(f"{prefix}.agg", channels, int(round(channels * mlp_ratio))))
    return shapes


def temporal_mixer_shapes(prefix: str, channels: int, mlp_ratio: float = 1.0,
                          ablate: Iterable[str] = ()) -> dict:
    if channels % 2:
        raise ContractError(f"temporal mixer channels {channels} not divisible by 2")
    c = channels // 2
    ablate = set(ablate)
    shapes = {}
    if "ime" not in ablate:
        shapes.update(_gcn_shapes(f"{prefix}.ime", c))
    if "gcp" not in ablate:
        shapes.update(_attn_shapes(f"{prefix}.gcp", c))
    shapes.update(_mlp_shapes(f"{prefix}.agg", channels, int(round(channels * mlp_ratio))))
    return shapes


# ---------------------------------------------------------------- building blocks


def gcn(x: Tensor, adj: Tensor, w: Tensor) -> Tensor:
    """``A_hat X W`` with a constant normalized adjacency."""
    return tn.matmul(tn.matmul(adj, x), w)


def channel_mlp(p: dict, prefix: str, x: Tensor) -> Tensor:
    """``MLP(LN(x))`` (no residual): Linear -> GELU -> Linear."""
    h = tn.layer_norm(x, p[f"{prefix}.ln.gamma"], p[f"{prefix}.ln.beta"])
    h = tn.gelu(tn.linear(h, p[f"{prefix}.fc1.weight"], p[f"{prefix}.fc1.bias"]))
    return tn.linear(h, p[f"{prefix}.fc2.weight"], p[f"{prefix}.fc2.bias"])


def ljc_forward(x: Tensor, adj, p: dict, prefix: str = "ljc") -> Tensor:
    """``Y = X + GCN(GELU(GCN(X)))``."""
    adj = adj if isinstance(adj, Tensor) else _const(adj, x)
    n, c = x.shape[-2:]
    if adj.shape != (n, n):
        raise DimensionError(f"adjacency {adj.shape} for {n} tokens")
    if p[f"{prefix}.w1"].shape != (c, c):
        raise DimensionError(f"GCN weight {p[f'{prefix}.w1'].shape} for width {c}")
    h = tn.gelu(gcn(x, adj, p[f"{prefix}.w1"]))
    return tn.add(x, gcn(h, adj, p[f"{prefix}.w2"]))


ime_forward = ljc_forward


def _limb_rows(topo: SkeletonTopology) -> tuple[list, list]:
    limbs = topo.limbs
    if len(limbs) != 4 or any(len(l) != 3 for l in limbs):
        raise ContractError("IPC needs 4 limbs of 3 joints each")
    for limb in limbs:
        if [topo.ldof[j] for j in limb] != [1, 2, 3]:
            raise ContractError(f"limb {limb} is not ordered by ldof 1, 2, 3")
    set1 = [j for limb in limbs for j in limb[1:]]
    set2 = [j for limb in limbs for j in limb]
    return set1, set2


def ipc_forward(x: Tensor, topo: SkeletonTopology, p: dict, prefix: str = "ipc",
                trace: Optional[dict] = None) -> Tensor:
    """Intra-part constraint: limb features replace distal joint rows.

    The two sets are the 2/3-LDoF joints (8 rows, conv kernel 2) and all limb
    joints (12 rows, conv kernel 3), ordered limb-major.  ``R1`` puts the
    aggregated kernel-2 feature of each limb on its 3-LDoF row, ``R2`` puts the
    kernel-3 feature on its 2- and 3-LDoF rows; every other row of
    ``R1 + R2`` is zero.
    """
    n_joints = x.shape[-2]
    if n_joints != topo.num_joints:
        raise DimensionError(f"{n_joints} rows for a {topo.num_joints}-joint topology")
    set1, set2 = _limb_rows(topo)
    distal = [limb[2] for limb in topo.limbs]
    mid_distal = [j for limb in topo.limbs for j in (limb[1], limb[2])]

    f1 = tn.gelu(tn.conv1d_strided(tn.take(x, set1, axis=-2), p[f"{prefix}.conv1.weight"],
                                   p[f"{prefix}.conv1.bias"], stride=2))
    f2 = tn.gelu(tn.conv1d_strided(tn.take(x, set2, axis=-2), p[f"{prefix}.conv2.weight"],
                                   p[f"{prefix}.conv2.bias"], stride=3))
    f1 = tn.add(f1, channel_mlp(p, f"{prefix}.mlp1", f1))
    f2 = tn.add(f2, channel_mlp(p, f"{prefix}.mlp2", f2))

    r1 = tn.scatter(f1, distal, n_joints, axis=-2)
    r2 = tn.scatter(tn.take(f2, np.repeat(np.arange(4), 2), axis=-2), mid_distal, n_joints, axis=-2)
    if trace is not None:
        trace[f"{prefix}.limb_features"] = (f1.data, f2.data)
    return tn.add(x, tn.add(r1, r2))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, c = t.shape
    t = tn.reshape(t, (*lead, n, heads, c // heads))
    k = len(lead)
    return tn.permute(t, (*range(k), k + 1, k, k + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, d = t.shape
    k = len(lead)
    t = tn.permute(t, (*range(k), k + 1, k, k + 2))
    return tn.reshape(t, (*lead, n, h * d))


def attention_forward(x: Tensor, p: dict, heads: int, prefix: str,
                      trace: Optional[dict] = None) -> Tensor:
    """``x + LN(MSA(x))``; the score scale is ``1/sqrt(width)`` of the whole block."""
    c = x.shape[-1]
    if c % heads:
        raise ContractError(f"width {c} not divisible by {heads} heads")
    q = _split_heads(tn.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(tn.linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(tn.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    scores = tn.scale(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(c))
    attn = tn.softmax_lastdim(scores)
    if trace is not None:
        trace[f"{prefix}.attention"] = attn.data
    msa = tn.linear(_merge_heads(tn.matmul(attn, v)), p[f"{prefix}.wout"], p[f"{prefix}.bout"])
    return tn.add(x, tn.layer_norm(msa, p[f"{prefix}.ln.gamma"], p[f"{prefix}.ln.beta"]))


def gbi_forward(x: Tensor, p: dict, heads: int, prefix: str = "gbi",
                trace: Optional[dict] = None) -> Tensor:
    return attention_forward(x, p, heads, prefix, trace)


def gcp_forward(x: Tensor, p: dict, heads: int, prefix: str = "gcp",
                trace: Optional[dict] = None) -> Tensor:
    return attention_forward(x, p, heads, prefix, trace)


# ---------------------------------------------------------------- mixers


def _aggregate(p: dict, prefix: str, z: Tensor) -> Tensor:
    return tn.add(z, channel_mlp(p, f"{prefix}.agg", z))


def spatial_mixer_forward(x: Tensor, topo: SkeletonTopology, p: dict, *, heads: int,
                          prefix: str = "spatial", adj=None, ablate: Iterable[str] = (),
                          trace: Optional[dict] = None) -> Tensor:
    c = x.shape[-1]
    if c % 3 or (c // 3) % heads:
        raise ContractError(f"spatial width {c} must split into thirds divisible by {heads}")
    ablate = set(ablate)
    third = c // 3
    adj = topo.adjacency() if adj is None else adj
    x_ljc = tn.slice_axis(x, 0, third)
    x_ipc = tn.slice_axis(x, third, 2 * third)
    x_gbi = tn.slice_axis(x, 2 * third, c)
    y_ljc = x_ljc if "ljc" in ablate else ljc_forward(x_ljc, adj, p, f"{prefix}.ljc")
    y_ipc = tn.add(x_ipc, y_ljc)
    if "ipc" not in ablate:
        y_ipc = ipc_forward(y_ipc, topo, p, f"{prefix}.ipc", trace)
    y_gbi = tn.add(x_gbi, y_ipc)
    if "gbi" not in ablate:
        y_gbi = gbi_forward(y_gbi, p, heads, f"{prefix}.gbi", trace)
    return _aggregate(p, prefix, tn.concat([y_ljc, y_ipc, y_gbi], axis=-1))


def temporal_mixer_forward(x: Tensor, p: dict, *, heads: int, prefix: str = "temporal",
                           adj=None, ablate: Iterable[str] = (),
                           trace: Optional[dict] = None) -> Tensor:
    n, c = x.shape[-2:]
    if c % 2 or (c // 2) % heads:
        raise ContractError(f"temporal width {c} must split into halves divisible by {heads}")
    ablate = set(ablate)
    half = c // 2
    adj = temporal_path_adjacency(n) if adj is None else adj
    x_ime = tn.slice_axis(x, 0, half)
    x_gcp = tn.slice_axis(x, half, c)
    y_ime = x_ime if "ime" in ablate else ime_forward(x_ime, adj, p, f"{prefix}.ime")
    y_gcp = tn.add(x_gcp, y_ime)
    if "gcp" not in ablate:
        y_gcp = gcp_forward(y_gcp, p, heads, f"{prefix}.gcp", trace)
    return _aggregate(p, prefix, tn.concat([y_ime, y_gcp], axis=-1))

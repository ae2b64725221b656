"""Dual-stream lifting network: tokenization, mixer stacks, fusion head, accounting.

Data flow for one window ``x`` of shape ``[T, J, 2]`` (a leading batch axis
is allowed everywhere)::

    temporal: x -> DCT rows f < t_k -> [t_k, 2J] -> embed -> temporal mixers x L -> T_FCN -> [t_k, c_l]
    spatial:  x -> [J, 2T]                       -> embed -> spatial mixers x L  -> S_FCN -> [J, c_l]
    head:     y[i, j] = concat(F_t[i], F_s[j]) @ W + b                                 -> [t_k, J, 3]

In ``idct_full`` output mode the ``t_k`` head outputs per joint and coordinate
are read as DCT coefficients and expanded back to ``T`` frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import mixers
from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError
from .frequency import dct_matrix
from .skeleton import SkeletonTopology, build_h36m17, temporal_path_adjacency
from .tensor import Tape, Tensor

OUTPUT_MODES = ("subsample", "idct_full")


@dataclass(frozen=True)
class ModelConfig:
    joints: int = 17
    rf: int = 243
    t_k: int = 9
    channels: int = 240
    layers: int = 3
    heads: int = 8
    c_l: Optional[int] = None
    output_mode: str = "subsample"
    mlp_ratio: float = 1.0
    ablate: tuple = ()

    def __post_init__(self):
        if self.c_l is None:
            object.__setattr__(self, "c_l", 2 * self.channels)
        object.__setattr__(self, "ablate", tuple(sorted(self.ablate)))
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.t_k <= self.rf:
            raise ConfigError(f"t_k={self.t_k} must lie in [1, rf={self.rf}]")
        if self.channels <= 0 or self.channels % 48:
            raise ConfigError(f"channels={self.channels} must be a positive multiple of 48")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if (self.channels // 3) % self.heads or (self.channels // 2) % self.heads:
            raise ConfigError(f"heads={self.heads} must divide C/3 and C/2")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.c_l <= 0 or self.mlp_ratio <= 0:
            raise ConfigError("c_l and mlp_ratio must be positive")
        unknown = set(self.ablate) - set(mixers.SPATIAL_PARTS + mixers.TEMPORAL_PARTS)
        if unknown:
            raise ConfigError(f"unknown sub-modules to ablate: {sorted(unknown)}")

    @property
    def out_frames(self) -> int:
        return self.rf if self.output_mode == "idct_full" else self.t_k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        d = dict(d)
        if "ablate" in d:
            d["ablate"] = tuple(d["ablate"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


FLAGSHIP = ModelConfig()
LARGE = ModelConfig(t_k=27, channels=384)
# small enough to train on one CPU core in a few minutes
DESK = ModelConfig(rf=9, t_k=3, channels=48, layers=2, heads=4)


# ---------------------------------------------------------------- parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape table for every learned tensor."""
    C, J, T = cfg.channels, cfg.joints, cfg.rf
    s_ablate = [a for a in cfg.ablate if a in mixers.SPATIAL_PARTS]
    t_ablate = [a for a in cfg.ablate if a in mixers.TEMPORAL_PARTS]
    shapes = {
        "spatial_embed.weight": (2 * T, C), "spatial_embed.bias": (C,), "spatial_embed.pos": (J, C),
        "temporal_embed.weight": (2 * J, C), "temporal_embed.bias": (C,),
        "temporal_embed.pos": (cfg.t_k, C),
    }
    for l in range(cfg.layers):
        shapes.update(mixers.spatial_mixer_shapes(f"spatial.{l}", C, cfg.mlp_ratio, s_ablate))
        shapes.update(mixers.temporal_mixer_shapes(f"temporal.{l}", C, cfg.mlp_ratio, t_ablate))
    for name in ("s_fcn", "t_fcn"):
        shapes.update({
            f"{name}.ln.gamma": (C,), f"{name}.ln.beta": (C,),
            f"{name}.weight": (C, cfg.c_l), f"{name}.bias": (cfg.c_l,),
        })
    shapes["head.weight"] = (2 * cfg.c_l, 3)
    shapes["head.bias"] = (3,)
    return shapes


BACKBONE_EXCLUDE = ("head.",)


def is_backbone(name: str) -> bool:
    return not name.startswith(BACKBONE_EXCLUDE)


def init_tensor(name: str, shape: tuple, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform weights; zero biases and positions; unit LN scale."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    if len(shape) == 1 or leaf == "pos":
        return np.zeros(shape, dtype=dtype)
    if len(shape) == 3:  # conv [kernel, c_in, c_out]
        fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so streams are reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = make_rng(seed)
    return {name: init_tensor(name, shape, rng, dtype) for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------- forward


def supervision_indices(rf: int, t_k: int) -> np.ndarray:
    """``t_k`` evenly spaced frame indices of the window, always containing the centre."""
    if t_k == rf:
        return np.arange(rf)
    step = rf // t_k
    centre = rf // 2
    return centre + (np.arange(t_k) - t_k // 2) * step


def _fcn(p, prefix, x):
    h = tn.layer_norm(x, p[f"{prefix}.ln.gamma"], p[f"{prefix}.ln.beta"])
    return tn.gelu(tn.linear(h, p[f"{prefix}.weight"], p[f"{prefix}.bias"]))


def etst_embed_spatial(x: Tensor, p: dict) -> Tensor:
    """``[..., T, J, 2] -> [..., J, C]``: one token per joint over its whole trajectory."""
    *lead, T, J, two = x.shape
    w = p["spatial_embed.weight"]
    if two != 2 or w.shape[0] != 2 * T or p["spatial_embed.pos"].shape[0] != J:
        raise DimensionError(f"spatial embedding expects [{w.shape[0] // 2}, "
                             f"{p['spatial_embed.pos'].shape[0]}, 2], got {x.shape[-3:]}")
    k = len(lead)
    tokens = tn.reshape(tn.permute(x, (*range(k), k + 1, k, k + 2)), (*lead, J, 2 * T))
    return tn.add(tn.linear(tokens, w, p["spatial_embed.bias"]), p["spatial_embed.pos"])


def etst_embed_temporal(coeffs: Tensor, p: dict) -> Tensor:
    """``[..., t_k, J, 2] -> [..., t_k, C]``: one token per retained coefficient."""
    *lead, t_k, J, two = coeffs.shape
    w = p["temporal_embed.weight"]
    if two != 2 or w.shape[0] != 2 * J or p["temporal_embed.pos"].shape[0] != t_k:
        raise DimensionError(f"temporal embedding expects [{p['temporal_embed.pos'].shape[0]}, "
                             f"{w.shape[0] // 2}, 2], got {coeffs.shape[-3:]}")
    tokens = tn.reshape(coeffs, (*lead, t_k, 2 * J))
    return tn.add(tn.linear(tokens, w, p["temporal_embed.bias"]), p["temporal_embed.pos"])


def lowpass_dct(x: Tensor, t_k: int) -> Tensor:
    """First ``t_k`` DCT coefficients along the frame axis of ``[..., T, J, 2]``."""
    *lead, T, J, two = x.shape
    basis = Tensor(dct_matrix(T)[:t_k].astype(x.dtype))
    flat = tn.reshape(x, (*lead, T, J * two))
    return tn.reshape(tn.matmul(basis, flat), (*lead, t_k, J, two))


def _check_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.shape[-3:] != (cfg.rf, cfg.joints, 2):
        raise DimensionError(f"input window {x.shape} does not end with ({cfg.rf}, {cfg.joints}, 2)")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("input contains non-finite values")


def encode(p: dict, x: Tensor, cfg: ModelConfig, topo: Optional[SkeletonTopology] = None,
           trace: Optional[dict] = None) -> tuple[Tensor, Tensor]:
    """Backbone up to the FCNs: returns ``(F_t [..., t_k, c_l], F_s [..., J, c_l])``."""
    _check_input(x, cfg)
    topo = topo or build_h36m17()
    s_ablate = [a for a in cfg.ablate if a in mixers.SPATIAL_PARTS]
    t_ablate = [a for a in cfg.ablate if a in mixers.TEMPORAL_PARTS]
    s_adj = Tensor(topo.adjacency().astype(x.dtype))
    t_adj = Tensor(temporal_path_adjacency(cfg.t_k).astype(x.dtype))

    xs = etst_embed_spatial(x, p)
    xt = etst_embed_temporal(lowpass_dct(x, cfg.t_k), p)
    for l in range(cfg.layers):
        xs = mixers.spatial_mixer_forward(xs, topo, p, heads=cfg.heads, prefix=f"spatial.{l}",
                                          adj=s_adj, ablate=s_ablate, trace=trace)
        xt = mixers.temporal_mixer_forward(xt, p, heads=cfg.heads, prefix=f"temporal.{l}",
                                           adj=t_adj, ablate=t_ablate, trace=trace)
    if trace is not None:
        trace["spatial.adjacency"] = s_adj.data
        trace["temporal.adjacency"] = t_adj.data
    return _fcn(p, "t_fcn", xt), _fcn(p, "s_fcn", xs)


def regression_head(p: dict, f_t: Tensor, f_s: Tensor) -> Tensor:
    """Linear map of every (temporal token, spatial token) concatenation to 3 coords.

    Evaluated as ``F_t W_t + F_s W_s + b`` with an outer broadcast, which equals
    the explicit concatenation but costs ``(t_k + J)`` row products.
    """
    c_l = f_t.shape[-1]
    w = p["head.weight"]
    a = tn.matmul(f_t, tn.slice_axis(w, 0, c_l, axis=0))       # [..., t_k, 3]
    b = tn.matmul(f_s, tn.slice_axis(w, c_l, 2 * c_l, axis=0))  # [..., J, 3]
    *lead, t_k, _ = a.shape
    J = b.shape[-2]
    a = tn.reshape(a, (*lead, t_k, 1, 3))
    b = tn.reshape(b, (*lead, 1, J, 3))
    return tn.add(tn.add(a, b), p["head.bias"])


def forward(p: dict, x: Tensor, cfg: ModelConfig, topo: Optional[SkeletonTopology] = None,
            trace: Optional[dict] = None) -> Tensor:
    """``[..., T, J, 2] -> [..., t_k, J, 3]`` (or ``[..., T, J, 3]`` in idct_full mode)."""
    f_t, f_s = encode(p, x, cfg, topo, trace)
    y = regression_head(p, f_t, f_s)
    if cfg.output_mode == "idct_full":
        *lead, t_k, J, _ = y.shape
        basis_t = Tensor(dct_matrix(cfg.rf)[:t_k].T.astype(y.dtype))
        y = tn.reshape(tn.matmul(basis_t, tn.reshape(y, (*lead, t_k, J * 3))),
                       (*lead, cfg.rf, J, 3))
    return y


def as_tensors(params: dict[str, np.ndarray], tape: Optional[Tape] = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.watch(v) for k, v in params.items()}


def predict(params: dict[str, np.ndarray], x: np.ndarray, cfg: ModelConfig,
            topo: Optional[SkeletonTopology] = None) -> np.ndarray:
    """Untracked forward on plain arrays."""
    dtype = next(iter(params.values())).dtype
    return forward(as_tensors(params), Tensor(np.asarray(x, dtype=dtype)), cfg, topo).data


# ---------------------------------------------------------------- accounting


def _mlp_params(c: int, hidden: int) -> int:
    return 2 * c + c * hidden + hidden + hidden * c + c


def _attn_params(c: int) -> int:
    return 4 * (c * c + c) + 2 * c


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form scalar counts per module (independent of :func:`param_shapes`)."""
    C, J, T, L, c_l = cfg.channels, cfg.joints, cfg.rf, cfg.layers, cfg.c_l
    hidden = int(round(C * cfg.mlp_ratio))
    cs, ct = C // 3, C // 2
    ab = set(cfg.ablate)
    out = {
        "spatial_embed": 2 * T * C + C + J * C,
        "temporal_embed": 2 * J * C + C + cfg.t_k * C,
        "ljc": 0 if "ljc" in ab else L * 2 * cs * cs,
        "ipc": 0 if "ipc" in ab else L * ((2 * cs * cs + cs) + (3 * cs * cs + cs) + 2 * _mlp_params(cs, cs)),
        "gbi": 0 if "gbi" in ab else L * _attn_params(cs),
        "spatial_aggregate": L * _mlp_params(C, hidden),
        "ime": 0 if "ime" in ab else L * 2 * ct * ct,
        "gcp": 0 if "gcp" in ab else L * _attn_params(ct),
        "temporal_aggregate": L * _mlp_params(C, hidden),
        "s_fcn": 2 * C + C * c_l + c_l,
        "t_fcn": 2 * C + C * c_l + c_l,
        "head": 2 * c_l * 3 + 3,
    }
    return out


def param_count(cfg: ModelConfig) -> int:
    return int(sum(param_breakdown(cfg).values()))


# Per-element costs of the non-matmul ops, in FLOPs.  A multiply-accumulate is 2.
EXP_COST, DIV_COST, SQRT_COST = 4, 1, 2
SOFTMAX_COST = 1 + EXP_COST + 1 + DIV_COST        # subtract max, exp, sum, divide
LAYERNORM_COST = 1 + 1 + 2 + DIV_COST + 2         # mean, centre, square-acc, scale, affine
LAYERNORM_ROW_COST = SQRT_COST + DIV_COST
GELU_COST = DIV_COST + EXP_COST + 3               # x/sqrt2, erf, 1+., *0.5, *x


def _linear_flops(rows: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return 2 * rows * c_in * c_out + (rows * c_out if bias else 0)


def _ln_flops(rows: int, c: int) -> int:
    return rows * c * LAYERNORM_COST + rows * LAYERNORM_ROW_COST


def _mlp_flops(rows: int, c: int, hidden: int) -> int:
    return (_ln_flops(rows, c) + _linear_flops(rows, c, hidden) + rows * hidden * GELU_COST
            + _linear_flops(rows, hidden, c))


def _gcn_block_flops(n: int, c: int) -> int:
    # two (A X) W products, one GELU, one residual add
    return 2 * (2 * n * n * c + 2 * n * c * c) + n * c * GELU_COST + n * c


def token_interaction_macs(n: int, c: int) -> int:
    """Multiply-accumulates of ``Q K^T`` plus ``A V`` over ``n`` tokens of width ``c``."""
    return 2 * n * n * c


def _attn_block_flops(n: int, c: int, heads: int) -> int:
    return (3 * _linear_flops(n, c, c) + 2 * token_interaction_macs(n, c)
            + heads * n * n * (1 + SOFTMAX_COST) + _linear_flops(n, c, c)
            + _ln_flops(n, c) + n * c)


def _ipc_flops(c: int, n_joints: int) -> int:
    limbs = 4
    convs = _linear_flops(limbs, 2 * c, c) + _linear_flops(limbs, 3 * c, c)
    acts = 2 * limbs * c * GELU_COST
    mlps = 2 * (_mlp_flops(limbs, c, c) + limbs * c)
    return convs + acts + mlps + 2 * n_joints * c


def flops_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Analytic FLOPs of one forward pass for a single window, per module."""
    C, J, T, L, c_l, t_k, h = cfg.channels, cfg.joints, cfg.rf, cfg.layers, cfg.c_l, cfg.t_k, cfg.heads
    hidden = int(round(C * cfg.mlp_ratio))
    cs, ct = C // 3, C // 2
    ab = set(cfg.ablate)
    agg = lambda n: _mlp_flops(n, C, hidden) + n * C  # noqa: E731
    out = {
        "dct": 2 * t_k * T * 2 * J,
        "spatial_embed": _linear_flops(J, 2 * T, C) + J * C,
        "temporal_embed": _linear_flops(t_k, 2 * J, C) + t_k * C,
        "ljc": 0 if "ljc" in ab else L * _gcn_block_flops(J, cs),
        "ipc": L * J * cs + (0 if "ipc" in ab else L * _ipc_flops(cs, J)),
        "gbi": L * J * cs + (0 if "gbi" in ab else L * _attn_block_flops(J, cs, h)),
        "spatial_aggregate": L * agg(J),
        "ime": 0 if "ime" in ab else L * _gcn_block_flops(t_k, ct),
        "gcp": L * t_k * ct + (0 if "gcp" in ab else L * _attn_block_flops(t_k, ct, h)),
        "temporal_aggregate": L * agg(t_k),
        "s_fcn": _ln_flops(J, C) + _linear_flops(J, C, c_l) + J * c_l * GELU_COST,
        "t_fcn": _ln_flops(t_k, C) + _linear_flops(t_k, C, c_l) + t_k * c_l * GELU_COST,
        "head": 2 * (t_k + J) * c_l * 3 + 2 * t_k * J * 3,
    }
    if cfg.output_mode == "idct_full":
        out["idct"] = 2 * T * t_k * J * 3
    return out


def flops_count(cfg: ModelConfig) -> int:
    return int(sum(flops_breakdown(cfg).values()))


def attention_complexity(tokenization: str, J: int, T: int, T_k: int, C: int) -> int:
    """Leading token-interaction cost of one spatial + one temporal attention layer."""
    if min(J, T, T_k, C) <= 0:
        raise ContractError("dimensions must be positive")
    if tokenization == "DTST":
        return J * T * T * C + T * J * J * C
    if tokenization == "ETST":
        return T_k * T_k * C + J * J * C
    raise ContractError(f"unknown tokenization {tokenization!r}")


def attention_terms(cfg: ModelConfig) -> dict[str, int]:
    """Per-layer token-interaction terms of this model at full channel width.

    ``temporal_gcp_macs`` is read off the actual GCP block (width C/2, so
    ``2 * t_k^2 * C/2``) and coincides with the ETST temporal term.
    """
    C = cfg.channels
    return {
        "temporal": cfg.t_k * cfg.t_k * C,
        "spatial": cfg.joints * cfg.joints * C,
        "total": attention_complexity("ETST", cfg.joints, cfg.rf, cfg.t_k, C),
        "temporal_gcp_macs": token_interaction_macs(cfg.t_k, C // 2),
        "spatial_gbi_macs": token_interaction_macs(cfg.joints, C // 3),
    }


def accounting_report(cfg: ModelConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "params": param_count(cfg),
        "param_breakdown": param_breakdown(cfg),
        "flops": flops_count(cfg),
        "flops_breakdown": flops_breakdown(cfg),
        "attention_terms": attention_terms(cfg),
        "attention_dtst": attention_complexity("DTST", cfg.joints, cfg.rf, cfg.t_k, cfg.channels),
    }

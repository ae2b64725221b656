import numpy as np
import pytest

from nanohtnet import model as M, tensor as tn
from nanohtnet.errors import ConfigError, ContractError, DimensionError
from nanohtnet.metrics import mpjpe_loss
from nanohtnet.model import FLAGSHIP, LARGE, ModelConfig
from nanohtnet.optim import AdamState, adam_step
from nanohtnet.tensor import Tensor


def tensors(p):
    return {k: Tensor(v) for k, v in p.items()}


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [dict(channels=50), dict(t_k=0), dict(t_k=300), dict(layers=0),
                                dict(heads=7), dict(output_mode="frames"), dict(ablate=("xyz",))])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = ModelConfig(rf=27, t_k=3, channels=96, ablate=("ipc",))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert FLAGSHIP.c_l == 480


def test_supervision_indices_include_centre():
    idx = M.supervision_indices(243, 9)
    assert len(idx) == 9 and 121 in idx and idx.min() >= 0 and idx.max() < 243
    np.testing.assert_array_equal(np.diff(idx), 27)
    np.testing.assert_array_equal(M.supervision_indices(5, 5), np.arange(5))


# ---------------------------------------------------------------- embeddings


def test_embed_zero_input_gives_positions(small_cfg, small_params, rng):
    p = dict(small_params)
    p["spatial_embed.pos"] = rng.normal(size=p["spatial_embed.pos"].shape)
    p["temporal_embed.pos"] = rng.normal(size=p["temporal_embed.pos"].shape)
    xs = M.etst_embed_spatial(Tensor(np.zeros((8, 17, 2))), tensors(p))
    xt = M.etst_embed_temporal(Tensor(np.zeros((4, 17, 2))), tensors(p))
    np.testing.assert_array_equal(xs.data, p["spatial_embed.pos"])
    np.testing.assert_array_equal(xt.data, p["temporal_embed.pos"])


def test_embed_shapes_flagship():
    p = tensors(M.init_params(FLAGSHIP, 0))
    assert M.etst_embed_spatial(Tensor(np.zeros((243, 17, 2), np.float32)), p).shape == (17, 240)
    assert M.etst_embed_temporal(Tensor(np.zeros((9, 17, 2), np.float32)), p).shape == (9, 240)


def test_embed_impulse_locality(small_params):
    p = tensors(small_params)
    x = np.zeros((8, 17, 2))
    x[3, 5, 1] = 1.0
    xs = M.etst_embed_spatial(Tensor(x), p).data
    changed = np.flatnonzero(np.abs(xs).sum(-1))
    np.testing.assert_array_equal(changed, [5])
    # the token picks up exactly one row of the embedding matrix
    np.testing.assert_allclose(xs[5], small_params["spatial_embed.weight"][2 * 3 + 1])
    c = np.zeros((4, 17, 2))
    c[2, 9, 0] = 1.0
    xt = M.etst_embed_temporal(Tensor(c), p).data
    np.testing.assert_array_equal(np.flatnonzero(np.abs(xt).sum(-1)), [2])


def test_frame_swap_touches_only_its_rows(small_params, rng):
    w = small_params["spatial_embed.weight"]
    x = rng.normal(size=(8, 17, 2))
    y = x[[0, 1, 6, 3, 4, 5, 2, 7]]
    d = M.etst_embed_spatial(Tensor(y), tensors(small_params)).data - \
        M.etst_embed_spatial(Tensor(x), tensors(small_params)).data
    # oracle from rows 2t, 2t+1 of frames 2 and 6 only
    oracle = (x[6] - x[2]) @ w[4:6] + (x[2] - x[6]) @ w[12:14]
    np.testing.assert_allclose(d, oracle, atol=1e-12)


def test_embed_dimension_error(small_params):
    with pytest.raises(DimensionError):
        M.etst_embed_spatial(Tensor(np.zeros((9, 17, 2))), tensors(small_params))


# ---------------------------------------------------------------- forward


def test_flagship_output_shape():
    y = M.predict(M.init_params(FLAGSHIP, 0), np.zeros((243, 17, 2), np.float32), FLAGSHIP)
    assert y.shape == (9, 17, 3)


def test_idct_full_output_shape(small_params):
    cfg = ModelConfig(rf=8, t_k=4, channels=48, layers=1, heads=4, output_mode="idct_full")
    assert M.predict(small_params, np.zeros((2, 8, 17, 2)), cfg).shape == (2, 8, 17, 3)


def test_zero_params_give_head_bias(small_cfg, rng):
    p = {k: np.zeros(s) for k, s in M.param_shapes(small_cfg).items()}
    p["head.bias"] = np.array([1.5, -2.0, 0.25])
    y = M.predict(p, rng.normal(size=(8, 17, 2)), small_cfg)
    np.testing.assert_array_equal(y, np.broadcast_to(p["head.bias"], y.shape))


def test_regression_head_equals_concat(rng):
    c_l = 6
    f_t, f_s = rng.normal(size=(4, c_l)), rng.normal(size=(17, c_l))
    p = {"head.weight": Tensor(rng.normal(size=(2 * c_l, 3))), "head.bias": Tensor(rng.normal(size=3))}
    y = M.regression_head(p, Tensor(f_t), Tensor(f_s)).data
    oracle = np.array([[np.concatenate([f_t[i], f_s[j]]) @ p["head.weight"].data + p["head.bias"].data
                        for j in range(17)] for i in range(4)])
    np.testing.assert_allclose(y, oracle, rtol=1e-12)


def test_deterministic(small_cfg, rng):
    x = rng.normal(size=(8, 17, 2)).astype(np.float32)
    a = M.predict(M.init_params(small_cfg, 5), x, small_cfg)
    b = M.predict(M.init_params(small_cfg, 5), x, small_cfg)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, M.predict(M.init_params(small_cfg, 6), x, small_cfg))


def test_finite_on_random_inputs(small_cfg):
    rng = np.random.default_rng(0)
    x = rng.normal(0, rng.uniform(0.01, 5, size=(1000, 1, 1, 1)), size=(1000, 8, 17, 2)).astype(np.float32)
    assert np.isfinite(M.predict(M.init_params(small_cfg, 0), x, small_cfg)).all()
    xf = rng.normal(0, 1, size=(4, 243, 17, 2)).astype(np.float32)
    assert np.isfinite(M.predict(M.init_params(FLAGSHIP, 0), xf, FLAGSHIP)).all()


def test_non_finite_input_rejected(small_cfg, small_params):
    x = np.zeros((8, 17, 2))
    x[0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        M.predict(small_params, x, small_cfg)


def test_full_forward_gradient_check(small_cfg, small_params, rng):
    x = rng.normal(size=(2, 8, 17, 2))
    gt = rng.normal(size=(2, 4, 17, 3))
    worst = 0.0
    for i, name in enumerate(small_params):
        def f(w, name=name):
            q = tensors(small_params)
            q[name] = w
            return mpjpe_loss(M.forward(q, Tensor(x), small_cfg), gt)
        worst = max(worst, tn.grad_check(f, small_params[name], samples=2, rng=np.random.default_rng(i)))
    assert worst < 1e-4


# ---------------------------------------------------------------- accounting


def test_param_count_paper_range():
    assert abs(M.param_count(FLAGSHIP) / 1.52e6 - 1) <= 0.20
    assert abs(M.param_count(LARGE) / 4.40e6 - 1) <= 0.20


@pytest.mark.parametrize("cfg", [FLAGSHIP, LARGE, ModelConfig(ablate=("ipc", "gcp")),
                                 ModelConfig(rf=27, t_k=3, channels=96, layers=2, mlp_ratio=2.0)])
def test_breakdown_matches_shape_table(cfg):
    assert sum(M.param_breakdown(cfg).values()) == M.param_count(cfg)
    assert M.param_count(cfg) == sum(int(np.prod(s)) for s in M.param_shapes(cfg).values())


def test_param_count_equals_optimizer_scalars(small_cfg, small_params):
    grads = {k: np.ones_like(v) for k, v in small_params.items()}
    state = AdamState()
    adam_step(small_params, grads, state, 1e-3)
    assert state.scalars() == M.param_count(small_cfg)


def test_flops_paper_range():
    assert abs(M.flops_count(FLAGSHIP) / 33e6 - 1) <= 0.30
    assert sum(M.flops_breakdown(FLAGSHIP).values()) == M.flops_count(FLAGSHIP)


def test_etst_closed_form():
    assert M.attention_complexity("ETST", 17, 243, 9, 240) == 88_800
    terms = M.attention_terms(FLAGSHIP)
    assert terms["temporal"] + terms["spatial"] == terms["total"] == 88_800
    assert terms["temporal_gcp_macs"] == terms["temporal"]
    # J = 1, t_k = T: both reduce to T^2 C plus lower-order terms
    T, C = 50, 8
    assert M.attention_complexity("DTST", 1, T, T, C) - T * T * C == T * C
    assert M.attention_complexity("ETST", 1, T, T, C) - T * T * C == C


def test_etst_below_dtst_on_grid():
    for J in (2, 17):
        for T in (2, 27, 81, 243):
            for t_k in range(1, T + 1, max(1, T // 9)):
                assert M.attention_complexity("ETST", J, T, t_k, 48) < M.attention_complexity("DTST", J, T, t_k, 48)


def test_flops_ratio_when_channels_double():
    a, b = ModelConfig(channels=96, heads=8), ModelConfig(channels=192, heads=8)
    fa, fb = M.flops_breakdown(a), M.flops_breakdown(b)
    assert fb["spatial_embed"] == 2 * fa["spatial_embed"]
    assert fb["temporal_embed"] == 2 * fa["temporal_embed"]
    # the quadratic coefficient (second difference over C, 2C, 3C) is exactly the
    # projection count, so doubling C quadruples it
    L, J, t_k, c = a.layers, a.joints, a.t_k, a.channels
    f3 = M.flops_breakdown(ModelConfig(channels=3 * c, heads=8))
    for key, proj in (("ljc", lambda c: L * 2 * 2 * J * (c // 3) ** 2),
                      ("gbi", lambda c: L * 4 * 2 * J * (c // 3) ** 2),
                      ("ime", lambda c: L * 2 * 2 * t_k * (c // 2) ** 2),
                      ("gcp", lambda c: L * 4 * 2 * t_k * (c // 2) ** 2)):
        assert (f3[key] - 2 * fb[key] + fa[key]) / 2 == proj(c)
        assert proj(2 * c) == 4 * proj(c)


def test_attention_complexity_rejects_bad_input():
    with pytest.raises(ContractError):
        M.attention_complexity("ETST", 0, 1, 1, 1)
    with pytest.raises(ContractError):
        M.attention_complexity("XYZ", 1, 1, 1, 1)

"""Depth-map aggregation against a straight-line numpy/scipy oracle."""
import numpy as np
import pytest
from scipy.signal import correlate2d

from pdseg.gradcheck import grad_check
from pdseg.pdam import (
    PdamParams,
    PseudoDepthSet,
    aggregate,
    channel_attention,
    pdam_param_count,
    spatial_attention,
)
from pdseg.tensor import ConfigError, DimensionError, NumericError, Tensor

F32EPS = float(np.finfo(np.float32).eps)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_aggregate(maps, params):
    """The whole module as flat numpy: depthwise convs, pooling, MLP,
    1x1 convs, lambda-weighted sums.  Shares no code with the package."""
    L = len(maps)
    pooled = []
    for m, dw in zip(maps, params.dw):
        w = dw.w.data
        conv = np.stack([correlate2d(m[0, c], w[c, 0], mode="same") for c in range(3)])
        pooled.append(conv.max(axis=(1, 2)))
        pooled.append(conv.mean(axis=(1, 2)))
    feat = np.concatenate(pooled)[None, :]
    h = feat @ params.fc1.w.data.T + params.fc1.b.data
    h = np.maximum(h, 0.0)
    wc = _sigmoid(h @ params.fc2.w.data.T + params.fc2.b.data)[0]

    stack = np.concatenate([m[0] for m in maps], axis=0)
    w1 = params.sconv1.w.data[:, :, 0, 0]
    a = np.tensordot(w1, stack, axes=([1], [0])) + params.sconv1.b.data[:, None, None]
    a = np.maximum(a, 0.0)
    w2 = params.sconv2.w.data[:, :, 0, 0]
    ws = _sigmoid(np.tensordot(w2, a, axes=([1], [0])) + params.sconv2.b.data[:, None, None])

    out = np.zeros_like(maps[0])
    for i, m in enumerate(maps):
        term = m.copy()
        if params.lambda_c:
            term += (m * wc[3 * i:3 * i + 3][None, :, None, None]) * params.lambda_c
        if params.lambda_s:
            term += (m * ws[i][None, None]) * params.lambda_s
        out += term
    return out


def _random_setup(rng, L, h=9, w=7, dtype=np.float64, **kw):
    params = PdamParams(rng, L, dtype=dtype, **kw)
    maps = [Tensor(rng.uniform(0, 1, (1, 3, h, w)), requires_grad=True, dtype=dtype)
            for _ in range(L)]
    return PseudoDepthSet(maps=maps), params


@pytest.mark.parametrize("L", [1, 2, 3])
def test_aggregate_matches_oracle(L):
    rng = np.random.default_rng(100 + L)
    pd_set, params = _random_setup(rng, L)
    got = aggregate(pd_set, params).data
    want = oracle_aggregate([m.data for m in pd_set.maps], params)
    assert got.shape == (1, 3, 9, 7)
    assert np.max(np.abs(got - want)) < 1e-12


def test_attention_ranges_and_shapes():
    rng = np.random.default_rng(5)
    pd_set, params = _random_setup(rng, 2, h=6, w=6)
    wc = channel_attention(pd_set, params)
    ws = spatial_attention(pd_set, params)
    assert len(wc) == len(ws) == 2
    for t in wc:
        assert t.shape == (1, 3, 1, 1)
        assert np.all(t.data > 0) and np.all(t.data < 1)
    for t in ws:
        assert t.shape == (1, 1, 6, 6)
        assert np.all(t.data > 0) and np.all(t.data < 1)


def test_param_counts_closed_form():
    # L=1: dw 75, fc 42+21, spatial 12+4 -> 154; L=3: 225+342+171+90+30 -> 858
    assert pdam_param_count(1) == 154
    assert pdam_param_count(3) == 858
    for L in (1, 2, 3, 4):
        params = PdamParams(np.random.default_rng(0), L)
        assert params.num_scalars() == pdam_param_count(L)


def test_lambda_zero_is_exact_sum():
    rng = np.random.default_rng(6)
    pd_set, params = _random_setup(rng, 3, dtype=np.float32,
                                   lambda_c=0.0, lambda_s=0.0)
    got = aggregate(pd_set, params).data
    want = pd_set.maps[0].data + pd_set.maps[1].data + pd_set.maps[2].data
    assert np.max(np.abs(got - want)) <= 10 * F32EPS


def test_zero_initialized_single_map_scales_by_three_halves():
    # all-zero weights emit 0.5 everywhere; with both lambdas at 0.5 each
    # map contributes m * (1 + 0.5*0.5 + 0.5*0.5) = 1.5 m
    params = PdamParams.zero_initialized(1)
    rng = np.random.default_rng(7)
    m = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    out = aggregate(PseudoDepthSet(maps=[m]), params)
    assert np.max(np.abs(out.data - 1.5 * m.data)) < 1e-6


def test_zero_initialized_is_homogeneous():
    # constant attention weights make the aggregate linear in the maps
    params = PdamParams.zero_initialized(2)
    rng = np.random.default_rng(8)
    maps = [Tensor(rng.uniform(0, 1, (1, 3, 6, 6)).astype(np.float32))
            for _ in range(2)]
    base = aggregate(PseudoDepthSet(maps=maps), params).data
    doubled = aggregate(PseudoDepthSet(
        maps=[Tensor(2.0 * m.data) for m in maps]), params).data
    assert np.max(np.abs(doubled - 2.0 * base)) < 1e-5


def test_aggregate_gradients():
    rng = np.random.default_rng(9)
    pd_set, params = _random_setup(rng, 1, h=5, w=5)
    tensors = list(pd_set.maps) + [t for _, t in params.named_parameters()]

    def fn(*inputs):
        return (aggregate(PseudoDepthSet(maps=[inputs[0]]), params) * 0.3).sum()

    r = grad_check(fn, tensors, max_coords_per_input=4,
                   rng=np.random.default_rng(0), name="pdam")
    assert r.passed, str(r)


def test_numeric_failures_name_the_stage():
    rng = np.random.default_rng(10)
    pd_set, params = _random_setup(rng, 1, h=4, w=4)
    params.fc1.w.data[0, 0] = np.nan
    with pytest.raises(NumericError, match="channel attention failed"):
        aggregate(pd_set, params)

    pd_set2, params2 = _random_setup(np.random.default_rng(11), 1, h=4, w=4)
    params2.sconv1.w.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="spatial attention failed"):
        aggregate(pd_set2, params2)

    # a poisoned branch that lambda disables must not run at all
    pd_set3, params3 = _random_setup(np.random.default_rng(12), 1, h=4, w=4,
                                     lambda_c=0.0)
    params3.fc1.w.data[:] = np.nan
    out = aggregate(pd_set3, params3)
    assert np.all(np.isfinite(out.data))


def test_from_planes_replicates_channels():
    rng = np.random.default_rng(13)
    planes = [rng.uniform(0, 1, (5, 4)) for _ in range(2)]
    pd_set = PseudoDepthSet.from_planes(planes, source_tags=["a", "b"])
    assert pd_set.num_maps == 2
    assert pd_set.spatial == (5, 4)
    assert pd_set.source_tags == ["a", "b"]
    for plane, m in zip(planes, pd_set.maps):
        assert m.shape == (1, 3, 5, 4)
        for c in range(3):
            assert np.allclose(m.data[0, c], plane, atol=1e-7)
    with pytest.raises(DimensionError):
        PseudoDepthSet.from_planes([rng.uniform(0, 1, (2, 3, 4))])


def test_set_and_pairing_guards():
    rng = np.random.default_rng(14)
    good = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)).astype(np.float32))
    with pytest.raises(ConfigError):
        PseudoDepthSet(maps=[])
    with pytest.raises(DimensionError):
        PseudoDepthSet(maps=[Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))])
    with pytest.raises(DimensionError):
        PseudoDepthSet(maps=[good, Tensor(np.zeros((1, 3, 5, 5), dtype=np.float32))])
    with pytest.raises(ConfigError):
        PseudoDepthSet(maps=[good], source_tags=["a", "b"])
    params = PdamParams(rng, 2)
    with pytest.raises(ConfigError):
        aggregate(PseudoDepthSet(maps=[good]), params)
    with pytest.raises(ConfigError):
        PdamParams(rng, 0)
    with pytest.raises(ConfigError):
        PdamParams(rng, 1, lambda_c=-0.5)

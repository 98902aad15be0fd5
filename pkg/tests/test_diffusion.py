"""Noise schedule and fusion arithmetic against straight-numpy oracles."""
import math

import numpy as np
import pytest

from pdseg.diffusion import (
    DESK_ENCODER_WIDTHS,
    REPORTED_ENCODER_WIDTHS,
    PdEncoderParams,
    build_schedule,
    encode_pd,
    encoder_param_count,
    fuse_gaussian,
    fuse_manual,
    fuse_structured,
    mixing_weights,
    schedule_table,
)
from pdseg.tensor import ConfigError, DimensionError, Tensor


def oracle_schedule(timesteps, beta_start, beta_end, kind):
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    else:
        root = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), timesteps)
        betas = root * root
    bars = np.cumprod(1.0 - betas)
    return betas, bars


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
def test_schedule_matches_oracle(kind):
    sched = build_schedule(kind=kind)
    betas, bars = oracle_schedule(1000, 0.00085, 0.012, kind)
    assert sched.timesteps == 1000
    assert np.allclose(sched.betas, betas, rtol=0, atol=1e-15)
    assert np.allclose(sched.alpha_bars, bars, rtol=0, atol=1e-12)
    assert sched.betas.dtype == np.float64


def test_alpha_bar_monotone_and_consistent():
    sched = build_schedule()
    assert np.all(np.diff(sched.alpha_bars) < 0)
    recomputed = np.cumprod(1.0 - sched.betas)
    assert np.max(np.abs(recomputed - sched.alpha_bars)) < 1e-10
    assert np.all(sched.alpha_bars > 0) and sched.alpha_bars[0] < 1.0


def test_first_step_values():
    # alpha_bar_0 is 1 - beta_0 exactly; with the default start of 8.5e-4
    # the noise-to-signal ratio starts near 0.0292
    sched = build_schedule()
    assert sched.alpha_bars[0] == pytest.approx(1.0 - 0.00085, abs=1e-15)
    w_sig, w_noise = mixing_weights(sched, 0)
    assert w_sig == pytest.approx(math.sqrt(1.0 - 0.00085), abs=1e-12)
    assert w_noise == pytest.approx(math.sqrt(0.00085), abs=1e-12)
    assert 0.025 <= w_noise / w_sig <= 0.035


def test_scaled_linear_front_loads_small_betas():
    lin = build_schedule(kind="linear")
    sq = build_schedule(kind="scaled_linear")
    # same endpoints, smaller betas in between
    assert sq.betas[0] == pytest.approx(lin.betas[0], abs=1e-15)
    assert sq.betas[-1] == pytest.approx(lin.betas[-1], abs=1e-12)
    mid = slice(1, 999)
    assert np.all(sq.betas[mid] < lin.betas[mid])
    assert sq.alpha_bars[-1] > lin.alpha_bars[-1]


def test_single_step_schedule():
    sched = build_schedule(timesteps=1, beta_start=0.5, beta_end=0.5, kind="linear")
    assert sched.timesteps == 1
    assert sched.alpha_bars[0] == pytest.approx(0.5, abs=1e-15)


def test_schedule_guards():
    with pytest.raises(ConfigError):
        build_schedule(timesteps=0)
    with pytest.raises(ConfigError):
        build_schedule(beta_start=0.0)
    with pytest.raises(ConfigError):
        build_schedule(beta_start=0.2, beta_end=0.1)
    with pytest.raises(ConfigError):
        build_schedule(beta_end=1.0)
    with pytest.raises(ConfigError):
        build_schedule(kind="cosine")
    sched = build_schedule()
    with pytest.raises(ConfigError):
        mixing_weights(sched, 1000)
    with pytest.raises(ConfigError):
        mixing_weights(sched, -1)


def test_schedule_table_covers_endpoints():
    sched = build_schedule()
    table = schedule_table(sched)
    lines = table.splitlines()
    assert "beta" in lines[0]
    assert lines[1].split()[0] == "0"
    assert lines[-1].split()[0] == "999"


# --- encoder ----------------------------------------------------------------


def oracle_conv_stack_count(widths):
    total = 0
    for cin, cout in zip(widths[:-1], widths[1:]):
        total += cout * cin * 3 * 3 + cout
    return total


def test_encoder_param_counts():
    assert encoder_param_count(DESK_ENCODER_WIDTHS) == oracle_conv_stack_count(DESK_ENCODER_WIDTHS)
    assert encoder_param_count(DESK_ENCODER_WIDTHS) == 6244
    assert encoder_param_count(DESK_ENCODER_WIDTHS) < 10000
    assert encoder_param_count(REPORTED_ENCODER_WIDTHS) == oracle_conv_stack_count(REPORTED_ENCODER_WIDTHS)
    assert encoder_param_count(REPORTED_ENCODER_WIDTHS) == 307972


def test_encoder_actual_params_match_closed_form():
    for widths in (DESK_ENCODER_WIDTHS, (3, 8, 8, 2)):
        enc = PdEncoderParams(np.random.default_rng(0), widths)
        assert enc.num_scalars() == encoder_param_count(widths)
        named = dict(enc.named_parameters())
        assert sum(t.data.size for t in named.values()) == encoder_param_count(widths)
        assert "enc.conv1.w" in named and "enc.conv3.b" in named


def test_encode_pd_shape_and_guards():
    enc = PdEncoderParams(np.random.default_rng(1))
    pd = Tensor(np.random.default_rng(2).uniform(0, 1, (1, 3, 32, 24)).astype(np.float32))
    z = encode_pd(pd, enc)
    assert z.shape == (1, 4, 4, 3)
    with pytest.raises(DimensionError):
        encode_pd(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)), enc)
    with pytest.raises(DimensionError):
        encode_pd(Tensor(np.zeros((1, 3, 30, 32), dtype=np.float32)), enc)


# --- fusion -----------------------------------------------------------------


def _pair(rng, shape=(1, 4, 4, 4)):
    z = Tensor(rng.normal(size=shape).astype(np.float32))
    n = Tensor(rng.normal(size=shape).astype(np.float32))
    return z, n


def test_fuse_gaussian_matches_identity_oracle():
    rng = np.random.default_rng(3)
    z, n = _pair(rng)
    sched = build_schedule()
    for t in (0, 100, 999):
        ab = sched.alpha_bars[t]
        want = (np.float32(math.sqrt(ab)) * z.data
                + np.float32(math.sqrt(1.0 - ab)) * n.data)
        got = fuse_gaussian(z, n, sched, t)
        assert np.allclose(got.data, want, atol=1e-7)


def test_fuse_ones_at_first_step():
    sched = build_schedule()
    one = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = fuse_structured(one, one, sched, 0)
    want = math.sqrt(1.0 - 0.00085) + math.sqrt(0.00085)
    assert np.allclose(out.data, want, atol=1e-6)


def test_structured_equals_gaussian_arithmetic():
    rng = np.random.default_rng(4)
    z, n = _pair(rng)
    sched = build_schedule()
    a = fuse_gaussian(z, n, sched, 50)
    b = fuse_structured(z, n, sched, 50)
    assert np.array_equal(a.data, b.data)


def test_fuse_manual_oracle_and_passthrough():
    rng = np.random.default_rng(5)
    z, n = _pair(rng)
    out = fuse_manual(z, n, 0.8, 0.2)
    want = np.float32(0.8) * z.data + np.float32(0.2) * n.data
    assert np.allclose(out.data, want, atol=1e-7)
    # w_pd == 0 must not touch the latent at all: bitwise z * w_rgb
    passthrough = fuse_manual(z, n, 1.0, 0.0)
    assert np.array_equal(passthrough.data, z.data * np.float32(1.0))
    mismatched = Tensor(np.zeros((1, 4, 2, 2), dtype=np.float32))
    assert np.array_equal(fuse_manual(z, mismatched, 0.95, 0.0).data,
                          z.data * np.float32(0.95))


def test_fusion_guards():
    rng = np.random.default_rng(6)
    z, _ = _pair(rng)
    bad = Tensor(np.zeros((1, 4, 2, 2), dtype=np.float32))
    sched = build_schedule()
    with pytest.raises(DimensionError):
        fuse_structured(z, bad, sched, 0)
    with pytest.raises(ConfigError):
        fuse_manual(z, z, -0.1, 0.5)

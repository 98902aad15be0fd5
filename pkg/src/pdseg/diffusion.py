"""DDPM-style noise schedules and early fusion of pseudo-depth latents.

The forward-process identity z_t = sqrt(alpha_bar_t) * z + sqrt(1 -
alpha_bar_t) * n is reused with the Gaussian n replaced by an encoded
pseudo-depth latent, so the fused signal keeps the noising magnitudes of
the schedule while carrying scene structure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, DimensionError, Tensor
from .params import Conv2d

__all__ = [
    "NoiseSchedule", "build_schedule", "mixing_weights", "schedule_table",
    "PdEncoderParams", "encode_pd", "encoder_param_count",
    "REPORTED_ENCODER_WIDTHS", "DESK_ENCODER_WIDTHS",
    "fuse_gaussian", "fuse_structured", "fuse_manual",
]

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012
DEFAULT_KIND = "scaled_linear"

REPORTED_ENCODER_WIDTHS = (3, 128, 256, 4)
DESK_ENCODER_WIDTHS = (3, 16, 32, 4)


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t and cumulative alpha_bar_t (float64)."""

    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.betas)


def build_schedule(timesteps: int = DEFAULT_TIMESTEPS,
                   beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END,
                   kind: str = DEFAULT_KIND) -> NoiseSchedule:
    """Linear interpolates beta directly; scaled_linear interpolates
    sqrt(beta) and squares, which front-loads smaller betas."""
    if timesteps < 1:
        raise ConfigError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end),
                            timesteps, dtype=np.float64) ** 2
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(kind=kind, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def mixing_weights(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for 0-based timestep t."""
    if not 0 <= t < schedule.timesteps:
        raise ConfigError(
            f"timestep {t} outside schedule range [0, {schedule.timesteps})")
    ab = float(schedule.alpha_bars[t])
    return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def schedule_table(schedule: NoiseSchedule, stride: int = 100) -> str:
    """Human-readable dump of the schedule at a timestep stride."""
    lines = ["    t       beta     alpha_bar   sqrt(ab)  sqrt(1-ab)"]
    ts = sorted(set(range(0, schedule.timesteps, stride)) | {schedule.timesteps - 1})
    for t in ts:
        ws, wn = mixing_weights(schedule, t)
        lines.append(f"{t:5d} {schedule.betas[t]:10.6f} {schedule.alpha_bars[t]:11.6f}"
                     f" {ws:10.6f} {wn:11.6f}")
    return "\n".join(lines)


# pseudo-depth encoder -------------------------------------------------------


class PdEncoderParams:
    """Three stride-2 3x3 convs taking a 3-channel map to a 1/8-res latent."""

    def __init__(self, rng, widths=DESK_ENCODER_WIDTHS, dtype=np.float32):
        if len(widths) != 4:
            raise ConfigError("encoder needs four widths (in, mid1, mid2, out)")
        self.widths = tuple(int(w) for w in widths)
        c0, c1, c2, c3 = self.widths
        self.convs = [
            Conv2d(rng, c0, c1, 3, stride=2, padding=1, dtype=dtype),
            Conv2d(rng, c1, c2, 3, stride=2, padding=1, dtype=dtype),
            Conv2d(rng, c2, c3, 3, stride=2, padding=1, dtype=dtype),
        ]

    def named_parameters(self, prefix: str = "enc"):
        for i, c in enumerate(self.convs):
            yield from c.named_parameters(f"{prefix}.conv{i + 1}")

    def num_scalars(self) -> int:
        return sum(c.num_scalars() for c in self.convs)


def encoder_param_count(widths=DESK_ENCODER_WIDTHS) -> int:
    """Closed-form scalar count: sum of c_in*c_out*9 + c_out per conv."""
    c0, c1, c2, c3 = widths
    return (c0 * c1 * 9 + c1) + (c1 * c2 * 9 + c2) + (c2 * c3 * 9 + c3)


def encode_pd(pd: Tensor, params: PdEncoderParams) -> Tensor:
    """ReLU after the first two convs, linear output after the third."""
    if pd.ndim != 4 or pd.shape[1] != params.widths[0]:
        raise DimensionError(
            f"encoder expects (n, {params.widths[0]}, h, w), got {pd.shape}")
    if pd.shape[2] % 8 or pd.shape[3] % 8:
        raise DimensionError(f"spatial extents must be multiples of 8, got {pd.shape}")
    h = params.convs[0](pd).relu()
    h = params.convs[1](h).relu()
    return params.convs[2](h)


# fusion ---------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: latent shapes {a.shape} and {b.shape} differ")


def fuse_gaussian(z_rgb: Tensor, noise: Tensor, schedule: NoiseSchedule, t: int) -> Tensor:
    """Standard forward noising: sqrt(ab_t) * z + sqrt(1 - ab_t) * noise."""
    _check_same_shape(z_rgb, noise, "fuse_gaussian")
    w_sig, w_noise = mixing_weights(schedule, t)
    return z_rgb * w_sig + noise * w_noise

def fuse_structured(z_rgb: Tensor, pd_latent: Tensor, schedule: NoiseSchedule, t: int) -> Tensor:
    """Same mixing arithmetic with the encoded pseudo depth as the noise."""
    _check_same_shape(z_rgb, pd_latent, "fuse_structured")
    return fuse_gaussian(z_rgb, pd_latent, schedule, t)


def fuse_manual(z_rgb: Tensor, pd_latent: Tensor, w_rgb: float, w_pd: float) -> Tensor:
    """Fixed-ratio blend w_rgb * z + w_pd * latent; (1, 0) passes z through."""
    if w_rgb < 0 or w_pd < 0:
        raise ConfigError(f"fusion weights must be >= 0, got {w_rgb}, {w_pd}")
    if w_pd == 0.0:
        return z_rgb * w_rgb
    _check_same_shape(z_rgb, pd_latent, "fuse_manual")
    return z_rgb * w_rgb + pd_latent * w_pd

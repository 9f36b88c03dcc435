"""Bit-exact corruption kernels: 9 families, severities 1..5.

Each kernel is a pure function of (image, spec, derived rng stream), so
identical derivations reproduce identical outputs across runs and thread
schedules. Images are (3, H, W) float64 in [0, 1]; every output is
clamped back to [0, 1].

Severity parameterizations are part of this repository's frozen benchmark
definition: monotone in s and visually graded at 32px.
"""

from dataclasses import dataclass

import numpy as np

FAMILIES = (
    "clean",
    "gaussian_blur",
    "motion_blur",
    "haze",
    "occlusion",
    "color_distortion",
    "brightness_inversion",
    "contrast_reversal",
    "channel_dropout",
    "rain",
)
FAMILY_IDS = {name: i for i, name in enumerate(FAMILIES)}
CORRUPTION_FAMILIES = FAMILIES[1:]

# Analysis groupings.
ERASURE_FAMILIES = ("haze", "gaussian_blur", "motion_blur", "occlusion")
CONTRADICTION_FAMILIES = (
    "color_distortion", "brightness_inversion", "contrast_reversal", "channel_dropout",
)
WEATHER_FAMILIES = ("rain",)

SEVERITIES = (1, 2, 3, 4, 5)

# Channels zeroed by channel_dropout at severity 1..5.
_DROPOUT_COUNTS = (0, 1, 1, 1, 2)


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int

    def __post_init__(self):
        if self.family not in CORRUPTION_FAMILIES:
            raise ValueError(
                f"unknown corruption family {self.family!r} "
                f"(clean is a distinct tag, not a corruption)"
            )
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def family_id(self) -> int:
        return FAMILY_IDS[self.family]


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {x.shape}")
    return x


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one spatial axis with a 1-d kernel under reflect padding."""
    radius = (len(kernel) - 1) // 2
    if radius == 0:
        return x * kernel[0]
    if x.shape[axis] <= radius:
        raise ValueError(
            f"kernel radius {radius} does not fit axis of length {x.shape[axis]}"
        )
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(xp, len(kernel), axis=axis)
    return windows @ kernel


def _gaussian_blur(x, s, rng):
    k = gaussian_kernel_1d(0.5 * s)
    return _convolve_axis(_convolve_axis(x, k, axis=1), k, axis=2)


def _motion_blur(x, s, rng):
    k = np.full(2 * s + 1, 1.0 / (2 * s + 1))
    return _convolve_axis(x, k, axis=2)


def _haze(x, s, rng):
    t = 1.0 - 0.15 * s
    return t * x + (1.0 - t) * 0.8


def _occlusion(x, s, rng):
    _, h, w = x.shape
    side = int(np.floor(0.12 * s * min(h, w)))
    out = x.copy()
    if side <= 0:
        return out
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out[:, top : top + side, left : left + side] = 0.0
    return out


def _color_distortion(x, s, rng):
    gains = rng.uniform(1.0 - 0.15 * s, 1.0 + 0.15 * s, size=3)
    biases = rng.uniform(-0.08 * s, 0.08 * s, size=3)
    return x * gains[:, None, None] + biases[:, None, None]


def _brightness_inversion(x, s, rng):
    lam = 0.2 * s
    return (1.0 - lam) * x + lam * (1.0 - x)


def _contrast_reversal(x, s, rng):
    # Coefficient interpolates 0.6 .. -1.0; s=5 is exact reversal about the
    # per-channel mean.
    mu = x.mean(axis=(1, 2), keepdims=True)
    return mu + (1.0 - 0.4 * s) * (x - mu)


def _channel_dropout(x, s, rng):
    count = _DROPOUT_COUNTS[s - 1]
    out = x.copy()
    if count == 0:
        return out
    channels = rng.choice(3, size=count, replace=False)
    out[channels] = 0.0
    return out


def _rain(x, s, rng):
    _, h, w = x.shape
    n = 20 * s
    length = int(np.floor(0.25 * h))
    rows = rng.integers(0, h, size=n)
    cols = rng.integers(0, w, size=n)
    overlay = np.zeros((h, w), dtype=np.float64)
    steps = np.arange(max(length, 1))
    for r0, c0 in zip(rows, cols):
        rr = r0 + steps
        cc = c0 + steps
        keep = (rr < h) & (cc < w)
        np.add.at(overlay, (rr[keep], cc[keep]), 0.6)
    return x + overlay[None, :, :]


_KERNELS = {
    "gaussian_blur": _gaussian_blur,
    "motion_blur": _motion_blur,
    "haze": _haze,
    "occlusion": _occlusion,
    "color_distortion": _color_distortion,
    "brightness_inversion": _brightness_inversion,
    "contrast_reversal": _contrast_reversal,
    "channel_dropout": _channel_dropout,
    "rain": _rain,
}

_NEEDS_RNG = {"occlusion", "color_distortion", "channel_dropout", "rain"}


def apply_corruption(x: np.ndarray, spec: CorruptionSpec, rng=None) -> np.ndarray:
    """Apply one corruption kernel and clamp the result to [0, 1]."""
    x = _check_image(x)
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    if spec.family in _NEEDS_RNG and rng is None:
        raise ValueError(f"{spec.family} requires an rng stream")
    out = _KERNELS[spec.family](x, spec.severity, rng)
    return np.clip(out, 0.0, 1.0)

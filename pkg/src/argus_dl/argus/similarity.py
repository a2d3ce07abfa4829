"""Trigger similarity: top-k energy clipping, windowed SSIM, null-model calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class TriggerCandidate:
    """A reverse-engineered trigger.

    ``values`` is ``(C, H, W)`` in [-1, 1] and is zero outside ``mask``.
    """

    values: np.ndarray
    mask: np.ndarray
    target: int
    local_asr: float = 0.0

    def __post_init__(self):
        if self.values.ndim != 3 or self.mask.shape != self.values.shape[1:]:
            raise ValueError("values must be (C, H, W) and mask (H, W)")
        if np.any(self.values[:, ~self.mask] != 0):
            raise ValueError("trigger values outside the mask must be zero")

    @property
    def energy(self) -> np.ndarray:
        return energy_map(self.values)

    @classmethod
    def empty(cls, shape: tuple[int, int, int], target: int = -1) -> "TriggerCandidate":
        return cls(np.zeros(shape), np.zeros(shape[1:], dtype=bool), target, 0.0)


def energy_map(values: np.ndarray) -> np.ndarray:
    """Per-pixel energy: mean over channels of the trigger magnitude.

    ``values`` may carry leading batch dimensions before ``(C, H, W)``.
    """
    return np.mean(np.abs(values), axis=-3)


def topk_indices(energy: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` highest-energy pixels; ties go to the earlier
    pixel in row-major order. Leading dimensions are treated as a batch."""
    if k < 1:
        raise ValueError("k must be at least 1")
    shape = energy.shape
    flat = energy.reshape(-1, shape[-2] * shape[-1])
    keep = np.zeros(flat.shape, dtype=bool)
    if k >= flat.shape[1]:
        keep[:] = True
    else:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
        np.put_along_axis(keep, order, True, axis=1)
    return keep.reshape(shape)


def topk_clip(trigger: TriggerCandidate, k: int) -> TriggerCandidate:
    """Keep only the ``k`` highest-energy pixels of ``trigger``."""
    keep = topk_indices(trigger.energy, k)
    mask = trigger.mask & keep
    return TriggerCandidate(np.where(mask, trigger.values, 0.0), mask,
                            trigger.target, trigger.local_asr)


def topk_clip_map(energy: np.ndarray, k: int) -> np.ndarray:
    return np.where(topk_indices(energy, k), energy, 0.0)


def box_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Uniform ``w x w`` window mean with zero padding, same output size.

    Summed-area table over the last two axes; any leading axes are a batch.
    """
    if w < 1 or w % 2 == 0:
        raise ValueError("window size must be a positive odd integer")
    r = w // 2
    h, wd = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(r + 1, r), (r + 1, r)]
    s = np.pad(x, pad).cumsum(axis=-2).cumsum(axis=-1)
    out = (s[..., w:w + h, w:w + wd] - s[..., 0:h, w:w + wd]
           - s[..., w:w + h, 0:wd] + s[..., 0:h, 0:wd])
    return out / (w * w)


def ssim_maps(ea: np.ndarray, eb: np.ndarray, w: int) -> np.ndarray:
    """Mean local SSIM between (batches of) clipped energy maps.

    Dynamic range ``L`` is the larger of the two maps' maxima; a pair of
    all-zero maps has similarity 1.
    """
    ea = np.asarray(ea, dtype=np.float64)
    eb = np.asarray(eb, dtype=np.float64)
    if ea.shape != eb.shape:
        raise ValueError("energy maps must have the same shape")
    h, wd = ea.shape[-2:]
    if w > min(h, wd):
        raise ValueError("window larger than the image")
    big = np.maximum(ea.max(axis=(-2, -1)), eb.max(axis=(-2, -1)))[..., None, None]
    c1 = (0.01 * big) ** 2
    c2 = (0.03 * big) ** 2
    mu_a, mu_b = box_mean(ea, w), box_mean(eb, w)
    var_a = box_mean(ea * ea, w) - mu_a * mu_a
    var_b = box_mean(eb * eb, w) - mu_b * mu_b
    cov = box_mean(ea * eb, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (num / den).mean(axis=(-2, -1))
    return np.where(big[..., 0, 0] == 0, 1.0, sim)


def ssim_sim(a: TriggerCandidate, b: TriggerCandidate, w: int) -> float:
    """Similarity of two (already top-k clipped) triggers, in [-1, 1]."""
    return float(ssim_maps(a.energy, b.energy, w))


def trigger_similarity(a: TriggerCandidate, b: TriggerCandidate, k: int, w: int) -> float:
    return ssim_sim(topk_clip(a, k), topk_clip(b, k), w)


# --------------------------------------------------------------------------
# null-model calibration


@dataclass(frozen=True)
class CalibrationResult:
    xi: float
    mean_sim: float
    std_sim: float
    params: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"xi": self.xi, "mean_sim": self.mean_sim, "std_sim": self.std_sim, **self.params}


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(z: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of the last two axes, zero padding, same size."""
    g = gaussian_kernel_1d(sigma)
    r = len(g) // 2
    h, w = z.shape[-2:]
    lead = [(0, 0)] * (z.ndim - 2)
    zp = np.pad(z, lead + [(0, 0), (r, r)])
    rows = sum(g[i] * zp[..., :, i:i + w] for i in range(len(g)))
    rp = np.pad(rows, lead + [(r, r), (0, 0)])
    return sum(g[i] * rp[..., i:i + h, :] for i in range(len(g)))


def null_energy_maps(rng: np.random.Generator, n: int, height: int, width: int,
                     sigma: float) -> np.ndarray:
    """``n`` false-positive stand-ins: magnitudes of smoothed white noise."""
    return np.abs(gaussian_blur(rng.standard_normal((n, height, width)), sigma))


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    ordered = np.sort(np.asarray(values))
    rank = max(1, math.ceil(q * len(ordered)))
    return float(ordered[rank - 1])


def null_similarities(height: int, width: int, k: int, window: int, sigma: float,
                      samples: int, seed: int, chunk: int = 1000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    sims = np.empty(samples)
    for start in range(0, samples, chunk):
        m = min(chunk, samples - start)
        maps = topk_clip_map(null_energy_maps(rng, 2 * m, height, width, sigma), k)
        sims[start:start + m] = ssim_maps(maps[:m], maps[m:], window)
    return sims


def calibrate_xi(height: int, width: int, k: int, window: int, sigma: float,
                 samples: int = 10_000, quantile: float = 0.99, seed: int = 0) -> CalibrationResult:
    """Threshold = nearest-rank ``quantile`` of SSIM between independent null triggers."""
    if samples < 1000:
        raise ValueError("need at least 1000 Monte Carlo pairs")
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    sims = null_similarities(height, width, k, window, sigma, samples, seed)
    params = {"height": height, "width": width, "k": k, "window": window, "sigma": sigma,
              "samples": samples, "quantile": quantile, "seed": seed}
    return CalibrationResult(nearest_rank_quantile(sims, quantile), float(sims.mean()),
                             float(sims.std()), params)


def default_k(height: int, width: int) -> int:
    return max(1, int(round(0.05 * height * width)))


def default_window(height: int) -> int:
    """Odd integer closest to ``height / 3``."""
    target = height / 3
    below = max(1, 2 * math.floor((target - 1) / 2) + 1)
    return below if target - below <= below + 2 - target else below + 2

"""Local trigger reverse-engineering: gradient-seeded masks, masked refinement, local ASR."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..data import Dataset
from ..nn import ModelParams, forward, input_jacobian, input_loss_grad
from .similarity import TriggerCandidate, box_mean, topk_indices

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectConfig:
    gamma: float = 0.5       # flag threshold on local ASR
    refine_steps: int = 5
    eta: float = 0.2         # refinement step size
    mask_budget: int = 13    # pixels in each candidate mask
    mask_smoothing: int = 1  # odd box width applied to |gradient| before picking mask pixels

    def __post_init__(self):
        if self.refine_steps < 0 or self.eta < 0 or self.mask_budget < 1:
            raise ValueError("invalid detection config")
        if self.mask_smoothing < 1 or self.mask_smoothing % 2 == 0:
            raise ValueError("mask_smoothing must be a positive odd integer")


@dataclass(frozen=True)
class Detection:
    flagged: bool
    best: TriggerCandidate


def apply_candidate(x: np.ndarray, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked replacement with trigger values mapped from [-1, 1] to [0, 1].

    ``values``/``mask`` broadcast against ``x`` of shape ``(..., C, H, W)``.
    """
    m = mask[..., None, :, :] if mask.ndim == values.ndim - 1 else mask
    return np.where(m, (values + 1.0) / 2.0, x)


def minmax_signed(g: np.ndarray) -> np.ndarray:
    """Scale each ``(C, H, W)`` block of ``g`` onto [-1, 1] by its largest magnitude.

    Zero stays zero, so absolute normalized values still rank pixels by influence.
    """
    peak = np.abs(g).max(axis=(-3, -2, -1), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = g / peak
    return np.where(peak > 0, out, 0.0)


def _seed_candidates(jac: np.ndarray, labels: np.ndarray, n_classes: int, budget: int,
                     smoothing: int = 1):
    """Initial trigger and mask per target label from logit-difference gradients.

    ``jac`` holds ``(B, K, C, H, W)`` input gradients of each logit. For every
    target ``y`` the source class whose averaged normalized gradient has the
    most energy seeds the candidate.
    """
    present = np.unique(labels)
    # average per-logit gradients over the samples of each source class
    per_src = np.stack([jac[labels == z].mean(axis=0) for z in present])  # (S, K, C, H, W)
    taus, masks = [], []
    for y in range(n_classes):
        srcs = [s for s, z in enumerate(present) if z != y]
        diffs = per_src[srcs, y] - per_src[srcs, present[srcs]]
        normed = minmax_signed(diffs)
        energy = np.abs(normed).sum(axis=(1, 2, 3))
        g = normed[int(np.argmax(energy))]
        score = np.abs(g).mean(axis=0)
        if smoothing > 1:
            score = box_mean(score, smoothing)
        mask = topk_indices(score, budget)
        taus.append(np.where(mask, g, 0.0))
        masks.append(mask)
    return np.stack(taus), np.stack(masks)


def detect_many(model: ModelParams, vals: list[Dataset], cfg: DetectConfig) -> list[Detection]:
    """Run local detection of one model update against several validation sets.

    Equivalent to calling :func:`local_detect` once per set, but the forward and
    backward passes are shared in one batch.
    """
    arch = model.arch
    k_cls = arch.n_classes
    results: list[Detection | None] = [None] * len(vals)
    usable = []
    for idx, val in enumerate(vals):
        if len(np.unique(val.labels)) < 2:
            log.warning("validation set has fewer than two classes; skipping detection")
            results[idx] = Detection(False, TriggerCandidate.empty(arch.in_shape))
        else:
            usable.append(idx)
    if not usable:
        return results

    all_x = np.concatenate([vals[i].images for i in usable])
    jac_all = input_jacobian(model, all_x)
    offsets = np.cumsum([0] + [len(vals[i]) for i in usable])

    taus, masks = [], []
    # flat refinement batch: candidate id and sample row for every (candidate, x) pair
    cand_of, rows, targets = [], [], []
    for u, idx in enumerate(usable):
        labels = vals[idx].labels
        t0, m0 = _seed_candidates(jac_all[offsets[u]:offsets[u + 1]], labels,
                                  k_cls, cfg.mask_budget, cfg.mask_smoothing)
        for y in range(k_cls):
            cid = len(taus)
            taus.append(t0[y])
            masks.append(m0[y])
            sel = np.flatnonzero(labels != y) + offsets[u]
            cand_of.append(np.full(len(sel), cid))
            rows.append(sel)
            targets.append(np.full(len(sel), y))
    tau = np.stack(taus)
    mask = np.stack(masks)
    cand_of = np.concatenate(cand_of)
    rows = np.concatenate(rows)
    targets = np.concatenate(targets)
    xs = all_x[rows]
    counts = np.bincount(cand_of, minlength=len(tau)).astype(np.float64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    mexp = mask[:, None, :, :]

    for _ in range(cfg.refine_steps):
        xt = apply_candidate(xs, tau[cand_of], mask[cand_of])
        dx = input_loss_grad(model, xt, targets)
        # chain rule through the affine map; average per candidate
        g = np.add.reduceat(dx * mexp[cand_of] * 0.5, starts, axis=0) / counts[:, None, None, None]
        tau = np.where(mexp, np.clip(tau - cfg.eta * np.tanh(g), -1.0, 1.0), 0.0)

    logits = forward(model, apply_candidate(xs, tau[cand_of], mask[cand_of]))
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    hit = (np.argmax(logits, axis=1) == targets).astype(np.float64)
    asr = np.add.reduceat(hit, starts) / counts
    conf = np.add.reduceat(prob[np.arange(len(targets)), targets], starts) / counts

    for u, idx in enumerate(usable):
        block = slice(u * k_cls, (u + 1) * k_cls)
        # highest ASR wins; mean target probability breaks ties
        order = np.lexsort((-conf[block], -asr[block]))
        y = int(order[0])
        c = u * k_cls + y
        best = TriggerCandidate(tau[c].copy(), mask[c].copy(), y, float(asr[c]))
        results[idx] = Detection(bool(best.local_asr > cfg.gamma), best)
    return results


def local_detect(model: ModelParams, val: Dataset, cfg: DetectConfig) -> tuple[bool, TriggerCandidate]:
    d = detect_many(model, [val], cfg)[0]
    return d.flagged, d.best


def validation_split(ds: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Hold out one random sample per locally present class."""
    held = []
    for c in np.unique(ds.labels):
        held.append(int(rng.choice(np.flatnonzero(ds.labels == c))))
    held = np.sort(np.array(held, dtype=np.int64))
    rest = np.setdiff1d(np.arange(len(ds)), held)
    return ds.subset(rest), ds.subset(held)

"""Contour-driven patch scoring and mask planning.

A mask plan keeps the m = round((1-rate)*K) patches with the strongest
contour scores visible and hides the rest. ``contour_fraction`` blends in
plain random masking: fraction 1 keeps purely by score, fraction 0 ignores
scores entirely (uniform random keep set), anything between keeps
ceil(fraction*m) by score and draws the remainder uniformly from the rest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .imagecore import ContourStackParams, DegenerateMapError, PatchGrid, contour_map


def patch_scores(contour: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-patch mean of a contour map, row-major patch order."""
    h, w = contour.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"map size {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    return contour.reshape(gh, p, gw, p).mean(axis=(1, 3)).reshape(gh * gw)


def contour_patch_scores(
    img: np.ndarray,
    params: ContourStackParams,
    patch_size: int,
    threshold_policy="mean",
    isolated_keep_value: bool = False,
) -> np.ndarray:
    """Contour score per patch; falls back to uniform scores on flat maps."""
    gh = img.shape[0] // patch_size
    gw = img.shape[1] // patch_size
    try:
        cmap = contour_map(img, params, threshold_policy, isolated_keep_value)
    except DegenerateMapError:
        return np.full(gh * gw, 1.0)
    return patch_scores(cmap, patch_size)


@dataclass
class MaskPlan:
    """Partition of patch indices into a kept set and a masked set."""

    kept: np.ndarray    # ascending indices, size m
    masked: np.ndarray  # ascending indices, size K - m
    num_patches: int
    mask_rate: float
    contour_fraction: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "kept": self.kept.tolist(),
                "masked": self.masked.tolist(),
                "num_patches": self.num_patches,
                "mask_rate": self.mask_rate,
                "contour_fraction": self.contour_fraction,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        return cls(
            kept=np.asarray(d["kept"], dtype=np.int64),
            masked=np.asarray(d["masked"], dtype=np.int64),
            num_patches=int(d["num_patches"]),
            mask_rate=float(d["mask_rate"]),
            contour_fraction=float(d["contour_fraction"]),
            seed=int(d["seed"]),
        )


def num_kept(num_patches: int, mask_rate: float) -> int:
    """m = round((1-rate)*K), rounding halves up for platform stability."""
    return int(math.floor((1.0 - mask_rate) * num_patches + 0.5))


def plan_mask(
    scores: np.ndarray,
    mask_rate: float,
    seed: int = 0,
    contour_fraction: float = 1.0,
) -> MaskPlan:
    """Build a mask plan from patch scores.

    Ties in scores break toward the lower patch index. The random
    remainder (contour_fraction < 1) is drawn without replacement from the
    indices not already kept by score, using the given seed.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    if not 0.0 <= contour_fraction <= 1.0:
        raise ValueError(
            f"contour_fraction must be in [0, 1], got {contour_fraction}"
        )
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[0]
    m = num_kept(k, mask_rate)
    if m < 1:
        raise ValueError(f"mask_rate {mask_rate} keeps zero of {k} patches")

    by_score = np.argsort(-scores, kind="stable")  # descending, ties by index
    n_top = min(math.ceil(contour_fraction * m), m)
    kept = by_score[:n_top]
    if m > n_top:
        pool = np.setdiff1d(np.arange(k), kept)
        rng = np.random.default_rng(seed)
        extra = rng.choice(pool, size=m - n_top, replace=False)
        kept = np.concatenate([kept, extra])
    kept = np.sort(kept.astype(np.int64))
    masked = np.setdiff1d(np.arange(k, dtype=np.int64), kept)
    return MaskPlan(
        kept=kept,
        masked=masked,
        num_patches=k,
        mask_rate=mask_rate,
        contour_fraction=contour_fraction,
        seed=seed,
    )


def apply_mask(grid: PatchGrid, plan: MaskPlan):
    """Select kept patches (with positions) and list masked positions.

    Returns ``(kept_patches, kept_positions, masked_positions)`` where
    ``kept_patches`` has shape (m, P, P, C).
    """
    if plan.num_patches != grid.num_patches:
        raise ValueError(
            f"plan covers {plan.num_patches} patches, grid has {grid.num_patches}"
        )
    return grid.patches[plan.kept], plan.kept.copy(), plan.masked.copy()

"""Image/patch-grid handling and the fixed contour-mining pipeline.

The contour pipeline turns an RGB image into a non-negative contour map:
a stack of nine fixed 3x3 convolutions (eight residual 3->3 channel
layers, one zero-sum 3->1 edge layer), rectified and max-pooled, then
binarized and fed through an exact Euclidean distance transform so that
pixels far from smooth regions glow brightest.

Everything here is deterministic given the inputs and the stack seed;
the convolution kernels are fixed at construction and never trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateMapError(ValueError):
    """A scalar map could not be split into non-empty background/target sets."""


# ---------------------------------------------------------------------------
# Patch grid
# ---------------------------------------------------------------------------

@dataclass
class PatchGrid:
    """Row-major sequence of P x P x C patches covering an H x W x C image."""

    patches: np.ndarray  # (K, P, P, C)
    height: int
    width: int
    patch_size: int

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)


def to_patches(img: np.ndarray, patch_size: int) -> PatchGrid:
    """Split an H x W x C image into K = (H/P)(W/P) patches, row-major."""
    if img.ndim != 3:
        raise ValueError(f"expected H x W x C image, got shape {img.shape}")
    h, w, c = img.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(
            f"image size {h}x{w} is not divisible by patch size {p}"
        )
    gh, gw = h // p, w // p
    patches = (
        img.reshape(gh, p, gw, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, p, p, c)
        .copy()
    )
    return PatchGrid(patches=patches, height=h, width=w, patch_size=p)


def from_patches(grid: PatchGrid) -> np.ndarray:
    """Exact inverse of :func:`to_patches`."""
    p = grid.patch_size
    gh, gw = grid.height // p, grid.width // p
    if grid.patches.shape[0] != gh * gw:
        raise ValueError(
            f"grid holds {grid.patches.shape[0]} patches but "
            f"{grid.height}x{grid.width} with P={p} needs {gh * gw}"
        )
    c = grid.patches.shape[3]
    return (
        grid.patches.reshape(gh, gw, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.height, grid.width, c)
        .copy()
    )


# ---------------------------------------------------------------------------
# Fixed convolution stack
# ---------------------------------------------------------------------------

# Zero-sum edge kernel: annihilates constants exactly, responds to curvature.
_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class ContourStackParams:
    """Fixed (non-trainable) parameters of the contour-mining stack.

    ``kernels`` holds eight 3x3x3x3 kernels applied with residual identity
    connections; ``edge_kernel`` is the final 3x3x3 zero-sum kernel that
    collapses three channels to one. ``pool_size`` is the window of the
    stride-1 max-pool applied to the rectified edge response.
    """

    kernels: np.ndarray      # (8, 3, 3, 3, 3) -> (layer, ky, kx, cin, cout)
    edge_kernel: np.ndarray  # (3, 3, 3) -> (ky, kx, cin), single output channel
    pool_size: int
    seed: int

    @classmethod
    def from_seed(cls, seed: int, kernel_scale: float = 0.05, pool_size: int = 3):
        rng = np.random.default_rng(seed)
        kernels = rng.normal(0.0, kernel_scale, size=(8, 3, 3, 3, 3))
        edge = np.repeat(_LAPLACIAN[:, :, None], 3, axis=2) / 3.0
        return cls(kernels=kernels, edge_kernel=edge, pool_size=pool_size, seed=seed)


def _conv2d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """3x3 stride-1 convolution with edge-replicated padding.

    Replicated padding keeps constant inputs constant, so the zero-sum
    edge kernel yields an exactly-zero response on flat images,
    borders included.
    """
    h, wid = x.shape[:2]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    shifted = np.stack(
        [xp[i : i + h, j : j + wid] for i in range(3) for j in range(3)], axis=0
    )  # (9, H, W, Cin)
    wk = w.reshape(9, w.shape[2], -1)  # (9, Cin, Cout)
    return np.einsum("khwc,kco->hwo", shifted, wk)


def _maxpool_same(x: np.ndarray, size: int) -> np.ndarray:
    """Stride-1 max-pool with edge-replicated padding; preserves H x W."""
    pad = size // 2
    h, w = x.shape
    xp = np.pad(x, pad, mode="edge")
    return np.maximum.reduce(
        [xp[i : i + h, j : j + w] for i in range(size) for j in range(size)]
    )


def contour_response(img: np.ndarray, params: ContourStackParams) -> np.ndarray:
    """Run the fixed stack; returns a non-negative H x W edge-energy map.

    Eight residual layers mix channels, the zero-sum layer extracts edges,
    the magnitude is taken (edge energy regardless of sign), and a stride-1
    max-pool thickens the response. A constant image maps to all zeros.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"contour stack expects a 3-channel image, got {img.shape}")
    x = img.astype(np.float64, copy=False)
    for k in range(params.kernels.shape[0]):
        x = x + _conv2d_same(x, params.kernels[k])
    edge = _conv2d_same(x, params.edge_kernel[:, :, :, None])[:, :, 0]
    return _maxpool_same(np.abs(edge), params.pool_size)


def binarize(scalar_map: np.ndarray, policy="mean") -> np.ndarray:
    """Split a scalar map into background (False) and target (True) pixels.

    ``policy`` is either the string ``"mean"`` (threshold at the map mean)
    or a numeric threshold. Background is value <= threshold. Raises
    :class:`DegenerateMapError` if either side is empty.
    """
    if not np.all(np.isfinite(scalar_map)):
        raise ValueError("scalar map contains non-finite values")
    if isinstance(policy, str):
        if policy != "mean":
            raise ValueError(f"unknown threshold policy {policy!r}")
        theta = scalar_map.mean()
    else:
        theta = float(policy)
    target = scalar_map > theta
    if not target.any():
        raise DegenerateMapError("no pixel exceeds the threshold (target set empty)")
    if target.all():
        raise DegenerateMapError("every pixel exceeds the threshold (background empty)")
    return target


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform
# ---------------------------------------------------------------------------

def _edt_1d_sq(f: np.ndarray) -> np.ndarray:
    """1-D squared-distance lower envelope (Felzenszwalb-Huttenlocher).

    ``f`` holds per-site squared offsets (np.inf where no source exists).
    All finite arithmetic is on exact integers below 2**53, so results are
    bit-identical to a brute-force minimum.
    """
    n = f.shape[0]
    finite = np.flatnonzero(np.isfinite(f))
    out = np.full(n, np.inf)
    if finite.size == 0:
        return out
    v = np.zeros(n, dtype=np.int64)   # site of each envelope parabola
    z = np.full(n + 1, np.inf)        # boundaries between parabolas
    k = 0
    v[0] = finite[0]
    z[0] = -np.inf
    for q in finite[1:]:
        while True:
            vk = v[k]
            s = ((f[q] + q * q) - (f[vk] + vk * vk)) / (2.0 * (q - vk))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        vk = v[k]
        out[q] = (q - vk) ** 2 + f[vk]
    return out


def distance_transform(target: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every target pixel to the background set.

    ``target`` is a boolean H x W map (True = target). Background pixels map
    to 0; target pixels map to the exact minimum Euclidean distance to any
    background pixel. An all-background map returns zeros; a map with no
    background raises :class:`DegenerateMapError`.
    """
    if target.dtype != np.bool_:
        target = target.astype(bool)
    if not target.any():
        return np.zeros(target.shape, dtype=np.float64)
    if target.all():
        raise DegenerateMapError("background set is empty; distances undefined")
    h, w = target.shape

    # Column pass: squared distance to nearest background row within each column.
    col = np.full((h, w), np.inf)
    col[~target] = 0.0
    run = np.full(w, np.inf)
    up = np.empty((h, w))
    for y in range(h):
        run = np.where(col[y] == 0.0, 0.0, run + 1.0)
        up[y] = run
    run = np.full(w, np.inf)
    down = np.empty((h, w))
    for y in range(h - 1, -1, -1):
        run = np.where(col[y] == 0.0, 0.0, run + 1.0)
        down[y] = run
    nearest = np.minimum(up, down)
    with np.errstate(invalid="ignore"):
        colsq = np.where(np.isfinite(nearest), nearest * nearest, np.inf)

    # Row pass: lower envelope over columns.
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        out[y] = _edt_1d_sq(colsq[y])
    dist = np.sqrt(out)
    dist[~target] = 0.0
    return dist


def _isolated_points(target: np.ndarray) -> np.ndarray:
    """Target pixels whose 8-neighborhood contains no other target pixel."""
    h, w = target.shape
    padded = np.pad(target, 1, mode="constant", constant_values=False)
    any_neighbor = np.zeros((h, w), dtype=bool)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dy == 1 and dx == 1:
                continue
            any_neighbor |= padded[dy : dy + h, dx : dx + w]
    return target & ~any_neighbor


def contour_map(
    img: np.ndarray,
    params: ContourStackParams,
    threshold_policy="mean",
    isolated_keep_value: bool = False,
) -> np.ndarray:
    """Full pipeline: conv stack -> binarize -> exact distance transform.

    With ``isolated_keep_value`` the distance of an isolated target pixel
    (no target 8-neighbors) is replaced by its raw edge response instead
    of its distance to the background. Raises
    :class:`DegenerateMapError` on flat maps; callers typically fall back
    to uniform patch scores.
    """
    response = contour_response(img, params)
    target = binarize(response, threshold_policy)
    dist = distance_transform(target)
    if isolated_keep_value:
        iso = _isolated_points(target)
        dist[iso] = response[iso]
    return dist


# ---------------------------------------------------------------------------
# 8-bit PNG conversion helpers
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] float image -> 8-bit, clamp then round."""
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """8-bit image -> [0,1] float64."""
    return raw.astype(np.float64) / 255.0

"""Masked-autoencoder model: patch embedding, MHSA encoder, light decoder.

Only visible patches enter the encoder during pretraining; the decoder fills
hidden slots with a learned mask token plus positional entries and predicts
raw pixel values for them. The pretraining objective is mean squared error
over masked-patch pixels only. At inference every patch is encoded and the
token mean, L2-normalized, is the image feature.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .imagecore import to_patches
from .masking import MaskPlan, num_kept, plan_mask
from .seeding import derive_seed


@dataclass
class MAEConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 2.0
    mask_rate: float = 0.75
    contour_fraction: float = 1.0
    learning_rate: float = 2.5e-4
    weight_decay: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ValueError("decoder_dim must be divisible by decoder_heads")
        if self.embed_dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise ValueError("embed_dim and decoder_dim must be divisible by 4")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if not 0.0 <= self.contour_fraction <= 1.0:
            raise ValueError(
                f"contour_fraction must be in [0, 1], got {self.contour_fraction}"
            )
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @classmethod
    def paper_scale(cls) -> "MAEConfig":
        """224x224 / 16px-patch geometry with the published optimizer settings."""
        return cls(
            image_size=224,
            patch_size=16,
            embed_dim=256,
            depth=6,
            num_heads=8,
            decoder_dim=128,
            decoder_depth=2,
            decoder_heads=8,
            mlp_ratio=4.0,
            mask_rate=0.75,
            learning_rate=2.5e-4,
            weight_decay=0.05,
            batch_size=32,
            epochs=200,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        return cls(**d)


@dataclass
class MAEModel:
    config: MAEConfig
    params: dict            # trainable arrays, dotted names
    pos_enc: np.ndarray     # (K, embed_dim), fixed
    pos_dec: np.ndarray     # (K, decoder_dim), fixed

    def num_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())


def init_model(config: MAEConfig) -> MAEModel:
    rng = np.random.default_rng(derive_seed(config.seed, "init"))
    d, dd = config.embed_dim, config.decoder_dim
    params: dict = {}
    params["embed.W"] = rng.normal(0.0, 0.02, (config.patch_dim, d))
    params["embed.b"] = np.zeros(d)
    nn.init_stack_params(params, "enc", config.depth, d, int(d * config.mlp_ratio), rng)
    params["dec.proj.W"] = rng.normal(0.0, 0.02, (d, dd))
    params["dec.proj.b"] = np.zeros(dd)
    params["mask_token"] = rng.normal(0.0, 0.02, (dd,))
    nn.init_stack_params(params, "dec", config.decoder_depth, dd, int(dd * config.mlp_ratio), rng)
    params["head.W"] = rng.normal(0.0, 0.02, (dd, config.patch_dim))
    params["head.b"] = np.zeros(config.patch_dim)
    pos_enc = nn.sincos_position_table(d, config.grid, config.grid)
    pos_dec = nn.sincos_position_table(dd, config.grid, config.grid)
    return MAEModel(config=config, params=params, pos_enc=pos_enc, pos_dec=pos_dec)


# ---------------------------------------------------------------------------
# Forward / backward pieces
# ---------------------------------------------------------------------------

def _flatten_patches(patches: np.ndarray, patch_dim: int) -> np.ndarray:
    return patches.reshape(patches.shape[0], patches.shape[1], patch_dim)


def embed_patches(model: MAEModel, patches: np.ndarray, positions: np.ndarray):
    """Project patches (B, n, P, P, C) or (B, n, P*P*C) to tokens (B, n, d).

    Each token is the linear patch projection plus the fixed positional
    entry for its grid position.
    """
    cfg = model.config
    x = _flatten_patches(np.asarray(patches, dtype=np.float64), cfg.patch_dim)
    positions = np.asarray(positions)
    if positions.size and (positions.min() < 0 or positions.max() >= cfg.num_patches):
        raise ValueError(
            f"position index out of range [0, {cfg.num_patches}): "
            f"[{positions.min()}, {positions.max()}]"
        )
    proj, cache = nn.linear_forward(x, model.params["embed.W"], model.params["embed.b"])
    return proj + model.pos_enc[positions], cache


def encode(model: MAEModel, tokens: np.ndarray, return_cache: bool = False):
    """Run the MHSA encoder over a token sequence (B, n, d)."""
    if tokens.ndim != 3 or tokens.shape[1] == 0:
        raise ValueError("encoder requires a non-empty (B, n, d) token sequence")
    latents, caches = nn.stack_forward(
        model.params, "enc", model.config.depth, tokens, model.config.num_heads
    )
    if return_cache:
        return latents, caches
    return latents


def attention_maps(stack_caches) -> list:
    """Per-block softmax attention tensors (B, heads, n, n) from an encoder cache."""
    return [c[1][5] for c in stack_caches[:-1]]


def decode(
    model: MAEModel,
    latents: np.ndarray,
    kept_positions: np.ndarray,
    masked_positions: np.ndarray,
    return_cache: bool = False,
):
    """Predict pixel values at masked positions from encoded kept tokens.

    Returns (B, n_masked, P*P*C) predictions. Kept and masked positions
    must be disjoint per row.
    """
    cfg = model.config
    kept_positions = np.asarray(kept_positions)
    masked_positions = np.asarray(masked_positions)
    bsz = latents.shape[0]
    for row in range(bsz):
        if np.intersect1d(kept_positions[row], masked_positions[row]).size:
            raise ValueError(f"kept and masked positions overlap in row {row}")
    z, c_proj = nn.linear_forward(
        latents, model.params["dec.proj.W"], model.params["dec.proj.b"]
    )
    seq = np.tile(model.params["mask_token"], (bsz, cfg.num_patches, 1))
    bidx = np.arange(bsz)[:, None]
    seq[bidx, kept_positions] = z
    seq = seq + model.pos_dec[None, :, :]
    out, caches = nn.stack_forward(
        model.params, "dec", cfg.decoder_depth, seq, cfg.decoder_heads
    )
    pred_all, c_head = nn.linear_forward(out, model.params["head.W"], model.params["head.b"])
    preds = pred_all[bidx, masked_positions] if masked_positions.size else np.zeros(
        (bsz, 0, cfg.patch_dim)
    )
    if return_cache:
        return preds, (c_proj, caches, c_head, kept_positions, masked_positions, bsz)
    return preds


def _decode_backward(model: MAEModel, cache, dpreds, grads):
    cfg = model.config
    c_proj, caches, c_head, kept_positions, masked_positions, bsz = cache
    bidx = np.arange(bsz)[:, None]
    dpred_all = np.zeros((bsz, cfg.num_patches, cfg.patch_dim))
    if masked_positions.size:
        dpred_all[bidx, masked_positions] = dpreds
    dout = nn.linear_backward(dpred_all, c_head, grads, "head.W", "head.b")
    dseq = nn.stack_backward(dout, caches, model.params, "dec", cfg.decoder_depth, grads)
    kept_mask = np.zeros((bsz, cfg.num_patches), dtype=bool)
    kept_mask[bidx, kept_positions] = True
    grads["mask_token"] = grads.get("mask_token", 0.0) + dseq[~kept_mask].sum(axis=0)
    dz = dseq[bidx, kept_positions]
    return nn.linear_backward(dz, c_proj, grads, "dec.proj.W", "dec.proj.b")


def reconstruction_loss(preds: np.ndarray, image: np.ndarray, plan: MaskPlan) -> float:
    """MSE over masked-patch pixels only; kept pixels contribute nothing."""
    cfg_pdim = preds.shape[-1] if preds.ndim == 2 else None
    n_masked = plan.masked.shape[0]
    if preds.shape[0] != n_masked:
        raise ValueError(
            f"predictions cover {preds.shape[0]} patches, plan masks {n_masked}"
        )
    if n_masked == 0:
        return 0.0
    p = plan_patch_size(plan, image)
    targets = to_patches(image, p).patches[plan.masked].reshape(n_masked, -1)
    preds = preds.reshape(n_masked, -1)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    diff = preds - targets
    return float(np.mean(diff * diff))


def plan_patch_size(plan: MaskPlan, image: np.ndarray) -> int:
    """Patch size implied by a plan on a given image (K = (H/P)(W/P))."""
    h, w = image.shape[:2]
    k = plan.num_patches
    p2 = (h * w) / k
    p = int(round(np.sqrt(p2)))
    if p * p * k != h * w or h % p or w % p:
        raise ValueError(f"plan with {k} patches does not tile a {h}x{w} image")
    return p


# ---------------------------------------------------------------------------
# Batched pretraining step
# ---------------------------------------------------------------------------

def _pretrain_forward(model: MAEModel, flat_patches, kept_pos, masked_pos):
    """Loss and cache for one batch.

    flat_patches: (B, K, patch_dim); kept_pos: (B, m); masked_pos: (B, K-m).
    """
    bidx = np.arange(flat_patches.shape[0])[:, None]
    x_kept = flat_patches[bidx, kept_pos]
    tokens, c_embed = embed_patches(model, x_kept, kept_pos)
    latents, c_enc = encode(model, tokens, return_cache=True)
    preds, c_dec = decode(model, latents, kept_pos, masked_pos, return_cache=True)
    targets = flat_patches[bidx, masked_pos]
    diff = preds - targets
    loss = float(np.mean(diff * diff)) if diff.size else 0.0
    return loss, (c_embed, c_enc, c_dec, diff)


def _pretrain_backward(model: MAEModel, cache) -> dict:
    c_embed, c_enc, c_dec, diff = cache
    grads: dict = {}
    dpreds = (2.0 / diff.size) * diff if diff.size else np.zeros_like(diff)
    dlatents = _decode_backward(model, c_dec, dpreds, grads)
    dtokens = nn.stack_backward(
        dlatents, c_enc, model.params, "enc", model.config.depth, grads
    )
    nn.linear_backward(dtokens, c_embed, grads, "embed.W", "embed.b")
    return grads


def pretrain(
    images: np.ndarray,
    scores: np.ndarray,
    config: MAEConfig,
    model: MAEModel | None = None,
    optimizer: nn.AdamW | None = None,
    start_epoch: int = 0,
    on_epoch=None,
):
    """Train the autoencoder on (N, H, W, C) images with per-image patch scores.

    ``scores`` has shape (N, K). With contour_fraction == 1, mask plans are
    fixed per image; otherwise the random remainder is resampled each epoch
    from a seed derived from (config.seed, epoch, image index). Returns
    (model, per-epoch mean losses, optimizer). ``on_epoch(epoch, loss)`` is
    called after every epoch.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("pretraining requires a non-empty dataset")
    if model is None:
        model = init_model(config)
    if optimizer is None:
        optimizer = nn.AdamW(config.learning_rate, config.weight_decay)
    cfg = model.config
    flat = np.stack(
        [
            to_patches(images[i], cfg.patch_size).patches.reshape(cfg.num_patches, -1)
            for i in range(n)
        ]
    )

    def plans_for_epoch(epoch: int):
        kept = np.empty((n, num_kept(cfg.num_patches, cfg.mask_rate)), dtype=np.int64)
        masked = np.empty((n, cfg.num_patches - kept.shape[1]), dtype=np.int64)
        for i in range(n):
            if cfg.contour_fraction >= 1.0:
                seed = derive_seed(config.seed, "mask", i)
            else:
                seed = derive_seed(config.seed, "mask", epoch, i)
            plan = plan_mask(scores[i], cfg.mask_rate, seed, cfg.contour_fraction)
            kept[i] = plan.kept
            masked[i] = plan.masked
        return kept, masked

    static_plans = plans_for_epoch(0) if cfg.contour_fraction >= 1.0 else None
    losses = []
    for epoch in range(start_epoch, config.epochs):
        kept_all, masked_all = (
            static_plans if static_plans is not None else plans_for_epoch(epoch)
        )
        order = np.random.default_rng(
            derive_seed(config.seed, "shuffle", epoch)
        ).permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            loss, cache = _pretrain_forward(
                model, flat[idx], kept_all[idx], masked_all[idx]
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite pretraining loss {loss} at epoch {epoch}, batch start {s}"
                )
            grads = _pretrain_backward(model, cache)
            optimizer.step(model.params, grads)
            total += loss * idx.shape[0]
        epoch_loss = total / n
        losses.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
    return model, losses, optimizer


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def forward_features(model: MAEModel, images: np.ndarray, return_cache: bool = False):
    """Unit-norm features for (B, H, W, C) images: encode all patches, mean-pool."""
    cfg = model.config
    flat = np.stack(
        [
            to_patches(images[i], cfg.patch_size).patches.reshape(cfg.num_patches, -1)
            for i in range(images.shape[0])
        ]
    )
    positions = np.tile(np.arange(cfg.num_patches), (images.shape[0], 1))
    tokens, c_embed = embed_patches(model, flat, positions)
    latents, c_enc = encode(model, tokens, return_cache=True)
    pooled = latents.mean(axis=1)
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    feats = pooled / norms
    if return_cache:
        return feats, (c_embed, c_enc, feats, norms, cfg.num_patches)
    return feats


def features_backward(model: MAEModel, cache, dfeats) -> dict:
    """Gradients of a scalar loss through forward_features."""
    c_embed, c_enc, feats, norms, k = cache
    grads: dict = {}
    dpooled = (dfeats - feats * np.sum(feats * dfeats, axis=1, keepdims=True)) / norms
    dlat = np.repeat(dpooled[:, None, :], k, axis=1) / k
    dtokens = nn.stack_backward(dlat, c_enc, model.params, "enc", model.config.depth, grads)
    nn.linear_backward(dtokens, c_embed, grads, "embed.W", "embed.b")
    return grads


def extract_feature(model: MAEModel, image: np.ndarray) -> np.ndarray:
    """Feature vector for one H x W x C image."""
    return forward_features(model, image[None])[0]


def extract_features(model: MAEModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = np.empty((images.shape[0], model.config.embed_dim))
    for s in range(0, images.shape[0], batch_size):
        out[s : s + batch_size] = forward_features(model, images[s : s + batch_size])
    return out

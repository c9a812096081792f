"""The four networks: video encoder F, classifier head G, domain head D and
the U-Net mask generator M, plus mask normalization and application."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return np.ascontiguousarray(out.astype(dtype))


class Module:
    """Minimal parameter container; children are discovered from attributes."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_params(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{name}.{i}.")

    def params(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_params():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = Tensor(trunc_normal(rng, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    """3x3/1x1 convolution; fan-in scaled init so stacked small-channel convs
    keep activations at input scale (0.02 would shrink them to nothing)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, pad: int = 0, zero_init: bool = False):
        if zero_init:
            w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
        else:
            w = trunc_normal(rng, (out_ch, in_ch, k, k), std=float(np.sqrt(2.0 / (in_ch * k * k))))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.w, stride=1, pad=self.pad)
        return ad.add(out, ad.reshape(self.b, (1, -1, 1, 1)))


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    """Geometry of the tubelet-token transformer encoder."""

    clip_frames: int = 16
    channels: int = 3
    spatial: int = 32
    tubelet_frames: int = 2
    tubelet_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    class_token: bool = True

    def __post_init__(self) -> None:
        if self.clip_frames % self.tubelet_frames:
            raise ConfigError(f"clip_frames {self.clip_frames} not divisible by tubelet_frames {self.tubelet_frames}")
        if self.spatial % self.tubelet_size:
            raise ConfigError(f"spatial {self.spatial} not divisible by tubelet_size {self.tubelet_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.clip_frames // self.tubelet_frames) * (self.spatial // self.tubelet_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + (1 if self.class_token else 0)


@dataclass
class UNetConfig:
    """Geometry of the per-frame mask-generator U-Net (one logit per pixel)."""

    depth: int = 4
    base_channels: int = 8
    in_channels: int = 3

    def validate_spatial(self, h: int, w: int) -> None:
        step = 1 << self.depth
        if h % step or w % step:
            raise ConfigError(f"input spatial extents {h}x{w} not divisible by 2^depth = {step}")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class TransformerBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.scale = self.head_dim**-0.5
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, rng)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, rng)

    def _attend(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x)
        heads, hd = self.heads, self.head_dim

        def split(start: int) -> Tensor:
            part = ad.narrow(qkv, 2, start, d)
            return ad.transpose(ad.reshape(part, (b, n, heads, hd)), (0, 2, 1, 3))

        q, k, v = split(0), split(d), split(2 * d)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), self.scale)
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return self.proj(ctx)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self._attend(self.ln1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))


class VideoEncoder(Module):
    """Tubelet patch embedding, class token, learned positions, pre-norm blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        in_dim = cfg.tubelet_frames * cfg.channels * cfg.tubelet_size**2
        self.patch = Linear(in_dim, cfg.embed_dim, rng)
        self.cls = Tensor(trunc_normal(rng, (1, 1, cfg.embed_dim)), requires_grad=True)
        self.pos = Tensor(trunc_normal(rng, (1, cfg.n_tokens, cfg.embed_dim)), requires_grad=True)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.embed_dim)

    def _tokens(self, clip: Tensor) -> Tensor:
        cfg = self.cfg
        b, t, c, h, w = clip.shape
        if (t, c, h, w) != (cfg.clip_frames, cfg.channels, cfg.spatial, cfg.spatial):
            raise ConfigError(
                f"clip extents {clip.shape} do not match encoder config "
                f"({cfg.clip_frames}, {cfg.channels}, {cfg.spatial}, {cfg.spatial})"
            )
        tt, ps = cfg.tubelet_frames, cfg.tubelet_size
        nt, nh, nw = t // tt, h // ps, w // ps
        # center [0, 1] pixels to [-1, 1] for conditioning; affine, so the
        # photometric domain gap passes through untouched
        x = ad.mul(ad.add(clip, -0.5), 2.0)
        x = ad.reshape(x, (b, nt, tt, c, nh, ps, nw, ps))
        x = ad.transpose(x, (0, 1, 4, 6, 2, 3, 5, 7))
        x = ad.reshape(x, (b, nt * nh * nw, tt * c * ps * ps))
        return self.patch(x)

    def __call__(self, clip: Tensor) -> Tensor:
        b = clip.shape[0]
        x = self._tokens(clip)
        if self.cfg.class_token:
            cls = ad.broadcast_to(self.cls, (b, 1, self.cfg.embed_dim))
            x = ad.concat([cls, x], axis=1)
        x = ad.add(x, self.pos)
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        lead = ad.narrow(x, 1, 0, 1)
        return ad.reshape(lead, (b, self.cfg.embed_dim))


class Classifier(Module):
    """Single affine map from features to K class logits."""

    def __init__(self, embed_dim: int, k_classes: int, rng: np.random.Generator):
        self.k_classes = k_classes
        self.fc = Linear(embed_dim, k_classes, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(features)


class DomainHead(Module):
    """Two-layer MLP ending in one logit; probability side is sigmoid-clamped."""

    PROB_EPS = 1e-7

    def __init__(self, embed_dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(embed_dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def logits(self, features: Tensor) -> Tensor:
        z = self.fc2(ad.gelu(self.fc1(features)))
        return ad.reshape(z, (z.shape[0],))

    def __call__(self, features: Tensor) -> Tensor:
        """Probability that a feature came from the source domain, in (0, 1)."""
        return ad.clamp(ad.sigmoid(self.logits(features)), self.PROB_EPS, 1.0 - self.PROB_EPS)


class DoubleConv(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.c1 = Conv2d(in_ch, out_ch, 3, rng, pad=1)
        self.c2 = Conv2d(out_ch, out_ch, 3, rng, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.c2(ad.relu(self.c1(x))))


@dataclass
class MaskField:
    """Per-(frame, h, w) soft mask in [0, 1], broadcast over channels when applied.

    ``values`` has shape (batch, frames, h, w). Before scaling by
    keep_ratio * P the underlying softmax scores sum to one over all
    P = frames*h*w positions of each clip.
    """

    values: Tensor
    keep_ratio: float


class MaskGenerator(Module):
    """Per-frame U-Net emitting one logit per (frame, h, w) location.

    Frames are folded into the batch axis; the head 1x1 convolution starts at
    zero so a freshly initialized generator emits uniform logits and therefore
    a constant mask equal to the keep ratio.
    """

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = [cfg.base_channels * (1 << i) for i in range(cfg.depth + 1)]
        self.enc = []
        in_ch = cfg.in_channels
        for ch in chans[:-1]:
            self.enc.append(DoubleConv(in_ch, ch, rng))
            in_ch = ch
        self.mid = DoubleConv(chans[-2], chans[-1], rng)
        self.dec = []
        up_ch = chans[-1]
        for ch in reversed(chans[:-1]):
            self.dec.append(DoubleConv(up_ch + ch, ch, rng))
            up_ch = ch
        self.head = Conv2d(chans[0], 1, 1, rng, zero_init=True)

    def logits(self, frames: Tensor) -> Tensor:
        """(N, C, H, W) frames to (N, 1, H, W) mask logits."""
        self.cfg.validate_spatial(frames.shape[2], frames.shape[3])
        skips = []
        x = frames
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = ad.maxpool2d(x)
        x = self.mid(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = ad.upsample_nearest2d(x, 2)
            x = block(ad.concat([x, skip], axis=1))
        return self.head(x)


def normalize_mask_logits(flat_logits: Tensor, rho: float) -> Tensor:
    """(B, P) position logits to mask values: softmax over all P positions per
    clip, scaled by rho * P and clamped to [0, 1]. Uniform logits give exactly
    rho everywhere; the pre-scaling scores sum to one."""
    p = flat_logits.shape[1]
    scores = ad.softmax(flat_logits, axis=1)
    return ad.clamp(ad.mul(scores, float(rho) * p), 0.0, 1.0)


def generate_mask(clip: Tensor, generator: MaskGenerator, rho: float) -> MaskField:
    """Soft mask for a clip batch: one logit per (frame, h, w) location,
    normalized over the whole clip and scaled to the keep ratio."""
    b, t, c, h, w = clip.shape
    frames = ad.reshape(clip, (b * t, c, h, w))
    logits = generator.logits(frames)
    flat = ad.reshape(logits, (b, t * h * w))
    scaled = normalize_mask_logits(flat, rho)
    return MaskField(values=ad.reshape(scaled, (b, t, h, w)), keep_ratio=float(rho))


def apply_mask(clip: Tensor, mask: MaskField) -> Tensor:
    """Hadamard product of clip and mask, mask broadcast across channels."""
    values = mask.values if isinstance(mask, MaskField) else mask
    b, t, c, h, w = clip.shape
    if values.shape != (b, t, h, w):
        raise ShapeError(f"mask extents {values.shape} do not match clip {clip.shape}")
    m = ad.reshape(values, (b, t, 1, h, w))
    return ad.mul(clip, m)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class OptimizerSettings:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    # from-scratch training needs a discriminator that keeps up with the
    # encoder; None inherits the base lr
    d_lr: float | None = 1e-3
    m_lr: float | None = None


@dataclass
class ModelBundle:
    """All four networks plus one AdamW per network."""

    encoder: VideoEncoder
    classifier: Classifier
    domain_head: DomainHead
    mask_generator: MaskGenerator
    optimizers: dict  # name in {"f", "g", "d", "m"} -> AdamW
    encoder_cfg: EncoderConfig
    unet_cfg: UNetConfig
    k_classes: int
    d_hidden: int
    opt_settings: OptimizerSettings = field(default_factory=OptimizerSettings)

    def models(self) -> dict[str, Module]:
        return {
            "f": self.encoder,
            "g": self.classifier,
            "d": self.domain_head,
            "m": self.mask_generator,
        }

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for tag, model in self.models().items():
            for name, p in model.named_params():
                yield f"{tag}.{name}", p


def build_bundle(
    encoder_cfg: EncoderConfig,
    unet_cfg: UNetConfig,
    k_classes: int,
    d_hidden: int,
    opt: OptimizerSettings,
    seed: int,
) -> ModelBundle:
    """Deterministically initialize all networks and their optimizers."""
    from .optim import AdamW

    seeds = np.random.SeedSequence(seed).spawn(4)
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    encoder = VideoEncoder(encoder_cfg, rngs[0])
    classifier = Classifier(encoder_cfg.embed_dim, k_classes, rngs[1])
    domain_head = DomainHead(encoder_cfg.embed_dim, d_hidden, rngs[2])
    mask_generator = MaskGenerator(unet_cfg, rngs[3])
    kwargs = dict(betas=(opt.beta1, opt.beta2), eps=opt.eps, weight_decay=opt.weight_decay)
    optimizers = {
        "f": AdamW(encoder.params(), lr=opt.lr, **kwargs),
        "g": AdamW(classifier.params(), lr=opt.lr, **kwargs),
        "d": AdamW(domain_head.params(), lr=opt.d_lr if opt.d_lr is not None else opt.lr, **kwargs),
        "m": AdamW(mask_generator.params(), lr=opt.m_lr if opt.m_lr is not None else opt.lr, **kwargs),
    }
    return ModelBundle(
        encoder=encoder,
        classifier=classifier,
        domain_head=domain_head,
        mask_generator=mask_generator,
        optimizers=optimizers,
        encoder_cfg=encoder_cfg,
        unet_cfg=unet_cfg,
        k_classes=k_classes,
        d_hidden=d_hidden,
        opt_settings=opt,
    )

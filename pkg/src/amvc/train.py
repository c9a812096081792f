"""Two-stage training schedule, evaluation and metrics.

Stage 1 alternates an encoder phase (supervised loss plus masked domain loss
with gradient reversal; mask generator frozen) with a generator phase (mask
generator alone minimizes the masked domain loss, making masked domains easier
to tell apart). Stage 2 freezes the generator and the domain head and
fine-tunes encoder and classifier with the masked consistency loss against
full-view pseudo-labels. A source-only baseline trainer is included for
adaptation experiments.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ClipStore, DomainBatch, Manifest, batch_iterator
from .errors import ConfigError, DivergenceError, NoConfidentSamples
from .models import (
    EncoderConfig,
    MaskField,
    ModelBundle,
    OptimizerSettings,
    UNetConfig,
    build_bundle,
    generate_mask,
)
from .objectives import (
    masked_consistency_loss,
    masked_domain_loss,
    pseudo_label,
    supervised_loss,
)
from .optim import AdamW


@dataclass
class TrainConfig:
    """Everything a training run needs; defaults follow the method's recipe."""

    stage: int = 1
    lr: float = 1e-4
    d_lr: float | None = 1e-3
    m_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 8
    grl_lambda: float = 1.0
    grl_ramp_steps: int = 0  # 0 = constant lambda
    keep_ratio: float = 0.5
    encoder_steps: int = 100
    generator_steps: int = 20
    total_steps: int = 2000
    seed: int = 0
    tau: float = 0.0
    k_classes: int = 8
    d_hidden: int = 64
    # encoder geometry
    clip_frames: int = 16
    channels: int = 3
    spatial: int = 32
    tubelet_frames: int = 2
    tubelet_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    # mask generator geometry
    unet_depth: int = 4
    unet_base_channels: int = 8
    # outputs
    metrics_path: str | None = None
    checkpoint_path: str | None = None
    # switches
    add_supervised: bool = False  # stage 2: also apply L_S on source batches
    debug_ones_masks: bool = False  # stage 2: replace generated masks with ones

    def __post_init__(self) -> None:
        for name in ("lr", "batch_size", "keep_ratio", "encoder_steps", "generator_steps", "total_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.grl_lambda < 0 or self.tau < 0:
            raise ConfigError("grl_lambda and tau must be non-negative")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            clip_frames=self.clip_frames,
            channels=self.channels,
            spatial=self.spatial,
            tubelet_frames=self.tubelet_frames,
            tubelet_size=self.tubelet_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
        )

    def unet_config(self) -> UNetConfig:
        return UNetConfig(depth=self.unet_depth, base_channels=self.unet_base_channels, in_channels=self.channels)

    def opt_settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            d_lr=self.d_lr,
            m_lr=self.m_lr,
        )


def bundle_from_config(config: TrainConfig, seed: int | None = None) -> ModelBundle:
    return build_bundle(
        config.encoder_config(),
        config.unet_config(),
        config.k_classes,
        config.d_hidden,
        config.opt_settings(),
        seed=config.seed if seed is None else seed,
    )


def grl_lambda_at(config: TrainConfig, step: int) -> float:
    """Constant lambda, or a sigmoid ramp over grl_ramp_steps when configured."""
    if config.grl_ramp_steps <= 0:
        return config.grl_lambda
    p = min(1.0, step / config.grl_ramp_steps)
    return config.grl_lambda * (2.0 / (1.0 + np.exp(-10.0 * p)) - 1.0)


def phase_at(step: int, encoder_steps: int, generator_steps: int) -> str:
    """Phase of 1-based global ``step`` under the alternation schedule."""
    return "encoder" if (step - 1) % (encoder_steps + generator_steps) < encoder_steps else "generator"


@dataclass
class RunState:
    """Mutable cursor over a run: step, phase and running loss means."""

    step: int = 0
    phase: str = "encoder"
    loss_sums: dict = field(default_factory=dict)
    loss_counts: dict = field(default_factory=dict)

    def update(self, step: int, phase: str, losses: dict) -> None:
        self.step = step
        self.phase = phase
        for key, val in losses.items():
            if val is None:
                continue
            self.loss_sums[key] = self.loss_sums.get(key, 0.0) + val
            self.loss_counts[key] = self.loss_counts.get(key, 0) + 1

    def means(self) -> dict:
        return {k: self.loss_sums[k] / self.loss_counts[k] for k in self.loss_sums}


class MetricsWriter:
    """Append-only JSONL metrics file, one object per training step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, row: dict) -> None:
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0])


def _endless_batches(manifest: Manifest, batch_size: int, seed: int, store: ClipStore, shuffle: bool = True):
    epoch = 0
    while True:
        yield from batch_iterator(
            manifest, batch_size, _epoch_seed(seed, epoch), shuffle=shuffle, split="train", store=store
        )
        epoch += 1


def _check_finite(losses: dict, phase: str, step: int, batch_index: int) -> None:
    for name, val in losses.items():
        if val is not None and not np.isfinite(val):
            raise DivergenceError(
                f"{name} became non-finite ({val}) at step {step}, phase {phase}, batch {batch_index}",
                phase=phase,
                step=step,
                batch_index=batch_index,
            )


def _ones_mask(clips: Tensor, rho: float) -> MaskField:
    b, t, _, h, w = clips.shape
    return MaskField(Tensor(np.ones((b, t, h, w), dtype=np.float32)), rho)


def _pair_inputs(batch: DomainBatch) -> tuple[Tensor, np.ndarray]:
    """Stack source before target and return matching domain indicators."""
    clips = Tensor(np.concatenate([batch.source.data, batch.target.data]))
    indicators = np.concatenate(
        [np.ones(batch.source.shape[0]), np.zeros(batch.target.shape[0])]
    )
    return clips, indicators


def _encoder_phase_step(
    bundle: ModelBundle, batch: DomainBatch, config: TrainConfig, lam: float, step: int = 0
) -> dict:
    clips, indicators = _pair_inputs(batch)
    with no_grad():
        masks = generate_mask(clips, bundle.mask_generator, config.keep_ratio)
    l_dm = masked_domain_loss(
        clips, masks, indicators, bundle.encoder, bundle.domain_head, grl_lambda=lam, reverse=True
    )
    logits = bundle.classifier(bundle.encoder(batch.source))
    l_s = supervised_loss(logits, batch.source_labels)
    losses = {"l_s": l_s.item(), "l_d_masked": l_dm.item()}
    _check_finite(losses, "encoder", step, batch.batch_index)
    backward(ad.add(l_s, l_dm))
    for tag in ("f", "g", "d"):
        bundle.optimizers[tag].step()
        bundle.optimizers[tag].zero_grad()
    return losses


def _generator_phase_step(bundle: ModelBundle, batch: DomainBatch, config: TrainConfig, step: int = 0) -> dict:
    clips, indicators = _pair_inputs(batch)
    for tag in ("f", "g", "d"):
        bundle.models()[tag].set_requires_grad(False)
    try:
        masks = generate_mask(clips, bundle.mask_generator, config.keep_ratio)
        l_dm = masked_domain_loss(
            clips, masks, indicators, bundle.encoder, bundle.domain_head, reverse=False
        )
        losses = {"l_d_masked": l_dm.item()}
        _check_finite(losses, "generator", step, batch.batch_index)
        backward(l_dm)
        bundle.optimizers["m"].step()
        bundle.optimizers["m"].zero_grad()
    finally:
        for tag in ("f", "g", "d"):
            bundle.models()[tag].set_requires_grad(True)
    return losses


def stage1_train(
    config: TrainConfig,
    source_manifest: Manifest,
    target_manifest: Manifest,
    bundle: ModelBundle | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Alternating adversarial optimization of encoder/heads vs mask generator."""
    merged = Manifest.merge(source_manifest, target_manifest)
    store = ClipStore(expected_extents=merged.meta.get("extents"))
    if bundle is None:
        bundle = bundle_from_config(config)
    writer = MetricsWriter(config.metrics_path) if config.metrics_path else None
    state = RunState()
    metrics: list[dict] = []
    batches = _endless_batches(merged, config.batch_size, config.seed, store)
    try:
        for step in range(1, config.total_steps + 1):
            batch = next(batches)
            phase = phase_at(step, config.encoder_steps, config.generator_steps)
            t0 = time.perf_counter()
            if phase == "encoder":
                lam = grl_lambda_at(config, step)
                losses = _encoder_phase_step(bundle, batch, config, lam, step=step)
            else:
                lam = None
                losses = _generator_phase_step(bundle, batch, config, step=step)
            row = {
                "step": step,
                "phase": phase,
                "l_s": losses.get("l_s"),
                "l_d_masked": losses.get("l_d_masked"),
                "l_c_masked": None,
                "lr": config.lr,
                "lambda": lam,
                "pseudo_label_keep_fraction": None,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            state.update(step, phase, losses)
            metrics.append(row)
            if writer:
                writer.write(row)
    finally:
        if writer:
            writer.close()
    if config.checkpoint_path:
        save_checkpoint(bundle, config.checkpoint_path)
    return bundle, metrics


def train_source_only(
    config: TrainConfig,
    source_manifest: Manifest,
    bundle: ModelBundle | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Supervised-only baseline: L_S on full source views, no adversarial parts."""
    store = ClipStore(expected_extents=source_manifest.meta.get("extents"))
    if bundle is None:
        bundle = bundle_from_config(config)
    writer = MetricsWriter(config.metrics_path) if config.metrics_path else None
    metrics: list[dict] = []
    batches = _endless_batches(source_manifest, config.batch_size, config.seed, store)
    try:
        for step in range(1, config.total_steps + 1):
            batch = next(batches)
            t0 = time.perf_counter()
            logits = bundle.classifier(bundle.encoder(batch.source))
            l_s = supervised_loss(logits, batch.source_labels)
            losses = {"l_s": l_s.item()}
            _check_finite(losses, "encoder", step, batch.batch_index)
            backward(l_s)
            for tag in ("f", "g"):
                bundle.optimizers[tag].step()
                bundle.optimizers[tag].zero_grad()
            row = {
                "step": step,
                "phase": "encoder",
                "l_s": losses["l_s"],
                "l_d_masked": None,
                "l_c_masked": None,
                "lr": config.lr,
                "lambda": None,
                "pseudo_label_keep_fraction": None,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            metrics.append(row)
            if writer:
                writer.write(row)
    finally:
        if writer:
            writer.close()
    if config.checkpoint_path:
        save_checkpoint(bundle, config.checkpoint_path)
    return bundle, metrics


def stage2_train(
    config: TrainConfig,
    target_manifest: Manifest,
    stage1_checkpoint: str | Path | None = None,
    bundle: ModelBundle | None = None,
    source_manifest: Manifest | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Masked consistency fine-tuning of encoder and classifier.

    The mask generator and the domain head stay frozen for the whole stage;
    encoder/classifier optimizer state restarts fresh. Steps whose
    pseudo-labels are all filtered by tau are skipped and logged with a zero
    keep fraction.
    """
    if bundle is None:
        if stage1_checkpoint is None:
            raise ConfigError("stage 2 requires a stage-1 checkpoint (or an explicit bundle)")
        bundle = load_checkpoint(stage1_checkpoint)
    opt = config.opt_settings()
    kwargs = dict(lr=opt.lr, betas=(opt.beta1, opt.beta2), eps=opt.eps, weight_decay=opt.weight_decay)
    bundle.optimizers["f"] = AdamW(bundle.encoder.params(), **kwargs)
    bundle.optimizers["g"] = AdamW(bundle.classifier.params(), **kwargs)

    manifest = target_manifest
    if config.add_supervised and source_manifest is not None:
        manifest = Manifest.merge(source_manifest, target_manifest)
    store = ClipStore(expected_extents=manifest.meta.get("extents"))
    writer = MetricsWriter(config.metrics_path) if config.metrics_path else None
    metrics: list[dict] = []
    bundle.mask_generator.set_requires_grad(False)
    bundle.domain_head.set_requires_grad(False)
    batches = _endless_batches(manifest, config.batch_size, config.seed, store)
    try:
        for step in range(1, config.total_steps + 1):
            batch = next(batches)
            t0 = time.perf_counter()
            clips = batch.target
            with no_grad():
                pseudo = pseudo_label(bundle.classifier(bundle.encoder(clips)), origin_step=step)
                if config.debug_ones_masks:
                    masks = _ones_mask(clips, 1.0)
                else:
                    masks = generate_mask(clips, bundle.mask_generator, config.keep_ratio)
            l_s_val = None
            try:
                l_c, kept = masked_consistency_loss(
                    clips, masks, bundle.encoder, bundle.classifier, tau=config.tau, pseudo=pseudo
                )
                l_c_val = l_c.item()
                loss = l_c
                if config.add_supervised and batch.source is not None:
                    l_s = supervised_loss(bundle.classifier(bundle.encoder(batch.source)), batch.source_labels)
                    l_s_val = l_s.item()
                    loss = ad.add(l_c, l_s)
                _check_finite({"l_c_masked": l_c_val, "l_s": l_s_val}, "consistency", step, batch.batch_index)
                backward(loss)
                for tag in ("f", "g"):
                    bundle.optimizers[tag].step()
                    bundle.optimizers[tag].zero_grad()
            except NoConfidentSamples:
                ad.reset_tape()
                l_c_val, kept = None, 0.0
            row = {
                "step": step,
                "phase": "consistency",
                "l_s": l_s_val,
                "l_d_masked": None,
                "l_c_masked": l_c_val,
                "lr": config.lr,
                "lambda": None,
                "pseudo_label_keep_fraction": kept,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            metrics.append(row)
            if writer:
                writer.write(row)
    finally:
        if writer:
            writer.close()
        bundle.mask_generator.set_requires_grad(True)
        bundle.domain_head.set_requires_grad(True)
    if config.checkpoint_path:
        save_checkpoint(bundle, config.checkpoint_path)
    return bundle, metrics


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    per_class: dict
    n: int
    domain_probe_accuracy: float | None = None


def _iter_chunks(records, size):
    for lo in range(0, len(records), size):
        yield records[lo : lo + size]


def extract_features(
    bundle: ModelBundle,
    manifest: Manifest,
    split: str = "test",
    batch_size: int = 16,
    store: ClipStore | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen-encoder features for every record in the split.

    Returns (features, domain indicators with 1 = source, labels).
    """
    recs = manifest.select(split=split)
    if not recs:
        raise ConfigError(f"manifest has no records in split {split!r}")
    if store is None:
        store = ClipStore(expected_extents=manifest.meta.get("extents"))
    feats, doms, labels = [], [], []
    with no_grad():
        for chunk in _iter_chunks(recs, batch_size):
            clips = Tensor(np.stack([store.get(manifest.abs_path(r)) for r in chunk]))
            feats.append(bundle.encoder(clips).data)
            doms.extend(1.0 if r.domain == "source" else 0.0 for r in chunk)
            labels.extend(r.label for r in chunk)
    return np.concatenate(feats), np.asarray(doms), np.asarray(labels, dtype=np.int64)


def domain_probe_accuracy(
    features: np.ndarray,
    domains: np.ndarray,
    seed: int = 0,
    train_fraction: float = 0.6,
    iters: int = 400,
    lr: float = 0.05,
) -> float:
    """Fit a fresh linear logistic probe on frozen features; held-out accuracy.

    Measures how much domain identity is still readable from the encoder's
    representation. Deterministic given the seed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    n = features.shape[0]
    order = rng.permutation(n)
    n_train = max(1, int(round(train_fraction * n)))
    tr, te = order[:n_train], order[n_train:]
    if te.size == 0:
        raise ConfigError("domain probe needs at least one held-out sample")
    x = features.astype(np.float64)
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-8
    x = (x - mu) / sd
    y = domains.astype(np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    mb = vb = 0.0
    for t in range(1, iters + 1):
        z = x[tr] @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))
        err = p - y[tr]
        gw = x[tr].T @ err / tr.size + 1e-3 * w
        gb = float(err.mean())
        m = 0.9 * m + 0.1 * gw
        v = 0.999 * v + 0.001 * gw * gw
        mb = 0.9 * mb + 0.1 * gb
        vb = 0.999 * vb + 0.001 * gb * gb
        mh, vh = m / (1 - 0.9**t), v / (1 - 0.999**t)
        mbh, vbh = mb / (1 - 0.9**t), vb / (1 - 0.999**t)
        w -= lr * mh / (np.sqrt(vh) + 1e-8)
        b -= lr * mbh / (np.sqrt(vbh) + 1e-8)
    pred = (x[te] @ w + b) > 0
    return float((pred == (y[te] > 0.5)).mean())


def evaluate(
    bundle: ModelBundle,
    manifest: Manifest,
    split: str = "test",
    batch_size: int = 16,
    with_domain_probe: bool = False,
    probe_seed: int = 0,
) -> EvalReport:
    """Top-1 accuracy of classifier(encoder(x)) on full clips, plus per-class
    breakdown and, optionally, a fresh linear domain probe on the features."""
    recs = manifest.select(split=split)
    if not recs:
        raise ConfigError(f"manifest has no records in split {split!r}")
    store = ClipStore(expected_extents=manifest.meta.get("extents"))
    correct = 0
    class_total: dict[int, int] = {}
    class_correct: dict[int, int] = {}
    feats, doms = [], []
    with no_grad():
        for chunk in _iter_chunks(recs, batch_size):
            clips = Tensor(np.stack([store.get(manifest.abs_path(r)) for r in chunk]))
            f = bundle.encoder(clips)
            preds = ad.argmax(bundle.classifier(f), axis=1)
            for r, pred in zip(chunk, preds):
                class_total[r.label] = class_total.get(r.label, 0) + 1
                hit = int(pred) == r.label
                correct += hit
                class_correct[r.label] = class_correct.get(r.label, 0) + hit
            if with_domain_probe:
                feats.append(f.data)
                doms.extend(1.0 if r.domain == "source" else 0.0 for r in chunk)
    probe = None
    if with_domain_probe:
        d = np.asarray(doms)
        if 0.0 < d.mean() < 1.0:
            probe = domain_probe_accuracy(np.concatenate(feats), d, seed=probe_seed)
    per_class = {k: class_correct.get(k, 0) / class_total[k] for k in sorted(class_total)}
    return EvalReport(accuracy=correct / len(recs), per_class=per_class, n=len(recs), domain_probe_accuracy=probe)

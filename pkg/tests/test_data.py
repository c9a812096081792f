"""Synthetic benchmark tests: rendering, formats, manifests, batching, and the
two dataset-level guarantees (real domain gap, learnable classes)."""

import numpy as np
import pytest

from amvc import autodiff as ad
from amvc.autodiff import Tensor, backward
from amvc.data import (
    ClipStore,
    ClassSpec,
    DomainSpec,
    Manifest,
    batch_iterator,
    default_classes,
    generate_dataset,
    load_clip,
    render_clip,
    write_clip,
)
from amvc.errors import ChecksumError, ConfigError, DataFormatError, MagicError, TruncatedError, VersionError
from amvc.models import Linear
from amvc.optim import AdamW
from amvc.train import domain_probe_accuracy


class TestDomainSpec:
    def test_gamma_zero_makes_domains_identical(self):
        src = DomainSpec.make("source", 0.0)
        tgt = DomainSpec.make("target", 0.0)
        assert (src.orientation_deg, src.brightness, src.tint, src.noise_sigma, src.texture_freq) == (
            tgt.orientation_deg,
            tgt.brightness,
            tgt.tint,
            tgt.noise_sigma,
            tgt.texture_freq,
        )

    def test_gamma_interpolates_target_only(self):
        src = DomainSpec.make("source", 0.7)
        assert src.brightness == 0.0 and src.tint == (1.0, 1.0, 1.0)
        tgt_half = DomainSpec.make("target", 0.5)
        tgt_full = DomainSpec.make("target", 1.0)
        assert 0 < tgt_half.brightness < tgt_full.brightness

    def test_invalid_inputs(self):
        with pytest.raises(ConfigError):
            DomainSpec.make("middle", 0.5)
        with pytest.raises(ConfigError):
            DomainSpec.make("target", 1.5)


class TestRenderClip:
    def test_pixels_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for cls in default_classes():
            clip = render_clip(cls, DomainSpec.make("target", 1.0), rng)
            assert clip.shape == (16, 3, 32, 32) and clip.dtype == np.float32
            assert clip.min() >= 0.0 and clip.max() <= 1.0

    def test_same_rng_state_pairs_domains_at_gamma_zero(self):
        cls = default_classes()[2]
        a = render_clip(cls, DomainSpec.make("source", 0.0), np.random.default_rng(9))
        b = render_clip(cls, DomainSpec.make("target", 0.0), np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_unknown_shape_rejected(self):
        with pytest.raises(ConfigError):
            render_clip(ClassSpec(0, "triangle", "up"), DomainSpec.make("source", 0.0), np.random.default_rng(0))


class TestClipFiles:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        clip = rng.random((16, 3, 32, 32), dtype=np.float32)
        write_clip(tmp_path / "x.clip", clip)
        back = load_clip(tmp_path / "x.clip")
        assert back.tobytes() == clip.tobytes()
        write_clip(tmp_path / "y.clip", back)
        assert (tmp_path / "x.clip").read_bytes() == (tmp_path / "y.clip").read_bytes()

    def test_flipped_magic_byte(self, tmp_path, rng):
        path = tmp_path / "m.clip"
        write_clip(path, rng.random((2, 3, 4, 4), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(MagicError):
            load_clip(path)

    def test_corrupt_payload_fails_checksum(self, tmp_path, rng):
        path = tmp_path / "c.clip"
        write_clip(path, rng.random((2, 3, 4, 4), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[-20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_clip(path)

    def test_truncated_file(self, tmp_path, rng):
        path = tmp_path / "t.clip"
        write_clip(path, rng.random((2, 3, 4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-30])
        with pytest.raises(TruncatedError):
            load_clip(path)

    def test_bad_version(self, tmp_path, rng):
        path = tmp_path / "v.clip"
        write_clip(path, rng.random((2, 3, 4, 4), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[8] = 0x7F
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_clip(path)

    def test_extent_mismatch_against_manifest(self, tmp_path, rng):
        path = tmp_path / "d.clip"
        write_clip(path, rng.random((2, 3, 4, 4), dtype=np.float32))
        store = ClipStore(expected_extents=(16, 3, 32, 32))
        with pytest.raises(DataFormatError):
            store.get(path)


class TestGenerateDataset:
    def test_gamma_zero_same_seed_byte_identical_across_domains(self, tmp_path):
        classes = default_classes()[:2]
        m_src = generate_dataset(DomainSpec.make("source", 0.0), classes, 3, 77, tmp_path / "s")
        m_tgt = generate_dataset(DomainSpec.make("target", 0.0), classes, 3, 77, tmp_path / "t")
        for rs, rt in zip(m_src.records, m_tgt.records):
            assert m_src.abs_path(rs).read_bytes()[12:] == m_tgt.abs_path(rt).read_bytes()[12:]

    def test_regeneration_is_byte_identical(self, tmp_path):
        classes = default_classes()[:2]
        generate_dataset(DomainSpec.make("target", 0.6), classes, 2, 5, tmp_path / "a")
        generate_dataset(DomainSpec.make("target", 0.6), classes, 2, 5, tmp_path / "b")
        for rel in sorted(p.name for p in (tmp_path / "a" / "clips").iterdir()):
            assert (tmp_path / "a" / "clips" / rel).read_bytes() == (tmp_path / "b" / "clips" / rel).read_bytes()

    def test_pixels_in_range_and_split_sizes(self, small_dataset):
        src, _ = small_dataset
        assert len(src.select(split="train")) == 8 * 5
        assert len(src.select(split="test")) == 8 * 1
        clip = load_clip(src.abs_path(src.records[0]))
        assert clip.min() >= 0.0 and clip.max() <= 1.0

    def test_imbalance_knob_thins_higher_classes(self, tmp_path):
        m = generate_dataset(
            DomainSpec.make("source", 0.5), default_classes(), 10, 1, tmp_path / "imb", imbalance=0.3
        )
        counts = np.bincount([r.label for r in m.records], minlength=8)
        assert counts[0] == 10 and all(a >= b for a, b in zip(counts, counts[1:])) and counts[-1] >= 1
        with pytest.raises(ConfigError):
            generate_dataset(DomainSpec.make("source", 0.5), default_classes(), 10, 1, tmp_path / "bad", imbalance=1.0)

    def test_class_distribution_uniform_across_domains(self, small_dataset):
        src, tgt = small_dataset
        for manifest in (src, tgt):
            labels = [r.label for r in manifest.records]
            counts = np.bincount(labels, minlength=8)
            assert (counts == counts[0]).all()

    def test_manifest_roundtrip_and_validation(self, small_dataset, tmp_path):
        src, _ = small_dataset
        src.validate()
        copy = tmp_path / "copy.csv"
        src.save(copy)
        loaded = Manifest.load(copy)
        assert loaded.meta == src.meta
        assert [r.path for r in loaded.records] == [r.path for r in src.records]

    def test_validate_rejects_bad_label(self, small_dataset):
        src, _ = small_dataset
        broken = Manifest(meta=dict(src.meta), records=[r for r in src.records], root=src.root)
        broken.records[0] = type(broken.records[0])(broken.records[0].path, 99, "source", "train", 1)
        with pytest.raises(DataFormatError):
            broken.validate(check_files=False)

    def test_validate_rejects_duplicate_paths(self, small_dataset):
        src, _ = small_dataset
        broken = Manifest(meta=dict(src.meta), records=[src.records[0], src.records[0]], root=src.root)
        with pytest.raises(DataFormatError):
            broken.validate(check_files=False)


class TestBatchIterator:
    def test_batch_count(self, small_dataset):
        src, _ = small_dataset
        batches = list(batch_iterator(src, 8, seed=0, split="train"))
        assert len(batches) == 40 // 8
        assert batches[0].source.shape == (8, 16, 3, 32, 32)
        assert batches[0].target is None

    def test_pairs_equal_sized_subbatches(self, small_dataset):
        src, tgt = small_dataset
        merged = Manifest.merge(src, tgt)
        for batch in batch_iterator(merged, 4, seed=0, split="train"):
            assert batch.source.shape[0] == batch.target.shape[0] == 4

    def test_same_seed_identical_order(self, small_dataset):
        src, tgt = small_dataset
        merged = Manifest.merge(src, tgt)
        a = [b.source_labels.tolist() for b in batch_iterator(merged, 4, seed=3)]
        b = [b.source_labels.tolist() for b in batch_iterator(merged, 4, seed=3)]
        assert a == b
        c = [b.source_labels.tolist() for b in batch_iterator(merged, 4, seed=4)]
        assert a != c

    def test_epoch_covers_all_indices_minus_remainder(self, small_dataset):
        src, _ = small_dataset
        store = ClipStore(expected_extents=src.meta["extents"])
        seen = []
        for batch in batch_iterator(src, 3, seed=1, store=store):
            seen.extend(batch.source_labels.tolist())
        assert len(seen) == (40 // 3) * 3
        full = np.bincount([r.label for r in src.select(split="train")], minlength=8)
        got = np.bincount(seen, minlength=8)
        assert (got <= full).all() and sum(full) - sum(got) == 40 % 3

    def test_empty_manifest_rejected(self, small_dataset):
        src, _ = small_dataset
        empty = Manifest(meta=dict(src.meta), records=[], root=src.root)
        with pytest.raises(ConfigError):
            next(batch_iterator(empty, 4, seed=0))


class TestDatasetGuarantees:
    def test_raw_pixel_domain_gap_at_gamma(self, small_dataset):
        """A linear probe on raw pixels separates the domains (>= 90%)."""
        src, tgt = small_dataset
        feats, doms = [], []
        for manifest, d in ((src, 1.0), (tgt, 0.0)):
            for rec in manifest.records:
                feats.append(load_clip(manifest.abs_path(rec)).reshape(-1))
                doms.append(d)
        acc = domain_probe_accuracy(np.stack(feats), np.asarray(doms), seed=0)
        assert acc >= 0.90

    def test_within_domain_class_separability(self, tmp_path):
        """A small supervised model reaches >= 95% within one domain at
        gamma = 0.8: a two-layer net on translation-invariant clip summaries
        (frame-difference magnitude spectra plus phase-derived velocity)."""
        manifest = generate_dataset(
            DomainSpec.make("target", 0.8), default_classes(), 30, 4242, tmp_path / "sep"
        )

        def summarize(records):
            rows, labels = [], []
            for rec in records:
                clip = load_clip(manifest.abs_path(rec)).astype(np.float64)
                gray = clip.mean(axis=1)  # (T, H, W)
                spectra = np.fft.fft2(gray)
                diff_mag = np.abs(np.fft.fft2(np.diff(gray, axis=0))).mean(axis=0)
                cross = (spectra[1:] * np.conj(spectra[:-1])).sum(axis=0)
                vy = np.angle(cross[1, 0]) * gray.shape[1] / (2 * np.pi)
                vx = np.angle(cross[0, 1]) * gray.shape[2] / (2 * np.pi)
                rows.append(np.concatenate([[vy, vx], np.log1p(diff_mag[:8, :8]).reshape(-1)]))
                labels.append(rec.label)
            return np.stack(rows), np.asarray(labels)

        x_tr, y_tr = summarize(manifest.select(split="train"))
        x_te, y_te = summarize(manifest.select(split="test"))
        mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-8
        x_tr = ((x_tr - mu) / sd).astype(np.float32)
        x_te = ((x_te - mu) / sd).astype(np.float32)

        rng = np.random.default_rng(0)
        l1 = Linear(x_tr.shape[1], 32, rng)
        l2 = Linear(32, 8, rng)
        params = {**{f"a.{k}": v for k, v in l1.params().items()}, **{f"b.{k}": v for k, v in l2.params().items()}}
        opt = AdamW(params, lr=5e-3, weight_decay=0.0)
        xt = Tensor(x_tr)
        for _ in range(300):
            loss = ad.cross_entropy_from_logits(l2(ad.gelu(l1(xt))), y_tr)
            backward(loss)
            opt.step()
            opt.zero_grad()
        preds = ad.argmax(l2(ad.gelu(l1(Tensor(x_te)))), axis=1)
        acc = float((preds == y_te).mean())
        assert acc >= 0.95, f"within-domain separability only {acc:.3f}"

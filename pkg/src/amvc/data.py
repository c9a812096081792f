"""Synthetic two-domain video benchmark, clip file format and batching.

Eight classes = {square, cross} x {up, down, left, right}: a bright shape
drifting over a styled background on a wrap-around canvas. The domain gap is
purely photometric (background gradient orientation, brightness, tint, noise,
texture frequency), controlled by a gap parameter gamma; the class-defining
shape and motion are drawn identically in both domains, so a domain-invariant
representation that keeps the class evidence always exists.

Per-clip randomness is derived from (dataset seed, class id, clip index) and
never from the domain, so generating both domains with the same seed at
gamma=0 produces byte-identical paired files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import (
    ChecksumError,
    ConfigError,
    DataFormatError,
    MagicError,
    TruncatedError,
    VersionError,
)

CLIP_MAGIC = b"AMVCLIP\x00"
CLIP_VERSION = 1
_CLIP_DTYPES = {0: np.dtype("<f4")}

SHAPES = ("square", "cross")
DIRECTIONS = ("up", "down", "left", "right")
_DIR_VEL = {"up": (-1.0, 0.0), "down": (1.0, 0.0), "left": (0.0, -1.0), "right": (0.0, 1.0)}


# ---------------------------------------------------------------------------
# clip files
# ---------------------------------------------------------------------------

def write_clip(path: str | Path, clip: np.ndarray) -> None:
    """Write a float32 clip: magic, version u16, dtype tag, rank u8, extents u32, payload, CRC32."""
    arr = np.ascontiguousarray(clip, dtype="<f4")
    payload = arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<H", CLIP_VERSION))
        fh.write(struct.pack("<BB", 0, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_clip(path: str | Path) -> np.ndarray:
    """Read a clip file back, verifying magic, version, completeness and CRC."""
    blob = Path(path).read_bytes()
    head = len(CLIP_MAGIC) + 2 + 2
    if len(blob) < head:
        raise TruncatedError(f"clip {path} is too short ({len(blob)} bytes)")
    if blob[: len(CLIP_MAGIC)] != CLIP_MAGIC:
        raise MagicError(f"clip {path} has bad magic {blob[:len(CLIP_MAGIC)]!r}")
    (version,) = struct.unpack_from("<H", blob, len(CLIP_MAGIC))
    if version != CLIP_VERSION:
        raise VersionError(f"clip {path} has version {version}, expected {CLIP_VERSION}")
    tag, rank = struct.unpack_from("<BB", blob, len(CLIP_MAGIC) + 2)
    if tag not in _CLIP_DTYPES:
        raise DataFormatError(f"clip {path} has unknown dtype tag {tag}")
    if len(blob) < head + 4 * rank:
        raise TruncatedError(f"clip {path} ends inside its extents table")
    shape = struct.unpack_from(f"<{rank}I", blob, head)
    dtype = _CLIP_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    start = head + 4 * rank
    if len(blob) < start + nbytes + 4:
        raise TruncatedError(f"clip {path} payload is truncated")
    payload = blob[start : start + nbytes]
    (crc_stored,) = struct.unpack_from("<I", blob, start + nbytes)
    if zlib.crc32(payload) != crc_stored:
        raise ChecksumError(f"clip {path} failed its CRC32 check")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# class and domain specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSpec:
    """One action class: a shape moving in a fixed direction at a fixed speed."""

    class_id: int
    shape: str
    direction: str
    speed: float = 2.0


def default_classes(speed: float = 2.0) -> list[ClassSpec]:
    """The 2x4 (shape, direction) grid of K=8 classes."""
    return [
        ClassSpec(class_id=si * len(DIRECTIONS) + di, shape=s, direction=d, speed=speed)
        for si, s in enumerate(SHAPES)
        for di, d in enumerate(DIRECTIONS)
    ]


# target styling at gamma = 1. texture_freq styles the SHAPE's fill shading
# (sub-cycle in source = flat fill, ~3 cycles in target = visible stripes), so
# the strongest domain cue lives on the class-bearing pixels themselves, with
# milder global brightness/tint/noise on top; the background distribution is
# domain-independent. Class identity (silhouette + motion) is never touched.
_SOURCE_STYLE = dict(orientation_deg=0.0, brightness=0.0, tint=(1.0, 1.0, 1.0), noise_sigma=0.02, texture_freq=0.5)
_TARGET_STYLE = dict(orientation_deg=0.0, brightness=0.10, tint=(1.12, 1.0, 0.88), noise_sigma=0.045, texture_freq=3.0)

_BG_TEXTURE_FREQ = 1.5  # background stripe frequency, same in both domains
_SHAPE_STRIPE_AMP = 0.35  # fill modulation depth, same in both domains
_SHAPE_SCALE = 9.0  # stripe frequency is in cycles per shape extent


@dataclass(frozen=True)
class DomainSpec:
    """Photometric styling of one domain; gamma interpolates target away from source."""

    name: str
    gamma: float
    orientation_deg: float
    brightness: float
    tint: tuple[float, float, float]
    noise_sigma: float
    texture_freq: float

    @classmethod
    def make(cls, name: str, gamma: float) -> "DomainSpec":
        if name not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {name!r}")
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
        t = gamma if name == "target" else 0.0
        mix = lambda a, b: a + t * (b - a)  # noqa: E731
        return cls(
            name=name,
            gamma=gamma,
            orientation_deg=mix(_SOURCE_STYLE["orientation_deg"], _TARGET_STYLE["orientation_deg"]),
            brightness=mix(_SOURCE_STYLE["brightness"], _TARGET_STYLE["brightness"]),
            tint=tuple(mix(a, b) for a, b in zip(_SOURCE_STYLE["tint"], _TARGET_STYLE["tint"])),
            noise_sigma=mix(_SOURCE_STYLE["noise_sigma"], _TARGET_STYLE["noise_sigma"]),
            texture_freq=mix(_SOURCE_STYLE["texture_freq"], _TARGET_STYLE["texture_freq"]),
        )


def _shape_cells(shape: str) -> np.ndarray:
    if shape == "square":
        offs = [(dy, dx) for dy in range(-4, 5) for dx in range(-4, 5)]
    elif shape == "cross":
        offs = [(dy, dx) for dy in range(-6, 7) for dx in range(-1, 2)]
        offs += [(dy, dx) for dy in range(-1, 2) for dx in range(-6, 7) if abs(dy) > 1 or abs(dx) > 1]
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return np.asarray(offs, dtype=np.int64)


def render_clip(
    cls: ClassSpec,
    dom: DomainSpec,
    rng: np.random.Generator,
    frames: int = 16,
    size: int = 32,
) -> np.ndarray:
    """Render one (frames, 3, size, size) clip with values in [0, 1].

    All random draws happen in a fixed order and domain parameters are applied
    as pure transforms of those draws, so the same rng state yields paired
    clips across domains.
    """
    base = rng.uniform(0.20, 0.35)
    grad_amp = rng.uniform(0.08, 0.15)
    angle_jitter = rng.uniform(-30.0, 30.0)
    tex_amp = rng.uniform(0.03, 0.06)
    tex_phase = rng.uniform(0.0, 2.0 * np.pi)
    shape_level = rng.uniform(0.70, 0.90)
    stripe_theta = rng.uniform(0.0, np.pi)
    stripe_phase = rng.uniform(0.0, 2.0 * np.pi)
    cy0, cx0 = rng.integers(0, size, size=2)
    noise = rng.standard_normal((frames, 3, size, size))

    theta = np.deg2rad(dom.orientation_deg + angle_jitter)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u = ((np.cos(theta) * xs + np.sin(theta) * ys) / size) - 0.5 * (np.cos(theta) + np.sin(theta))
    lum = base + grad_amp * u + tex_amp * np.sin(2.0 * np.pi * _BG_TEXTURE_FREQ * u + tex_phase)

    cells = _shape_cells(cls.shape)
    stripe_u = (np.cos(stripe_theta) * cells[:, 1] + np.sin(stripe_theta) * cells[:, 0]) / _SHAPE_SCALE
    fill = shape_level * (
        1.0 + _SHAPE_STRIPE_AMP * np.sin(2.0 * np.pi * dom.texture_freq * stripe_u + stripe_phase)
    )
    vy, vx = _DIR_VEL[cls.direction]
    clip = np.empty((frames, 3, size, size), dtype=np.float64)
    for t in range(frames):
        frame = lum.copy()
        py = int(np.round(cy0 + vy * cls.speed * t))
        px = int(np.round(cx0 + vx * cls.speed * t))
        rows = (py + cells[:, 0]) % size
        colsx = (px + cells[:, 1]) % size
        frame[rows, colsx] = fill
        for c in range(3):
            clip[t, c] = (frame + dom.brightness) * dom.tint[c]
    clip += noise * dom.noise_sigma
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ClipRecord:
    path: str
    label: int
    domain: str
    split: str
    seed: int


@dataclass
class Manifest:
    """Dataset index: metadata header plus one record per clip."""

    meta: dict
    records: list[ClipRecord]
    root: Path = field(default_factory=lambda: Path("."))

    def abs_path(self, rec: ClipRecord) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    def select(self, split: str | None = None, domain: str | None = None) -> list[ClipRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if domain is not None:
            out = [r for r in out if r.domain == domain]
        return out

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.meta, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(f"{r.path},{r.label},{r.domain},{r.split},{r.seed}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataFormatError(f"manifest {path} is empty")
        try:
            meta = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"manifest {path} header is not JSON: {exc}") from exc
        records = []
        for ln in lines[1:]:
            if not ln.strip():
                continue
            parts = ln.split(",")
            if len(parts) != 5:
                raise DataFormatError(f"manifest {path} has a malformed record line: {ln!r}")
            records.append(ClipRecord(parts[0], int(parts[1]), parts[2], parts[3], int(parts[4])))
        return cls(meta=meta, records=records, root=path.parent.resolve())

    def validate(self, check_files: bool = True) -> None:
        k = int(self.meta.get("k", 0))
        seen: set[str] = set()
        for r in self.records:
            if not 0 <= r.label < k:
                raise DataFormatError(f"label {r.label} out of range [0, {k}) for {r.path}")
            if r.path in seen:
                raise DataFormatError(f"clip {r.path} appears more than once in the manifest")
            seen.add(r.path)
            if check_files and not self.abs_path(r).exists():
                raise DataFormatError(f"clip file missing: {self.abs_path(r)}")

    @classmethod
    def merge(cls, *manifests: "Manifest") -> "Manifest":
        if not manifests:
            raise ConfigError("merge needs at least one manifest")
        ks = {int(m.meta["k"]) for m in manifests}
        exts = {tuple(m.meta["extents"]) for m in manifests}
        if len(ks) != 1 or len(exts) != 1:
            raise ConfigError("cannot merge manifests with differing class counts or extents")
        records = []
        for m in manifests:
            for r in m.records:
                records.append(ClipRecord(str(m.abs_path(r)), r.label, r.domain, r.split, r.seed))
        meta = dict(manifests[0].meta)
        meta["domain"] = "+".join(m.meta.get("domain", "?") for m in manifests)
        meta["n_records"] = len(records)
        return cls(meta=meta, records=records, root=Path("/"))


def generate_dataset(
    domain: DomainSpec,
    classes: list[ClassSpec],
    n_per_class: int,
    seed: int,
    out_dir: str | Path,
    test_fraction: float = 0.2,
    frames: int = 16,
    size: int = 32,
    imbalance: float = 0.0,
) -> Manifest:
    """Render n_per_class clips per class into out_dir and return the manifest.

    Fully deterministic: each clip's rng is seeded from (seed, class id, index).
    The last round(test_fraction * n) indices of each class form the test
    split. ``imbalance`` > 0 thins higher class ids geometrically (class c
    keeps a (1 - imbalance)^c fraction); zero keeps the balance uniform.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 0.0 <= imbalance < 1.0:
        raise ConfigError(f"imbalance must lie in [0, 1), got {imbalance}")
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    records: list[ClipRecord] = []
    for cls in classes:
        n_this = max(1, int(round(n_per_class * (1.0 - imbalance) ** cls.class_id)))
        n_test = int(round(test_fraction * n_this))
        for i in range(n_this):
            clip_seed = int(np.random.SeedSequence([seed, cls.class_id, i]).generate_state(1, np.uint64)[0])
            rng = np.random.Generator(np.random.PCG64(clip_seed))
            clip = render_clip(cls, domain, rng, frames=frames, size=size)
            rel = f"clips/{domain.name}_{cls.class_id}_{i:05d}.clip"
            write_clip(out_dir / rel, clip)
            split = "train" if i < n_this - n_test else "test"
            records.append(ClipRecord(rel, cls.class_id, domain.name, split, clip_seed))
    meta = {
        "k": len(classes),
        "extents": [frames, 3, size, size],
        "gamma": domain.gamma,
        "seed": seed,
        "domain": domain.name,
        "n_records": len(records),
    }
    manifest = Manifest(meta=meta, records=records, root=out_dir.resolve())
    manifest.save(out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class ClipStore:
    """Clip loader with an in-memory cache of decoded arrays."""

    def __init__(self, expected_extents=None, max_items: int = 0):
        self.expected = tuple(expected_extents) if expected_extents else None
        self.max_items = max_items
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str | Path) -> np.ndarray:
        key = str(path)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        arr = load_clip(path)
        if self.expected and arr.shape != self.expected:
            raise DataFormatError(f"clip {path} extents {arr.shape} do not match manifest {self.expected}")
        if not self.max_items or len(self._cache) < self.max_items:
            self._cache[key] = arr
        return arr


@dataclass
class DomainBatch:
    """Paired source/target sub-batches; either side may be absent."""

    source: Tensor | None
    source_labels: np.ndarray | None
    target: Tensor | None
    target_labels: np.ndarray | None
    batch_index: int


def batch_iterator(
    manifest: Manifest,
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    split: str = "train",
    store: ClipStore | None = None,
):
    """One epoch of DomainBatch objects: a seeded permutation per domain,
    equal-size source/target sub-batches, final ragged batch dropped."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    src = manifest.select(split=split, domain="source")
    tgt = manifest.select(split=split, domain="target")
    if not src and not tgt:
        raise ConfigError(f"manifest has no records in split {split!r}")
    if store is None:
        store = ClipStore(expected_extents=manifest.meta.get("extents"))
    rng = np.random.Generator(np.random.PCG64(seed))
    order_src = rng.permutation(len(src)) if shuffle else np.arange(len(src))
    order_tgt = rng.permutation(len(tgt)) if shuffle else np.arange(len(tgt))
    counts = [len(r) // batch_size for r in (src, tgt) if r]
    n_batches = min(counts)

    def gather(recs, order, lo):
        chosen = [recs[j] for j in order[lo : lo + batch_size]]
        clips = np.stack([store.get(manifest.abs_path(r)) for r in chosen])
        labels = np.asarray([r.label for r in chosen], dtype=np.int64)
        return Tensor(clips), labels

    for b in range(n_batches):
        lo = b * batch_size
        s_clips = s_labels = t_clips = t_labels = None
        if src:
            s_clips, s_labels = gather(src, order_src, lo)
        if tgt:
            t_clips, t_labels = gather(tgt, order_tgt, lo)
        yield DomainBatch(s_clips, s_labels, t_clips, t_labels, batch_index=b)

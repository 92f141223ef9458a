"""
Synthetic asymmetry-coded lip clips, the crop/normalise preprocessing, and
the RALT raw-tensor dataset layout.

Synthetic classes come in pairs (2k, 2k+1). Both members of a pair share a
mirror-symmetric moving-ellipse "mouth"; they differ only by a perturbation
drawn on the right half of the frame, scaled by ``asymmetry_strength``.
Background clutter is mirrored so that with zero asymmetry every frame is
exactly left-right symmetric.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, DimensionError, FormatError, ManifestError
from .tensor import default_dtype

RALT_MAGIC = b"RALT"
RALT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

# brightness change at the right border per unit asymmetry_strength
RAMP_PEAK = 0.1


@dataclass
class SequenceSample:
    frames: np.ndarray  # T x H x W, values in [0, 1]
    label: int

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SynthSpec:
    num_classes: int = 4
    T: int = 8
    H: int = 32
    W: int = 32
    asymmetry_strength: float = 0.6
    redundancy_noise_level: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.T < 1 or self.H < 8 or self.W < 8:
            raise ContractError(f"clip extents too small: T={self.T}, H={self.H}, W={self.W}")
        if not 0.0 <= self.asymmetry_strength <= 1.0:
            raise ContractError(f"asymmetry_strength must lie in [0, 1], got {self.asymmetry_strength}")
        if self.redundancy_noise_level < 0:
            raise ContractError("redundancy_noise_level must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _ellipse(yy, xx, cy, cx, ry, rx, softness=0.6):
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * max(ry, rx) / softness, -40, 40)))


def _blob(yy, xx, cy, cx, sigma):
    return np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)))


def _sample(spec: SynthSpec, index: int) -> SequenceSample:
    rng = np.random.default_rng([spec.seed, index])
    label = index % spec.num_classes
    pair, member = divmod(label, 2)
    T, H, W = spec.T, spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cx = (W - 1) / 2.0

    # symmetric mouth; nuisance: size, vertical position, phase, contrast
    cy = (H - 1) / 2.0 + rng.uniform(-0.08, 0.08) * H
    rx = rng.uniform(0.22, 0.30) * W
    ry0 = rng.uniform(0.06, 0.10) * H
    amp = rng.uniform(0.05, 0.08) * H
    phase = rng.uniform(-0.3, 0.3)
    contrast = rng.uniform(0.45, 0.6)
    background = rng.uniform(0.55, 0.7)
    cycles = 0.5 * (pair + 1)

    t = np.arange(T) / max(T - 1, 1)
    opening = ry0 + amp * np.abs(np.sin(2 * np.pi * cycles * t + phase))

    frames = np.empty((T, H, W))
    half = W // 2
    for i in range(T):
        mouth = _ellipse(yy, xx, cy, cx, opening[i], rx)
        frame = background - contrast * mouth
        if spec.redundancy_noise_level > 0:
            clutter = rng.normal(0.0, spec.redundancy_noise_level, (H, half))
            clutter = np.concatenate([clutter, np.zeros((H, W - 2 * half)), clutter[:, ::-1]], axis=1)
            frame = frame + clutter * (1.0 - mouth)
        frames[i] = frame

    if spec.asymmetry_strength > 0:
        # smooth brightness ramp over the right half: brighter for member 0,
        # darker for member 1. Locally it is buried in clutter; only a
        # left/right comparison reveals its sign.
        sign = 1.0 if member == 0 else -1.0
        u = np.clip((xx - cx) / (W - 1 - cx), 0.0, 1.0)
        ramp = np.sin(0.5 * np.pi * u) ** 2
        frames = frames + sign * spec.asymmetry_strength * RAMP_PEAK * ramp

    frames = np.clip(frames, 0.0, 1.0)
    return SequenceSample(frames=frames.astype(np.float32), label=label)


def generate(spec: SynthSpec, n: int) -> list[SequenceSample]:
    """``n`` samples with balanced labels (``label = index % num_classes``).

    Sample ``i`` depends only on ``(spec, i)``, so any subset can be generated
    independently and in any order.
    """
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    return [_sample(spec, i) for i in range(n)]


# -- dataset container -------------------------------------------------------------

def normalize_clip(frames: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole clip (computed in float64)."""
    f = np.asarray(frames, dtype=np.float64)
    std = f.std()
    return (f - f.mean()) / (std if std > 0 else 1.0)


class ClipDataset:
    """In-memory clips ``n x T x H x W`` plus integer labels.

    With ``crop`` set, clips are stored raw and cropped + normalised per batch:
    a random crop per clip when batches are drawn with an RNG (training), the
    centre crop otherwise.
    """

    def __init__(self, frames: np.ndarray, labels, num_classes: int, normalize: bool = True,
                 crop: Optional[int] = None):
        frames = np.asarray(frames)
        labels = np.asarray(labels, dtype=np.int64)
        if frames.ndim != 4 or frames.shape[0] != labels.shape[0]:
            raise DimensionError(f"frames {frames.shape} do not match {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractError(f"labels outside [0, {num_classes})")
        if crop is not None:
            crop_offsets(frames.shape[2], frames.shape[3], False, size=crop)
        elif normalize and len(frames):
            frames = np.stack([normalize_clip(f) for f in frames])
        self.frames = frames.astype(np.float32)
        self.labels = labels
        self.num_classes = num_classes
        self.crop = crop

    @classmethod
    def from_samples(cls, samples, num_classes: int, normalize: bool = True,
                     crop: Optional[int] = None) -> "ClipDataset":
        frames = np.stack([s.frames for s in samples])
        return cls(frames, [s.label for s in samples], num_classes, normalize, crop)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipDataset":
        out = ClipDataset.__new__(ClipDataset)
        out.frames = self.frames[idx]
        out.labels = self.labels[idx]
        out.num_classes = self.num_classes
        out.crop = self.crop
        return out

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None
                ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(B x 1 x T x H x W, labels)``; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        dtype = default_dtype()
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            clips = self.frames[idx]
            if self.crop is not None:
                clips = np.stack([preprocess(c, rng is not None, rng, self.crop) for c in clips])
            yield clips[:, None].astype(dtype), self.labels[idx]


# -- LRW-style preprocessing ---------------------------------------------------------

CROP = 88


def crop_offsets(height: int, width: int, train_mode: bool,
                 rng: Optional[np.random.Generator] = None, size: int = CROP) -> tuple[int, int]:
    if height < size or width < size:
        raise DimensionError(f"frames {height}x{width} smaller than crop {size}x{size}")
    if not train_mode:
        return (height - size) // 2, (width - size) // 2
    if rng is None:
        raise ContractError("train-mode cropping needs an RNG stream")
    return int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1))


def preprocess(frames: np.ndarray, train_mode: bool, rng: Optional[np.random.Generator] = None,
               size: int = CROP) -> np.ndarray:
    """Crop ``T x H x W`` frames to ``size x size`` and normalise per clip.

    Training uses one random crop position for the whole clip; evaluation
    uses the centre crop.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DimensionError(f"expected T x H x W frames, got {frames.shape}")
    oy, ox = crop_offsets(frames.shape[1], frames.shape[2], train_mode, rng, size)
    return normalize_clip(frames[:, oy:oy + size, ox:ox + size])


# -- RALT layout ------------------------------------------------------------------------

def write_ralt(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 3:
        raise DimensionError(f"RALT stores T x H x W clips, got {frames.shape}")
    t, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RALT_MAGIC, RALT_VERSION, t, h, w))
        fh.write(frames.tobytes())


def read_ralt(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, h, w = _HEADER.unpack_from(raw)
    if magic != RALT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RALT_VERSION:
        raise FormatError(f"{path}: unsupported RALT version {version}")
    count = t * h * w
    if len(raw) != _HEADER.size + 4 * count:
        raise FormatError(f"{path}: payload size does not match header {t}x{h}x{w}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, h, w).astype(np.float32)


def write_layout(root, samples, split_of=None, manifest_name: str = "manifest.jsonl") -> Path:
    """Write each sample as ``clips/NNNNNN.ralt`` and index them in a JSONL manifest."""
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rel = f"clips/{i:06d}.ralt"
        write_ralt(root / rel, s.frames)
        split = split_of(i) if split_of is not None else "train"
        lines.append(json.dumps({"file": rel, "label": int(s.label), "split": split}))
    manifest = root / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class LayoutDataset:
    root: Path
    entries: list  # dicts with file, label, split

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, i: int) -> SequenceSample:
        e = self.entries[i]
        return SequenceSample(read_ralt(self.root / e["file"]), int(e["label"]))

    def split(self, name: str) -> "LayoutDataset":
        return LayoutDataset(self.root, [e for e in self.entries if e["split"] == name])

    def samples(self) -> list[SequenceSample]:
        return [self.load(i) for i in range(len(self))]


def ingest_lrw_layout(root, manifest) -> LayoutDataset:
    root = Path(root)
    manifest = Path(manifest)
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    try:
        text = manifest.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {manifest}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
            entry = {"file": str(e["file"]), "label": int(e["label"]), "split": str(e.get("split", "train"))}
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{manifest}:{lineno}: malformed entry ({exc})") from exc
        if not (root / entry["file"]).is_file():
            raise ManifestError(f"{manifest}:{lineno}: missing file {entry['file']}")
        entries.append(entry)
    return LayoutDataset(root, entries)

"""
Full model: 3-D conv front end, shared DRSBlock stages with cross-view
interaction, multi-scale temporal decoder, and classifier. Checkpoint I/O
lives here too.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .acvi import ACVI
from .errors import ContractError, DimensionError, FormatError
from .nn import BatchNorm, Conv, Linear, Module
from .rao import DRSBlock
from .tensor import Tensor, as_tensor
from .views import ViewPair, encode_shared, reassemble, split_views, SharedEncoder

CHECKPOINT_SCHEMA = 1


@dataclass
class RalConfig:
    num_classes: int = 500
    frontend_channels: int = 16
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1])
    acvi_after_stage: list = field(default_factory=lambda: [True, True, True])
    ms_tcn_kernels: list = field(default_factory=lambda: [3, 5, 7])
    decoder_channels: int = 48
    decoder_layers: int = 2
    dropout: float = 0.2
    rao_reduction: int = 4
    acvi_alpha_init: float = 0.0
    shared_acvi_ln: bool = False
    enable_dlsv: bool = True
    enable_rao: bool = True
    enable_acvi: bool = True

    def __post_init__(self):
        n = len(self.stage_channels)
        if n < 1:
            raise ContractError("at least one encoder stage is required")
        if len(self.blocks_per_stage) != n or len(self.acvi_after_stage) != n:
            raise ContractError(
                f"per-stage lists disagree: stage_channels={n}, "
                f"blocks_per_stage={len(self.blocks_per_stage)}, acvi_after_stage={len(self.acvi_after_stage)}")
        if not self.ms_tcn_kernels or self.decoder_channels % len(self.ms_tcn_kernels):
            raise ContractError("decoder_channels must be a multiple of the number of temporal kernels")
        if any(k % 2 == 0 for k in self.ms_tcn_kernels):
            raise ContractError(f"temporal kernels must be odd, got {self.ms_tcn_kernels}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "RalConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def switches(self) -> dict:
        return {"dlsv": self.enable_dlsv, "rao": self.enable_rao, "acvi": self.enable_acvi}


class Frontend3D(Module):
    """Conv3d 5x7x7 (stride 1x2x2) -> BN -> ReLU -> 1x2x2 max pool."""

    def __init__(self, channels, rng):
        super().__init__()
        self.conv = Conv(1, channels, (5, 7, 7), rng, stride=(1, 2, 2), padding=(2, 3, 3))
        self.norm = BatchNorm(channels)

    def forward(self, x):
        return ops.max_pool(ops.relu(self.norm(self.conv(x))), (1, 2, 2))


class MultiScaleTemporalConv(Module):
    """Parallel 1-D convs (one per kernel size, 'same' padding), concatenated, BN, ReLU.

    A simplified stand-in for a full MS-TCN, not a reproduction of it.
    """

    def __init__(self, c_in, c_out, kernels, rng):
        super().__init__()
        per_branch = c_out // len(kernels)
        self.branches = [Conv(c_in, per_branch, (k,), rng, padding=k // 2) for k in kernels]
        self.norm = BatchNorm(c_out)

    def forward(self, x):
        return ops.relu(self.norm(ops.concat([b(x) for b in self.branches], axis=1)))


class RalModel(Module):
    def __init__(self, config: RalConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.frontend = Frontend3D(config.frontend_channels, rng)
        c_prev = config.frontend_channels
        self.stages = []
        self.acvi = []
        for i, (c, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
            blocks = []
            for b in range(nblocks):
                blocks.append(DRSBlock(c_prev if b == 0 else c, c, rng, use_rao=config.enable_rao,
                                       reduction=config.rao_reduction))
            self.stages.append(SharedEncoder(blocks))
            if config.enable_acvi and config.acvi_after_stage[i]:
                self.acvi.append(ACVI(c, rng, config.acvi_alpha_init, config.shared_acvi_ln))
            else:
                self.acvi.append(None)
            c_prev = c
        self.decoder = []
        d_in = c_prev
        for _ in range(config.decoder_layers):
            self.decoder.append(MultiScaleTemporalConv(d_in, config.decoder_channels,
                                                       config.ms_tcn_kernels, rng))
            d_in = config.decoder_channels
        self.classifier = Linear(d_in, config.num_classes, rng)
        self.dropout_rng = np.random.default_rng([seed, 0x5EED])

    def frame_features(self, x: Tensor) -> Tensor:
        """Front end + encoder for ``B x 1 x T x H x W``; returns ``(B*T) x C`` embeddings."""
        f = self.frontend(x)
        b, c, t, h, w = f.shape
        frames = ops.reshape(ops.transpose(f, (0, 2, 1, 3, 4)), (b * t, c, h, w))
        if self.config.enable_dlsv:
            pair = split_views(frames)
            for stage, acvi in zip(self.stages, self.acvi):
                pair = encode_shared(pair, stage)
                if acvi is not None:
                    pair = ViewPair(*acvi(pair.left, pair.right), pair.original_width)
            n, c = pair.left.shape[:2]
            left = ops.reshape(ops.global_avg_pool(pair.left), (n, c))
            right = ops.reshape(ops.global_avg_pool(pair.right), (n, c))
            return ops.scalar_mul(ops.add(left, right), 0.5)
        for stage, acvi in zip(self.stages, self.acvi):
            frames = stage(frames)
            if acvi is not None:
                pair = split_views(frames)
                pair = ViewPair(*acvi(pair.left, pair.right), pair.original_width)
                frames = reassemble(pair)
        n, c = frames.shape[:2]
        return ops.reshape(ops.global_avg_pool(frames), (n, c))

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[1] != 1:
            raise DimensionError(f"expected B x 1 x T x H x W grayscale input, got {x.shape}")
        b, _, t = x.shape[:3]
        if t < min(self.config.ms_tcn_kernels):
            raise DimensionError(f"clip length {t} shorter than smallest temporal kernel "
                                 f"{min(self.config.ms_tcn_kernels)}")
        emb = self.frame_features(x)
        seq = ops.transpose(ops.reshape(emb, (b, t, emb.shape[1])), (0, 2, 1))
        for layer in self.decoder:
            seq = layer(seq)
        pooled = ops.mean(seq, axis=2)
        pooled = ops.dropout(pooled, self.config.dropout, rng or self.dropout_rng, self.training)
        return self.classifier(pooled)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(model: RalModel, path, extra: Optional[dict] = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f32 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    kinds = {name: "param" for name, _ in model.named_parameters()}
    for name, arr in model.state_dict().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "kind": kinds.get(name, "buffer")})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"schema_version": CHECKPOINT_SCHEMA, "config": model.config.to_dict(),
                "blob": path.name + ".bin", "tensors": entries}
    if extra:
        manifest["extra"] = extra
    path.with_name(path.name + ".bin").write_bytes(b"".join(chunks))
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=1))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    mpath = path.with_name(path.name + ".json")
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest {mpath}: {exc}") from exc
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise FormatError(f"{mpath}: unsupported schema version {manifest.get('schema_version')}")
    blob = (mpath.parent / manifest["blob"]).read_bytes()
    state = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if e["dtype"] != "f32" or end > len(blob):
            raise FormatError(f"{mpath}: bad entry for {e['name']}")
        state[e["name"]] = np.frombuffer(blob, dtype="<f4", count=count,
                                         offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
    return manifest, state


def load_checkpoint(path) -> RalModel:
    manifest, state = read_checkpoint(path)
    model = RalModel(RalConfig.from_dict(manifest["config"]))
    model.load_state_dict(state)
    return model

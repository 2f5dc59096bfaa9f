"""The hybrid segmentation network: ResNet-style encoder, windowed-attention
bottleneck and a convolutional decoder with skip connections.

Layout for an ``H x W`` input (all extents must divide by 16)::

    stem 7x7/2 ---------------------------------- skip @ 1/2
    maxpool 3x3/2 -> res stage 1 ----------------- skip @ 1/4
    res stage 2 (/2) ----------------------------- skip @ 1/8
    res stage 3 (/2) -> token projection -> N transformer layers -> reshape
    decoder: 4 x [upsample x2 -> concat skip -> conv 3x3 -> ReLU] -> 1x1 head

Skip connections are removed deepest-first when fewer than three are
requested: one keeps 1/8, two keep 1/8 and 1/4.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import PatchProjection, SwinBlockPair, TokenGrid, grid_to_map
from .errors import ConfigError, DimensionError
from .nn import Conv2d, GroupNorm, LayerNorm, Module, norm_groups
from .tensor import Tensor, no_grad
from .volume import VolumeImage, VoxelMask

DOWNSAMPLING = 16
SKIP_SCALES = (8, 4, 2)  # deepest first
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class SwtrConfig:
    input_size: tuple = (224, 224)
    in_channels: int = 1
    num_classes: int = 3
    encoder_channels: tuple = (16, 32, 48, 64)
    blocks_per_stage: int = 1
    d_model: int = 96
    num_transformer_layers: int = 12
    heads: int = 3
    window_size: int = 7
    shift: int | None = None
    mlp_ratio: int = 4
    rel_pos_bias: bool = True
    num_skip_connections: int = 3
    decoder_channels: tuple = (64, 32, 16, 8)
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.encoder_channels = tuple(int(v) for v in self.encoder_channels)
        self.decoder_channels = tuple(int(v) for v in self.decoder_channels)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"SwtrConfig.{name}: {why}")

        if len(self.input_size) != 2 or any(n <= 0 or n % DOWNSAMPLING for n in self.input_size):
            bad("input_size", f"{self.input_size} must be two positive multiples of {DOWNSAMPLING}")
        if len(self.encoder_channels) != 4 or min(self.encoder_channels) < 1:
            bad("encoder_channels", "needs four positive widths (stem, stage1..3)")
        if len(self.decoder_channels) != 4 or min(self.decoder_channels) < 1:
            bad("decoder_channels", "needs four positive widths")
        if self.num_transformer_layers < 2 or self.num_transformer_layers % 2:
            bad("num_transformer_layers", "must be a positive even number (W-MSA/SW-MSA pairs)")
        if not 0 <= self.num_skip_connections <= 3:
            bad("num_skip_connections", "must lie in 0..3")
        if self.heads < 1 or self.d_model % self.heads:
            bad("heads", f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.window_size < 1:
            bad("window_size", "must be positive")
        shift = self.window_size // 2 if self.shift is None else self.shift
        if not 0 <= shift < self.window_size:
            bad("shift", f"{shift} must lie in [0, window_size)")
        if self.num_classes < 2 or self.in_channels < 1 or self.blocks_per_stage < 1:
            bad("num_classes", "need >= 2 classes, >= 1 input channel and >= 1 block per stage")
        if self.dtype not in _DTYPES:
            bad("dtype", f"must be one of {sorted(_DTYPES)}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.input_size[0] // DOWNSAMPLING, self.input_size[1] // DOWNSAMPLING)

    @property
    def skip_scales(self) -> tuple:
        return SKIP_SCALES[: self.num_skip_connections]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SwtrConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SwtrConfig fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "SwtrConfig":
        d = asdict(self)
        d.update(changes)
        return SwtrConfig.from_dict(d)


class ResBlock(Module):
    def __init__(self, c_in, c_out, stride, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False, dtype=dtype)
        self.norm1 = GroupNorm(c_out, norm_groups(c_out), dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False, dtype=dtype)
        self.norm2 = GroupNorm(c_out, norm_groups(c_out), dtype)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = Conv2d(c_in, c_out, 1, rng, stride=stride, padding=0, bias=False, dtype=dtype)
            self.down_norm = GroupNorm(c_out, norm_groups(c_out), dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        short = x if self.down is None else self.down_norm(self.down(x))
        return T.relu(h + short)


class DecoderStage(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        self.conv = Conv2d(c_in, c_out, 3, rng, bias=False, dtype=dtype)
        self.norm = GroupNorm(c_out, norm_groups(c_out), dtype)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        x = T.upsample2x(x)
        if skip is not None:
            x = T.concat([x, skip], axis=1)
        return T.relu(self.norm(self.conv(x)))


class SwtrModel(Module):
    def __init__(self, config: SwtrConfig):
        cfg = config
        self.config = cfg
        dtype = _DTYPES[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        c0, c1, c2, c3 = cfg.encoder_channels
        self.stem = Conv2d(cfg.in_channels, c0, 7, rng, stride=2, padding=3, bias=False, dtype=dtype)
        self.stem_norm = GroupNorm(c0, norm_groups(c0), dtype)
        self.stage1 = [ResBlock(c0 if i == 0 else c1, c1, 1, rng, dtype) for i in range(cfg.blocks_per_stage)]
        self.stage2 = [ResBlock(c1 if i == 0 else c2, c2, 2 if i == 0 else 1, rng, dtype)
                       for i in range(cfg.blocks_per_stage)]
        self.stage3 = [ResBlock(c2 if i == 0 else c3, c3, 2 if i == 0 else 1, rng, dtype)
                       for i in range(cfg.blocks_per_stage)]
        self.projection = PatchProjection(c3, cfg.d_model, rng, dtype)
        self.transformer = [
            SwinBlockPair(cfg.d_model, cfg.heads, cfg.window_size, rng, cfg.shift, cfg.mlp_ratio,
                          cfg.rel_pos_bias, dtype=dtype)
            for _ in range(cfg.num_transformer_layers // 2)
        ]
        self.final_norm = LayerNorm(cfg.d_model, dtype)
        skip_channels = {8: c2, 4: c1, 2: c0, 1: 0}
        d0, d1, d2, d3 = cfg.decoder_channels
        ins = (cfg.d_model, d0, d1, d2)
        outs = (d0, d1, d2, d3)
        scales = (8, 4, 2, 1)
        self.decoder = [
            DecoderStage(ins[i] + (skip_channels[scales[i]] if scales[i] in cfg.skip_scales else 0),
                         outs[i], rng, dtype)
            for i in range(4)
        ]
        self.head = Conv2d(d3, cfg.num_classes, 1, rng, padding=0, dtype=dtype)

    @property
    def dtype(self):
        return _DTYPES[self.config.dtype]

    def encode(self, x: Tensor) -> tuple[Tensor, dict]:
        skips = {}
        h = T.relu(self.stem_norm(self.stem(x)))
        skips[2] = h
        h = T.maxpool2d(h, 3, 2, 1)
        for block in self.stage1:
            h = block(h)
        skips[4] = h
        for block in self.stage2:
            h = block(h)
        skips[8] = h
        for block in self.stage3:
            h = block(h)
        return h, skips

    def bottleneck(self, feat: Tensor) -> TokenGrid:
        g = self.projection(feat)
        for pair in self.transformer:
            g = pair(g)
        return TokenGrid(self.final_norm(g.tokens), g.grid)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        expected = (cfg.in_channels, *cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"model expects input [b, {expected[0]}, {expected[1]}, {expected[2]}], "
                                 f"got {x.shape}")
        feat, skips = self.encode(x)
        h = grid_to_map(self.bottleneck(feat))
        for stage, scale in zip(self.decoder, (8, 4, 2, 1)):
            h = stage(h, skips[scale] if scale in cfg.skip_scales else None)
        return self.head(h)


def build(config: SwtrConfig) -> SwtrModel:
    return SwtrModel(config)


def forward(model: SwtrModel, x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    return model(x)


def parameter_count(model: SwtrModel) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_checksum(model: SwtrModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def predict_slices(model: SwtrModel, slices: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Class probabilities for a stack of 2D slices ``[n, H, W]`` -> ``[n, C, H, W]``."""
    out = []
    with no_grad():
        for start in range(0, len(slices), batch_size):
            x = Tensor(slices[start:start + batch_size, None].astype(model.dtype))
            out.append(T.softmax(model(x), axis=1).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes, *model.config.input_size))


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=1).astype(np.uint8)


def predict_mask(model: SwtrModel, volume: VolumeImage, batch_size: int = 16) -> VoxelMask:
    """Segment every axial slice and stack the results into a labelled volume."""
    slices = np.moveaxis(volume.data, 2, 0)
    if slices.shape[1:] != model.config.input_size:
        raise DimensionError(f"volume slices {slices.shape[1:]} do not match model input "
                             f"{model.config.input_size}; resample first")
    labels = labels_from_probs(predict_slices(model, slices, batch_size))
    return VoxelMask(np.moveaxis(labels, 0, 2), volume.spacing)

"""Convolutional autoencoder: multi-branch encoder, deconvolution decoder, branch merging.

Parameters live in a flat name -> Tensor store (``ModelParams``).  Batch-norm
running statistics are stored next to the learnable tensors under the
``.mean`` / ``.var`` suffixes so that checkpoints carry them too.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    batch_norm2d,
    conv2d,
    deconv2d,
    gelu,
    global_avg_pool,
    relu,
    reshape,
)

DOWNSAMPLE = 32  # stem x4, then three x2 stages
BN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    """A block is used in a mode its parameters do not support."""


@dataclass(frozen=True)
class ModelConfig:
    stage_depths: tuple[int, int, int, int] = (3, 3, 9, 3)
    stage_widths: tuple[int, int, int, int] = (256, 512, 1024, 2048)
    width: int = 128
    height: int = 256
    in_channels: int = 3
    activation: str = "gelu"
    mode: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_widths", tuple(int(c) for c in self.stage_widths))
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def grid(self) -> tuple[int, int]:
        """Spatial size (H, W) of the last encoder stage."""
        return self.height // DOWNSAMPLE, self.width // DOWNSAMPLE

    def validate(self) -> None:
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ConfigError("exactly four stages are required")
        if any(d < 1 for d in self.stage_depths) or any(c < 1 for c in self.stage_widths):
            raise ConfigError("stage depths and widths must be positive")
        if self.height % DOWNSAMPLE or self.width % DOWNSAMPLE or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"input {self.width}x{self.height} must be divisible by {DOWNSAMPLE}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mode not in ("train", "inference"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    @classmethod
    def paper(cls, **kw) -> ModelConfig:
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw) -> ModelConfig:
        kw.setdefault("width", 32)
        kw.setdefault("height", 64)
        return cls(stage_depths=(1, 1, 2, 1), stage_widths=(8, 16, 32, 64), **kw)

    @classmethod
    def preset(cls, name: str, **kw) -> ModelConfig:
        if name == "paper":
            return cls.paper(**kw)
        if name == "tiny":
            return cls.tiny(**kw)
        raise ConfigError(f"unknown preset {name!r}")


class ModelParams:
    """Ordered name -> Tensor store plus the config it was built from."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor] | None = None):
        self.config = config
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> OrderedDict[str, Tensor]:
        return OrderedDict((k, t) for k, t in self.tensors.items() if t.requires_grad)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def param_count(self) -> int:
        """Number of learnable scalars (running statistics excluded)."""
        return sum(t.size for k, t in self.tensors.items() if not _is_buffer(k))

    def has_decoder(self) -> bool:
        return any(k.startswith("dec.") for k in self.tensors)

    def copy(self) -> ModelParams:
        return ModelParams(
            self.config,
            OrderedDict(
                (k, Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype)) for k, t in self.tensors.items()
            ),
        )

    def astype(self, dtype) -> ModelParams:
        return ModelParams(
            self.config,
            OrderedDict(
                (k, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, dtype=dtype))
                for k, t in self.tensors.items()
            ),
        )

    def block(self, prefix: str) -> ConvBlockParams:
        return ConvBlockParams.from_store(self.tensors, prefix)

    def encoder_block_prefixes(self) -> list[str]:
        return [
            f"enc.stage{s + 1}.block{k}"
            for s, depth in enumerate(self.config.stage_depths)
            for k in range(depth)
        ]


def _is_buffer(name: str) -> bool:
    return name.endswith(".mean") or name.endswith(".var")


# -- blocks ---------------------------------------------------------------------

@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    mean: Tensor
    var: Tensor

    def __call__(self, x: Tensor, training: bool, momentum: float = 0.1) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.mean.data, self.var.data, training, momentum, BN_EPS)

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) equal to this norm in inference mode."""
        std = np.sqrt(self.var.data.astype(np.float64) + BN_EPS)
        s = self.gamma.data.astype(np.float64) / std
        return s, self.beta.data.astype(np.float64) - self.mean.data.astype(np.float64) * s

    def items(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta), (f"{prefix}.mean", self.mean), (f"{prefix}.var", self.var)]

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> BatchNormParams:
        return cls(
            Tensor(np.ones(channels, dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype)),
            Tensor(np.ones(channels, dtype)),
        )


@dataclass
class ConvBlockParams:
    """One encoder Conv Block: 3x3, 1x1 and identity branches, or their merged 3x3 kernel."""

    main_w: Tensor | None = None
    main_b: Tensor | None = None
    main_bn: BatchNormParams | None = None
    one_w: Tensor | None = None
    one_b: Tensor | None = None
    one_bn: BatchNormParams | None = None
    id_bn: BatchNormParams | None = None
    merged_w: Tensor | None = None
    merged_b: Tensor | None = None
    activation: str = field(default="gelu", compare=False)

    @property
    def mode(self) -> str:
        return "inference" if self.merged_w is not None else "train"

    def items(self, prefix: str) -> list[tuple[str, Tensor]]:
        if self.mode == "inference":
            return [(f"{prefix}.merged_w", self.merged_w), (f"{prefix}.merged_b", self.merged_b)]
        out = [(f"{prefix}.main_w", self.main_w), (f"{prefix}.main_b", self.main_b)]
        out += self.main_bn.items(f"{prefix}.main_bn")
        out += [(f"{prefix}.one_w", self.one_w), (f"{prefix}.one_b", self.one_b)]
        out += self.one_bn.items(f"{prefix}.one_bn")
        if self.id_bn is not None:
            out += self.id_bn.items(f"{prefix}.id_bn")
        return out

    @classmethod
    def from_store(cls, store, prefix: str, activation: str = "gelu") -> ConvBlockParams:
        def bn(name):
            if f"{prefix}.{name}.gamma" not in store:
                return None
            return BatchNormParams(*(store[f"{prefix}.{name}.{k}"] for k in ("gamma", "beta", "mean", "var")))

        if f"{prefix}.merged_w" in store:
            return cls(merged_w=store[f"{prefix}.merged_w"], merged_b=store[f"{prefix}.merged_b"], activation=activation)
        return cls(
            main_w=store[f"{prefix}.main_w"],
            main_b=store[f"{prefix}.main_b"],
            main_bn=bn("main_bn"),
            one_w=store[f"{prefix}.one_w"],
            one_b=store[f"{prefix}.one_b"],
            one_bn=bn("one_bn"),
            id_bn=bn("id_bn"),
            activation=activation,
        )


def _act(x: Tensor, name: str) -> Tensor:
    return gelu(x) if name == "gelu" else relu(x)


def forward_block(
    block: ConvBlockParams, x, mode: str | None = None, training: bool = False, bn_momentum: float = 0.1
) -> Tensor:
    """Train mode sums the three normalized branches; inference mode runs the merged kernel.

    ``training`` selects batch statistics (and updates running statistics) in
    the branch form; it is meaningless for a merged block.
    """
    mode = mode or block.mode
    if mode != block.mode:
        raise StateError(f"block is in {block.mode} mode, asked to run in {mode} mode")
    x = as_tensor(x)
    if mode == "inference":
        if training:
            raise StateError("a merged block cannot be trained")
        return _act(conv2d(x, block.merged_w, block.merged_b, stride=1, pad=1), block.activation)
    y = block.main_bn(conv2d(x, block.main_w, block.main_b, stride=1, pad=1), training, bn_momentum)
    y = add(y, block.one_bn(conv2d(x, block.one_w, block.one_b, stride=1, pad=0), training, bn_momentum))
    if block.id_bn is not None:
        y = add(y, block.id_bn(x, training, bn_momentum))
    return _act(y, block.activation)


def merge_reparam(block: ConvBlockParams) -> ConvBlockParams:
    """Fold every branch's batch-norm into its kernel and sum the branches into one 3x3 conv.

    Computed in float64 and cast back to the block's dtype.
    """
    if block.mode != "train":
        raise StateError("block is already merged")
    for bn in (block.main_bn, block.one_bn, block.id_bn):
        if bn is not None and (bn.mean is None or bn.var is None):
            raise StateError("batch-norm running statistics are missing")
    dtype = block.main_w.dtype
    cout, cin = block.main_w.shape[:2]

    s, t = block.main_bn.fold()
    kernel = block.main_w.data.astype(np.float64) * s[:, None, None, None]
    bias = block.main_b.data.astype(np.float64) * s + t

    s, t = block.one_bn.fold()
    k1 = np.zeros((cout, cin, 3, 3))
    k1[:, :, 1, 1] = block.one_w.data[:, :, 0, 0]
    kernel += k1 * s[:, None, None, None]
    bias += block.one_b.data.astype(np.float64) * s + t

    if block.id_bn is not None:
        if cin != cout:
            raise ShapeError("identity branch needs equal input and output channels")
        s, t = block.id_bn.fold()
        kid = np.zeros((cout, cin, 3, 3))
        kid[np.arange(cout), np.arange(cin), 1, 1] = 1.0
        kernel += kid * s[:, None, None, None]
        bias += t

    return ConvBlockParams(
        merged_w=Tensor(kernel.astype(dtype), requires_grad=True),
        merged_b=Tensor(bias.astype(dtype), requires_grad=True),
        activation=block.activation,
    )


def merge_model(params: ModelParams) -> ModelParams:
    """Inference-mode copy of ``params`` with every encoder block merged."""
    if params.config.mode == "inference":
        raise StateError("model is already merged")
    merged = OrderedDict()
    prefixes = params.encoder_block_prefixes()
    done: set[str] = set()
    for name, t in params.items():
        prefix = name.rsplit(".", 2)[0] if "_bn." in name else name.rsplit(".", 1)[0]
        if prefix in prefixes:
            if prefix not in done:
                blk = merge_reparam(ConvBlockParams.from_store(params.tensors, prefix, params.config.activation))
                merged.update(blk.items(prefix))
                done.add(prefix)
            continue
        merged[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype)
    return ModelParams(replace(params.config, mode="inference"), merged)


# -- construction -----------------------------------------------------------------

def _he(rng, shape, fan_in, dtype, gain=2.0) -> Tensor:
    return Tensor((rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype), requires_grad=True)


def _zeros(n, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype), requires_grad=True)


def build_model(
    config: ModelConfig,
    seed: int = 0,
    parts: tuple[str, ...] = ("encoder", "decoder"),
    dtype=np.float32,
) -> ModelParams:
    """He-initialized parameters, deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    p: OrderedDict[str, Tensor] = OrderedDict()
    widths, depths = config.stage_widths, config.stage_depths
    cin = config.in_channels

    if "encoder" in parts:
        p["enc.stem.w"] = _he(rng, (widths[0], cin, 4, 4), cin * 16, dtype)
        p["enc.stem.b"] = _zeros(widths[0], dtype)
        for s in range(4):
            c = widths[s]
            if s > 0:
                p[f"enc.down{s + 1}.w"] = _he(rng, (c, widths[s - 1], 2, 2), widths[s - 1] * 4, dtype)
                p[f"enc.down{s + 1}.b"] = _zeros(c, dtype)
            for k in range(depths[s]):
                prefix = f"enc.stage{s + 1}.block{k}"
                if config.mode == "inference":
                    p[f"{prefix}.merged_w"] = _he(rng, (c, c, 3, 3), c * 9, dtype)
                    p[f"{prefix}.merged_b"] = _zeros(c, dtype)
                    continue
                blk = ConvBlockParams(
                    main_w=_he(rng, (c, c, 3, 3), c * 9, dtype),
                    main_b=_zeros(c, dtype),
                    main_bn=BatchNormParams.identity(c, dtype),
                    one_w=_he(rng, (c, c, 1, 1), c, dtype),
                    one_b=_zeros(c, dtype),
                    one_bn=BatchNormParams.identity(c, dtype),
                    id_bn=BatchNormParams.identity(c, dtype),
                )
                p.update(blk.items(prefix))

    if "decoder" in parts:
        gh, gw = config.grid
        c4 = widths[3]
        p["dec.proj.w"] = _he(rng, (config.embed_dim, c4, gh, gw), config.embed_dim, dtype)
        p["dec.proj.b"] = _zeros(c4, dtype)
        for s in reversed(range(4)):
            c = widths[s]
            for k in range(depths[s]):
                prefix = f"dec.stage{s + 1}.block{k}"
                p[f"{prefix}.w"] = _he(rng, (c, c, 3, 3), c * 9, dtype)
                p[f"{prefix}.b"] = _zeros(c, dtype)
                p.update(BatchNormParams.identity(c, dtype).items(f"{prefix}.bn"))
            if s > 0:
                # stride-2 2x2 deconv: every output pixel sees exactly c inputs
                p[f"dec.up{s + 1}.w"] = _he(rng, (c, widths[s - 1], 2, 2), c, dtype)
                p[f"dec.up{s + 1}.b"] = _zeros(widths[s - 1], dtype)
        p["dec.head.w"] = _he(rng, (widths[0], cin, 4, 4), widths[0], dtype, gain=1.0)
        p["dec.head.b"] = _zeros(cin, dtype)

    return ModelParams(config, p)


# -- forward passes -----------------------------------------------------------------

def _check_images(params: ModelParams, images: Tensor) -> None:
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ShapeError(
            f"expected images [B,{cfg.in_channels},{cfg.height},{cfg.width}], got {images.shape}"
        )


def encode_map(params: ModelParams, images, training: bool = False, bn_momentum: float = 0.1) -> Tensor:
    """Encoder feature map before pooling: [B, C4, H/32, W/32]."""
    images = as_tensor(images)
    _check_images(params, images)
    cfg = params.config
    x = conv2d(images, params["enc.stem.w"], params["enc.stem.b"], stride=4)
    for s in range(4):
        if s > 0:
            x = conv2d(x, params[f"enc.down{s + 1}.w"], params[f"enc.down{s + 1}.b"], stride=2)
        for k in range(cfg.stage_depths[s]):
            blk = ConvBlockParams.from_store(params.tensors, f"enc.stage{s + 1}.block{k}", cfg.activation)
            x = forward_block(blk, x, training=training, bn_momentum=bn_momentum)
    return x


def encode(params: ModelParams, images, training: bool = False, bn_momentum: float = 0.1) -> Tensor:
    """[B, 3, H, W] images -> [B, D] pooled embeddings."""
    return global_avg_pool(encode_map(params, images, training, bn_momentum))


def decode(params: ModelParams, features, training: bool = False, bn_momentum: float = 0.1) -> Tensor:
    """[B, D] features -> [B, 3, H, W] reconstruction (no output activation)."""
    cfg = params.config
    features = as_tensor(features)
    if features.ndim != 2 or features.shape[1] != cfg.embed_dim:
        raise ShapeError(f"decode expects [B, {cfg.embed_dim}], got {features.shape}")
    if "dec.proj.w" not in params:
        raise StateError("model has no decoder parameters")
    x = reshape(features, (features.shape[0], cfg.embed_dim, 1, 1))
    x = deconv2d(x, params["dec.proj.w"], params["dec.proj.b"])
    for s in reversed(range(4)):
        for k in range(cfg.stage_depths[s]):
            prefix = f"dec.stage{s + 1}.block{k}"
            bn = BatchNormParams(*(params[f"{prefix}.bn.{n}"] for n in ("gamma", "beta", "mean", "var")))
            y = conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], pad=1)
            x = _act(bn(y, training, bn_momentum), cfg.activation)
        if s > 0:
            x = deconv2d(x, params[f"dec.up{s + 1}.w"], params[f"dec.up{s + 1}.b"], stride=2)
    return deconv2d(x, params["dec.head.w"], params["dec.head.b"], stride=4)


def reconstruct(params: ModelParams, images, training: bool = False, bn_momentum: float = 0.1) -> Tensor:
    return decode(params, encode(params, images, training, bn_momentum), training, bn_momentum)


def recalibrate_bn(params: ModelParams, images, decoder: bool = False) -> None:
    """Replace running statistics by the exact statistics of ``images`` (one full-batch pass)."""
    if decoder:
        reconstruct(params, images, training=True, bn_momentum=1.0)
    else:
        encode(params, images, training=True, bn_momentum=1.0)


def trace_shapes(config: ModelConfig, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Analytic (layer, output shape) trace of encoder then decoder, without running them."""
    h, w = config.height // 4, config.width // 4
    widths = config.stage_widths
    out = [("enc.stem", (batch, widths[0], h, w))]
    for s in range(1, 4):
        h, w = h // 2, w // 2
        out.append((f"enc.stage{s + 1}", (batch, widths[s], h, w)))
    out.append(("enc.pool", (batch, config.embed_dim)))
    gh, gw = config.grid
    out.append(("dec.proj", (batch, widths[3], gh, gw)))
    for s in range(3, 0, -1):
        h, w = h * 2, w * 2
        out.append((f"dec.up{s + 1}", (batch, widths[s - 1], h, w)))
    out.append(("dec.head", (batch, config.in_channels, h * 4, w * 4)))
    return out

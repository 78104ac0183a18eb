"""LiverFormer (3D CNN encoder, Transformer over patch tokens, U-shaped decoder) and a 3D U-Net baseline.

Both models are functional: a parameter registry plus forward functions over
autodiff tensors.  Inputs are single-channel images shaped [1, D, H, W];
outputs are class logits [classes, D, H, W].

Geometry for the defaults (encoder strides 1, 2, 2 and patch size 2): a
16 x 64 x 64 input yields a 4 x 16 x 16 encoder map, a 2 x 8 x 8 patch grid
and N = 128 tokens.  The decoder unpatchifies tokens back onto the encoder
grid (d / P^3 channels), then for each encoder stage from deepest to
shallowest upsamples by that stage's stride, concatenates the stage input
(the skip) and applies conv-norm-ReLU.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Parameter, ShapeMismatch, Tensor, no_grad, ops
from .autodiff.checkpoint import load_params, save_params
from .volume_io import NUM_CLASSES, LabelVolume


@dataclass
class LiverFormerConfig:
    in_channels: int = 1
    classes: int = NUM_CLASSES
    encoder_channels: list = field(default_factory=lambda: [8, 16, 32])
    encoder_strides: list = field(default_factory=lambda: [1, 2, 2])
    patch_size: int = 2
    hidden_dim: int = 64
    transformer_layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    input_dims: tuple = (16, 64, 64)

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.encoder_strides = [int(s) for s in self.encoder_strides]
        self.input_dims = tuple(int(n) for n in self.input_dims)
        if len(self.encoder_channels) != len(self.encoder_strides) or not self.encoder_channels:
            raise ValueError("encoder_channels and encoder_strides must be equal-length and nonempty")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % self.patch_size ** 3:
            raise ValueError("hidden_dim must be divisible by patch_size**3 to unpatchify tokens")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        enc = self.encoder_dims()
        if any(n % self.patch_size for n in enc):
            raise ValueError(f"encoder output dims {enc} not divisible by patch size {self.patch_size}")

    @property
    def total_stride(self):
        return math.prod(self.encoder_strides)

    def encoder_dims(self, dims=None):
        dims = tuple(dims or self.input_dims)
        if any(n % self.total_stride for n in dims):
            raise ShapeMismatch(f"input dims {dims} not divisible by total stride {self.total_stride}")
        return tuple(n // self.total_stride for n in dims)

    def num_tokens(self, dims=None):
        return math.prod(n // self.patch_size for n in self.encoder_dims(dims))

    def to_dict(self):
        return asdict(self)


class ModelParams(OrderedDict):
    """name -> Parameter registry; each parameter appears exactly once."""

    def add(self, name, data, dtype):
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        self[name] = Parameter(np.asarray(data, dtype=dtype), name)
        return self[name]

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def arrays(self):
        return OrderedDict((k, p.data) for k, p in self.items())

    def astype(self, dtype):
        out = ModelParams()
        for k, p in self.items():
            out[k] = Parameter(p.data.astype(dtype), k)
        return out

    def load_arrays(self, arrays):
        missing = set(self) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.items():
            if arrays[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: expected {p.shape}, got {arrays[k].shape}")
            p.data = np.asarray(arrays[k], dtype=p.dtype).copy()

    def count(self):
        return sum(p.size for p in self.values())


# -- initialisation ------------------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv(params, rng, name, c_in, c_out, k, dtype):
    params.add(f"{name}.weight", _uniform(rng, (c_out, c_in, k, k, k), c_in * k ** 3, dtype), dtype)
    params.add(f"{name}.bias", np.zeros(c_out), dtype)


def _norm(params, name, c, dtype):
    params.add(f"{name}.gamma", np.ones(c), dtype)
    params.add(f"{name}.beta", np.zeros(c), dtype)


def _linear(params, rng, name, n_in, n_out, dtype, bias=True):
    params.add(f"{name}.weight", _uniform(rng, (n_in, n_out), n_in, dtype), dtype)
    if bias:
        params.add(f"{name}.bias", np.zeros(n_out), dtype)


def _init_encoder(params, rng, prefix, cfg, dtype):
    c_in = cfg.in_channels
    for i, (c, s) in enumerate(zip(cfg.encoder_channels, cfg.encoder_strides)):
        name = f"{prefix}.encoder.stage{i}"
        _conv(params, rng, f"{name}.conv1", c_in, c, 3, dtype)
        _norm(params, f"{name}.norm1", c, dtype)
        _conv(params, rng, f"{name}.conv2", c, c, 3, dtype)
        _norm(params, f"{name}.norm2", c, dtype)
        if c_in != c or s != 1:
            _conv(params, rng, f"{name}.shortcut", c_in, c, 1, dtype)
        c_in = c


def _decoder_widths(cfg):
    # stage i output width: channels of the next-shallower stage, stage 0 keeps its own
    chans = cfg.encoder_channels
    return [chans[max(i - 1, 0)] for i in range(len(chans))]


def _init_decoder(params, rng, prefix, cfg, c_start, dtype):
    skips = [cfg.in_channels] + cfg.encoder_channels[:-1]
    widths = _decoder_widths(cfg)
    c_in = c_start
    for i in reversed(range(len(cfg.encoder_channels))):
        name = f"{prefix}.decoder.stage{i}"
        _conv(params, rng, f"{name}.conv", c_in + skips[i], widths[i], 3, dtype)
        _norm(params, f"{name}.norm", widths[i], dtype)
        c_in = widths[i]
    _conv(params, rng, f"{prefix}.head", c_in, cfg.classes, 1, dtype)


def init_liverformer(cfg: LiverFormerConfig, seed=0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    p = "liverformer"
    _init_encoder(params, rng, p, cfg, dtype)
    d = cfg.hidden_dim
    token_width = cfg.patch_size ** 3 * cfg.encoder_channels[-1]
    _linear(params, rng, f"{p}.embed.proj", token_width, d, dtype, bias=False)
    params.add(f"{p}.embed.pos", np.zeros((cfg.num_tokens(), d)), dtype)
    for layer in range(cfg.transformer_layers):
        name = f"{p}.transformer.layer{layer}"
        _norm(params, f"{name}.ln1", d, dtype)
        for w in ("wq", "wk", "wv", "wo"):
            _linear(params, rng, f"{name}.attn.{w}", d, d, dtype, bias=False)
        _norm(params, f"{name}.ln2", d, dtype)
        _linear(params, rng, f"{name}.mlp.fc1", d, d * cfg.mlp_ratio, dtype)
        _linear(params, rng, f"{name}.mlp.fc2", d * cfg.mlp_ratio, d, dtype)
    _init_decoder(params, rng, p, cfg, d // cfg.patch_size ** 3, dtype)
    return params


def init_unet(cfg: LiverFormerConfig, seed=0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    _init_encoder(params, rng, "unet", cfg, dtype)
    _init_decoder(params, rng, "unet", cfg, cfg.encoder_channels[-1], dtype)
    return params


# -- forward pieces ------------------------------------------------------------------

def residual_block(x, params, name, stride):
    h = ops.conv3d(x, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"], stride=stride, pad=1)
    h = ops.relu(ops.instance_norm(h, params[f"{name}.norm1.gamma"], params[f"{name}.norm1.beta"]))
    h = ops.conv3d(h, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"], stride=1, pad=1)
    h = ops.instance_norm(h, params[f"{name}.norm2.gamma"], params[f"{name}.norm2.beta"])
    if f"{name}.shortcut.weight" in params:
        short = ops.conv3d(x, params[f"{name}.shortcut.weight"], params[f"{name}.shortcut.bias"],
                           stride=stride, pad=0)
    else:
        short = x
    return ops.relu(ops.add(h, short))


def encoder_forward(x, params, cfg, prefix="liverformer"):
    """Residual stages; returns (final map, [input of each stage])."""
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeMismatch(f"encoder expects [{cfg.in_channels}, D, H, W], got {x.shape}")
    cfg.encoder_dims(x.shape[1:])
    skips = []
    h = x
    for i, s in enumerate(cfg.encoder_strides):
        skips.append(h)
        h = residual_block(h, params, f"{prefix}.encoder.stage{i}", s)
    return h, skips


def patchify_embed(features, params, cfg, prefix="liverformer"):
    """z0 = patches @ H + H_pos."""
    tokens = ops.patchify(features, cfg.patch_size)
    proj = ops.linear(tokens, params[f"{prefix}.embed.proj.weight"])
    pos = params[f"{prefix}.embed.pos"]
    if pos.shape != proj.shape:
        raise ShapeMismatch(f"positional table {pos.shape} does not match tokens {proj.shape}")
    return ops.add(proj, pos)


def mlp(z, params, name):
    h = ops.gelu(ops.linear(z, params[f"{name}.fc1.weight"], params[f"{name}.fc1.bias"]))
    return ops.linear(h, params[f"{name}.fc2.weight"], params[f"{name}.fc2.bias"])


def transformer_layer(z, params, name, heads):
    """Pre-norm residual attention then pre-norm residual MLP."""
    if z.ndim != 2:
        raise ShapeMismatch(f"transformer layer expects [N, d], got {z.shape}")
    h = ops.layer_norm(z, params[f"{name}.ln1.gamma"], params[f"{name}.ln1.beta"])
    a = ops.multi_head_attention(h, heads, *(params[f"{name}.attn.{w}.weight"] for w in ("wq", "wk", "wv", "wo")))
    z_mid = ops.add(a, z)
    h = ops.layer_norm(z_mid, params[f"{name}.ln2.gamma"], params[f"{name}.ln2.beta"])
    return ops.add(mlp(h, params, f"{name}.mlp"), z_mid)


def transformer_forward(z, params, cfg, prefix="liverformer"):
    for layer in range(cfg.transformer_layers):
        z = transformer_layer(z, params, f"{prefix}.transformer.layer{layer}", cfg.heads)
    return z


def decoder_forward(start, skips, params, cfg, prefix="liverformer"):
    """Upsample by each stage's stride, fuse its skip, conv-norm-ReLU; 1x1x1 head to logits."""
    h = start
    for i in reversed(range(len(cfg.encoder_strides))):
        h = ops.upsample_trilinear(h, cfg.encoder_strides[i])
        if h.shape[1:] != skips[i].shape[1:]:
            raise ShapeMismatch(f"decoder stage {i}: {h.shape} cannot fuse skip {skips[i].shape}")
        h = ops.concat([h, skips[i]], axis=0)
        name = f"{prefix}.decoder.stage{i}"
        h = ops.conv3d(h, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"], stride=1, pad=1)
        h = ops.relu(ops.instance_norm(h, params[f"{name}.norm.gamma"], params[f"{name}.norm.beta"]))
    return ops.conv3d(h, params[f"{prefix}.head.weight"], params[f"{prefix}.head.bias"])


def tokens_to_map(tokens, cfg, enc_dims):
    grid = tuple(n // cfg.patch_size for n in enc_dims)
    if tokens.shape[0] != math.prod(grid):
        raise ShapeMismatch(f"{tokens.shape[0]} tokens do not match patch grid {grid}")
    return ops.unpatchify(tokens, cfg.patch_size, grid)


def _as_input(image, dtype):
    if isinstance(image, Tensor):
        return image
    arr = np.asarray(getattr(image, "data", image), dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def liverformer_forward(image, params, cfg):
    x = _as_input(image, next(iter(params.values())).dtype)
    feat, skips = encoder_forward(x, params, cfg)
    z = transformer_forward(patchify_embed(feat, params, cfg), params, cfg)
    return decoder_forward(tokens_to_map(z, cfg, feat.shape[1:]), skips, params, cfg)


def unet_baseline_forward(image, params, cfg):
    x = _as_input(image, next(iter(params.values())).dtype)
    feat, skips = encoder_forward(x, params, cfg, prefix="unet")
    return decoder_forward(feat, skips, params, cfg, prefix="unet")


def class_probabilities(logits):
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(data - data.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def argmax_labels(logits):
    """Per-voxel argmax over classes; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=0).astype(np.uint8)


class SegmentationModel:
    """Config + parameters + forward function, with prediction and checkpoint I/O."""

    kind = "liverformer"

    def __init__(self, cfg: LiverFormerConfig, params: ModelParams | None = None, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else self.init_params(cfg, seed, dtype)

    def init_params(self, cfg, seed, dtype):
        return init_liverformer(cfg, seed, dtype)

    def forward(self, image):
        return liverformer_forward(image, self.params, self.cfg)

    def predict(self, image) -> LabelVolume:
        with no_grad():
            logits = self.forward(image)
        labels = argmax_labels(logits)
        spacing = getattr(image, "spacing", (1.0, 1.0, 1.0))
        origin = getattr(image, "origin", (0.0, 0.0, 0.0))
        return LabelVolume(labels, spacing, origin)

    def save(self, directory, extra=None):
        meta = {"model": self.kind, "config": self.cfg.to_dict()}
        meta.update(extra or {})
        save_params(self.params.arrays(), directory, meta)

    @staticmethod
    def load(directory, dtype=np.float32):
        arrays, manifest = load_params(directory)
        cfg = LiverFormerConfig(**manifest["config"])
        cls = UNet3D if manifest.get("model") == "unet" else LiverFormer
        model = cls(cfg, dtype=dtype)
        model.params.load_arrays(arrays)
        return model


class LiverFormer(SegmentationModel):
    kind = "liverformer"


class UNet3D(SegmentationModel):
    kind = "unet"

    def init_params(self, cfg, seed, dtype):
        return init_unet(cfg, seed, dtype)

    def forward(self, image):
        return unet_baseline_forward(image, self.params, self.cfg)


def build_model(kind, cfg, seed=0, dtype=np.float32):
    if kind == "liverformer":
        return LiverFormer(cfg, seed=seed, dtype=dtype)
    if kind == "unet":
        return UNet3D(cfg, seed=seed, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}")

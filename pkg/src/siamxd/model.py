"""Dual-branch Siamese classifier with a single shared parameter set.

The feature map ``f`` is an extractor (MLP on flattened pixels, or an
optional conv layer followed by the MLP) plus two fully connected branch
layers. The prediction head ``g`` is three fully connected layers ending in
one sigmoid unit. Source and target batches go through the very same
``Tensor`` objects, so weight sharing cannot drift.
"""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from siamxd import autodiff as ad
from siamxd.autodiff import DimensionError, Tensor


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``input_dim`` is the flattened pixel count for the MLP extractor, or an
    ``(H, W)`` pair when ``conv_channels`` enables the convolutional front end.
    """

    input_dim: object = 256
    extractor_hidden: tuple = (256, 64)
    branch_hidden: int = 32
    embed_dim: int = 16
    head_hidden: tuple = (8, 4)
    conv_channels: int = 0
    conv_kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extractor_hidden", tuple(int(w) for w in self.extractor_hidden))
        object.__setattr__(self, "head_hidden", tuple(int(w) for w in self.head_hidden))
        if isinstance(self.input_dim, (list, tuple)):
            object.__setattr__(self, "input_dim", tuple(int(v) for v in self.input_dim))
        self.validate()

    def validate(self):
        widths = list(self.extractor_hidden) + [self.branch_hidden, self.embed_dim] + list(self.head_hidden)
        if any(w < 1 for w in widths):
            raise ConfigError(f"all layer widths must be >= 1, got {widths}")
        if len(self.head_hidden) != 2:
            raise ConfigError(f"head_hidden needs exactly two widths, got {self.head_hidden}")
        if self.conv_channels < 0:
            raise ConfigError("conv_channels must be >= 0")
        if self.conv_channels:
            if not (isinstance(self.input_dim, tuple) and len(self.input_dim) == 2):
                raise ConfigError("conv mode needs input_dim=(H, W)")
            h, w = self.input_dim
            if self.conv_kernel < 1 or self.conv_kernel > min(h, w):
                raise ConfigError(f"conv_kernel {self.conv_kernel} does not fit input {self.input_dim}")
        elif self.flat_input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")

    @property
    def flat_input_dim(self):
        if isinstance(self.input_dim, tuple):
            return int(np.prod(self.input_dim))
        return int(self.input_dim)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layer_shapes(config):
    """Ordered ``(name, shape)`` for every parameter implied by ``config``."""
    shapes = []
    width = config.flat_input_dim
    if config.conv_channels:
        h, w = config.input_dim
        k, c = config.conv_kernel, config.conv_channels
        shapes += [("conv.W", (c, 1, k, k)), ("conv.b", (c,))]
        width = c * (h - k + 1) * (w - k + 1)
    for i, out in enumerate(config.extractor_hidden):
        shapes += [(f"extractor.{i}.W", (width, out)), (f"extractor.{i}.b", (out,))]
        width = out
    for i, out in enumerate((config.branch_hidden, config.embed_dim)):
        shapes += [(f"branch.{i}.W", (width, out)), (f"branch.{i}.b", (out,))]
        width = out
    for i, out in enumerate(tuple(config.head_hidden) + (1,)):
        shapes += [(f"head.{i}.W", (width, out)), (f"head.{i}.b", (out,))]
        width = out
    return shapes


def parameter_count(config):
    return int(sum(int(np.prod(s)) for _, s in layer_shapes(config)))


@dataclass
class SiameseModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        """Copy of all parameter arrays, keyed by name."""
        return {k: p.data.copy() for k, p in self.params.items()}

    def embed(self, batch, domain=None):
        """The feature map ``f``: [B, input_dim] -> [B, embed_dim]."""
        return embed(self, batch, domain)

    def predict(self, features):
        """The prediction head ``g``: [B, embed_dim] -> [B, 1] in (0, 1)."""
        return predict(self, features)

    def forward(self, batch):
        return predict(self, embed(self, batch))


def init_params(config):
    """Glorot-uniform weights, zero biases, fully determined by ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in layer_shapes(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            if len(shape) == 4:  # conv kernel [out, in, k, k]
                receptive = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            else:
                fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-a, a, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return SiameseModel(config=config, params=params)


def _dense_stack(x, params, prefix, n_layers, final_relu):
    for i in range(n_layers):
        x = ad.affine(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < n_layers - 1 or final_relu:
            x = ad.relu(x)
    return x


def embed(model, batch, domain=None):
    """Apply ``f``. ``domain`` is accepted for call-site clarity and ignored:
    source and target batches share every parameter."""
    cfg, p = model.config, model.params
    x = ad.as_tensor(batch)
    if x.data.ndim == 3:  # [B, H, W] images
        x = ad.reshape(x, (x.shape[0], -1))
    if x.data.ndim != 2 or x.shape[1] != cfg.flat_input_dim:
        raise DimensionError(f"batch shape {x.shape} does not match input_dim {cfg.input_dim}")
    if cfg.conv_channels:
        h, w = cfg.input_dim
        x = ad.reshape(x, (x.shape[0], 1, h, w))
        x = ad.relu(ad.add_channel_bias(ad.conv2d(x, p["conv.W"]), p["conv.b"]))
        x = ad.reshape(x, (x.shape[0], -1))
    x = _dense_stack(x, p, "extractor", len(cfg.extractor_hidden), final_relu=True)
    return _dense_stack(x, p, "branch", 2, final_relu=False)


def predict(model, features):
    f = ad.as_tensor(features)
    if f.data.ndim != 2 or f.shape[1] != model.config.embed_dim:
        raise DimensionError(f"features shape {f.shape} does not match embed_dim {model.config.embed_dim}")
    return ad.sigmoid(_dense_stack(f, model.params, "head", 3, final_relu=False))


# --- checkpoint ---------------------------------------------------------------
#
# magic b"SXDCKPT\0" | u32 version | u32 header_len | header JSON (utf-8)
# then, per parameter in header["params"] order:
#   float64 little-endian values, row-major, count = prod(shape)

CHECKPOINT_MAGIC = b"SXDCKPT\0"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(raw)), raw]
    parts += [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params.values()]
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a siamxd checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    offset = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return SiameseModel(config=config, params=params)

"""Encoder, stacked channel attention and output head producing place descriptors."""

from __future__ import annotations

import copy
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import ops
from .exceptions import ConfigError, DimensionError, ParseError
from .projection import ProjectionConfig, RangeImage, project
from .tensor import Parameter, Tensor, get_dtype, no_grad

WIDTH_PRESETS = {
    "full": ((32, 64, 128, 256, 512), (1, 2, 8, 8, 4)),
    "toy": ((4, 8, 16, 32, 64), (1, 1, 1, 1, 1)),
}
CHECKPOINT_MAGIC = b"ADLW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture ``E{encoder_depth}A{attention_depth}``.

    ``widths``/``blocks`` default to the first ``encoder_depth`` entries of
    the chosen ``preset``.  The descriptor length is
    ``input_height * (descriptor_dim // input_height)``; the head pools the
    width down to ``descriptor_dim // input_height`` columns.
    """

    encoder_depth: int = 3
    attention_depth: int = 1
    preset: str = "full"
    widths: tuple = ()
    blocks: tuple = ()
    input_height: int = 64
    input_width: int = 1024
    descriptor_dim: int = 1024
    leaky_slope: float = 0.1

    def __post_init__(self):
        if not 1 <= self.encoder_depth <= 5:
            raise ConfigError(f"encoder_depth must be in 1..5, got {self.encoder_depth}")
        if not 0 <= self.attention_depth <= 4:
            raise ConfigError(f"attention_depth must be in 0..4, got {self.attention_depth}")
        if self.preset not in WIDTH_PRESETS:
            raise ConfigError(f"unknown width preset {self.preset!r}")
        pw, pb = WIDTH_PRESETS[self.preset]
        if not self.widths:
            object.__setattr__(self, "widths", tuple(pw[: self.encoder_depth]))
        if not self.blocks:
            object.__setattr__(self, "blocks", tuple(pb[: self.encoder_depth]))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not len(self.widths) == len(self.blocks) == self.encoder_depth:
            raise ConfigError(
                f"need {self.encoder_depth} widths and blocks, got {len(self.widths)} and {len(self.blocks)}"
            )
        if min(self.widths) < 1 or min(self.blocks) < 0:
            raise ConfigError("widths must be >= 1 and blocks >= 0")
        if self.input_width % (2**self.encoder_depth):
            raise ConfigError(
                f"input width {self.input_width} is not divisible by 2**{self.encoder_depth}"
            )
        if self.descriptor_dim % self.input_height:
            raise ConfigError(
                f"descriptor_dim {self.descriptor_dim} is not a multiple of height {self.input_height}"
            )
        if not 1 <= self.pooled_width <= self.feature_width:
            raise ConfigError(
                f"descriptor needs {self.pooled_width} pooled columns but the encoder emits {self.feature_width}"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    @property
    def feature_width(self):
        return self.input_width // 2**self.encoder_depth

    @property
    def pooled_width(self):
        return self.descriptor_dim // self.input_height

    @property
    def channels(self):
        return self.widths[-1]

    @property
    def name(self):
        return f"E{self.encoder_depth}A{self.attention_depth}"

    def to_text(self):
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append(f"{f.name}={value}")
        return "\n".join(out)

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in names:
                raise ConfigError(f"unknown model config key {key!r}")
            if key in ("widths", "blocks"):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v)
            elif key == "preset":
                kwargs[key] = value
            elif key == "leaky_slope":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class Descriptor:
    values: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values).reshape(-1)

    def __len__(self):
        return len(self.values)


class ModelState:
    """All trainable parameters, batch-norm running statistics and the config."""

    def __init__(self, config, parameters, running, seed=0):
        self.config = config
        self.parameters = parameters
        self.running = running
        self.seed = seed
        self.training = False

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __getitem__(self, name):
        return self.parameters[name]

    def named_parameters(self):
        return list(self.parameters.items())

    def parameter_list(self):
        return list(self.parameters.values())

    def gammas(self):
        return {n: float(p.data) for n, p in self.parameters.items() if n.endswith(".gamma")}

    def copy(self):
        return copy.deepcopy(self)

    def expected_names(self):
        return set(parameter_shapes(self.config)) | set(buffer_shapes(self.config))

    def buffers(self):
        out = OrderedDict()
        for prefix, stats in self.running.items():
            out[f"{prefix}.running_mean"] = stats.mean
            out[f"{prefix}.running_var"] = stats.var
        return out


def _conv_specs(config):
    """Yield (prefix, c_in, c_out, kernel) for every conv→bn→act unit."""
    c_in = 5
    for i, (width, blocks) in enumerate(zip(config.widths, config.blocks)):
        base = f"encoder.layer{i + 1}"
        yield f"{base}.down", c_in, width, 3
        hidden = max(1, width // 2)
        for j in range(blocks):
            yield f"{base}.res{j + 1}.conv1", width, hidden, 1
            yield f"{base}.res{j + 1}.conv2", hidden, width, 3
        c_in = width


def parameter_shapes(config):
    shapes = OrderedDict()
    for prefix, c_in, c_out, k in _conv_specs(config):
        shapes[f"{prefix}.weight"] = (c_out, c_in, k, k)
        shapes[f"{prefix}.bn.scale"] = (c_out,)
        shapes[f"{prefix}.bn.shift"] = (c_out,)
    c = config.channels
    for k in range(config.attention_depth):
        base = f"attention.layer{k + 1}"
        for part in ("key", "query", "value"):
            shapes[f"{base}.{part}.weight"] = (c, c, 1, 1)
            shapes[f"{base}.{part}.bias"] = (c,)
        shapes[f"{base}.gamma"] = ()
    shapes["head.norm.weight"] = (config.descriptor_dim,)
    shapes["head.norm.bias"] = (config.descriptor_dim,)
    return shapes


def buffer_shapes(config):
    shapes = OrderedDict()
    for prefix, _, c_out, _ in _conv_specs(config):
        shapes[f"{prefix}.bn.running_mean"] = (c_out,)
        shapes[f"{prefix}.bn.running_var"] = (c_out,)
    return shapes


def init_model(config, seed=0):
    """Seeded initialization.

    Conv weights and attention maps are uniform in ``+-sqrt(1/fan_in)``;
    batch-norm and layer-norm affines start at identity and every attention
    gate ``gamma`` at zero.  Encoder parameters are drawn before attention
    parameters, so configs sharing an encoder share its weights.
    """
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    params = OrderedDict()
    running = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(1.0 / fan_in)
            value = rng.uniform(-bound, bound, shape)
        elif name.endswith("key.bias") or name.endswith("query.bias") or name.endswith("value.bias"):
            bound = np.sqrt(1.0 / shape[0])
            value = rng.uniform(-bound, bound, shape)
        elif name.endswith(".scale") or name == "head.norm.weight":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Parameter(value, name, dtype=dtype)
    for prefix, _, c_out, _ in _conv_specs(config):
        running[f"{prefix}.bn"] = ops.RunningStats.fresh(c_out, dtype)
    return ModelState(config, params, running, seed)


def _image_tensor(image, state):
    if isinstance(image, RangeImage):
        image = image.data
    if isinstance(image, Tensor):
        return image
    return Tensor(np.asarray(image), dtype=get_dtype())


def _unit(x, state, prefix, stride=(1, 1)):
    w = state[f"{prefix}.weight"]
    k = w.shape[-1]
    x = ops.conv2d(x, w, None, stride=stride, padding=(k // 2, k // 2))
    x = ops.batch_norm(
        x,
        state[f"{prefix}.bn.scale"],
        state[f"{prefix}.bn.shift"],
        state.running[f"{prefix}.bn"],
        training=state.training,
    )
    return ops.leaky_relu(x, state.config.leaky_slope)


def encoder_forward(image, state):
    """Range image ``[5, h, w]`` (or a batch) to features ``[c, h, w / 2**x]``."""
    cfg = state.config
    x = _image_tensor(image, state)
    expected = (5, cfg.input_height, cfg.input_width)
    if tuple(x.shape[-3:]) != expected:
        raise DimensionError(f"image shape {x.shape[-3:]} does not match model input {expected}")
    for i, blocks in enumerate(cfg.blocks):
        base = f"encoder.layer{i + 1}"
        x = _unit(x, state, f"{base}.down", stride=(1, 2))
        for j in range(blocks):
            skip = x
            x = _unit(x, state, f"{base}.res{j + 1}.conv1")
            x = _unit(x, state, f"{base}.res{j + 1}.conv2")
            x = x + skip
    return x


def attention_layer_forward(x, wk, bk, wq, bq, wv, bv, gamma, return_map=False):
    """Channel self-attention with a gated residual.

    With ``X`` reshaped to ``[c, n]``: ``A = softmax_rows(Q K^T)`` is
    ``[c, c]`` and the output is ``X + gamma * A V`` in the input's shape.
    """
    shape = x.shape
    c = shape[-3]
    n = shape[-2] * shape[-1]
    flat = shape[:-3] + (c, n)
    k = ops.conv2d(x, wk, bk).reshape(flat)
    q = ops.conv2d(x, wq, bq).reshape(flat)
    v = ops.conv2d(x, wv, bv).reshape(flat)
    attn = ops.softmax_rows(ops.matmul(q, k.swap_last()))
    y = x + gamma * ops.matmul(attn, v).reshape(shape)
    return (y, attn) if return_map else y


def attention_params(state, index):
    base = f"attention.layer{index}"
    return tuple(
        state[f"{base}.{part}.{kind}"]
        for part in ("key", "query", "value")
        for kind in ("weight", "bias")
    ) + (state[f"{base}.gamma"],)


def attention_network_forward(x, state):
    for k in range(state.config.attention_depth):
        x = attention_layer_forward(x, *attention_params(state, k + 1))
    return x


def output_head(features, state):
    """Width pool, channel max-pool, flatten and layer-normalize to length ``m``."""
    cfg = state.config
    if features.shape[-1] < cfg.pooled_width:
        raise ConfigError(f"feature width {features.shape[-1]} < pooled width {cfg.pooled_width}")
    x = ops.adaptive_max_pool_width(features, cfg.pooled_width)
    x = ops.max_pool_over_channels(x)
    x = ops.flatten(x, start_axis=x.ndim - 2)
    return ops.layer_normalize(x, state["head.norm.weight"], state["head.norm.bias"])


def forward(images, state):
    """Full network on a ``[5, h, w]`` image or ``[N, 5, h, w]`` batch."""
    x = encoder_forward(images, state)
    x = attention_network_forward(x, state)
    return output_head(x, state)


def describe_images(images, state, batch_size=32):
    """Descriptors ``[N, m]`` for a stack of range images (inference mode)."""
    images = np.asarray(images)
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(Tensor(images[start : start + batch_size]), state).data)
    if not out:
        return np.zeros((0, state.config.descriptor_dim))
    return np.concatenate(out)


def describe(cloud, state, projcfg=None):
    """Project a cloud and run the network: one :class:`Descriptor`."""
    cfg = state.config
    projcfg = projcfg or ProjectionConfig(width=cfg.input_width, height=cfg.input_height)
    image = project(cloud, projcfg)
    with no_grad():
        values = forward(Tensor(image.data), state).data
    return Descriptor(values.copy(), frame_id=cloud.frame_id)


# ------------------------------------------------------------- checkpoints


def _write_str(fh, text):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def save_checkpoint(path, state):
    """Header (magic, version, config text), then one record per parameter or buffer."""
    records = [(n, p.data) for n, p in state.parameters.items()] + list(state.buffers().items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fh, state.config.to_text())
        fh.write(struct.pack("<I", len(records)))
        for name, value in records:
            value = np.asarray(value)
            _write_str(fh, name)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise ParseError("truncated checkpoint", offset=self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        start = self.pos
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("invalid UTF-8 string", offset=start) from None


def load_checkpoint(path, seed=0):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", offset=0)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    config = ModelConfig.from_text(r.text())
    state = init_model(config, seed)
    values = {}
    for _ in range(r.u32()):
        name = r.text()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        offset = r.pos
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name in values:
            raise ParseError(f"duplicate record {name!r}", offset=offset)
        values[name] = data
    if r.pos != len(r.raw):
        raise ParseError("trailing bytes after last record", offset=r.pos)
    expected = {**parameter_shapes(config), **buffer_shapes(config)}
    missing = sorted(set(expected) - set(values))
    extra = sorted(set(values) - set(expected))
    if missing or extra:
        raise ConfigError(f"checkpoint does not match config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if values[name].shape != tuple(shape):
            raise ConfigError(f"{name}: shape {values[name].shape} != expected {tuple(shape)}")
    dtype = get_dtype()
    for name, p in state.parameters.items():
        p.data = values[name].astype(dtype)
        p.reset_moments()
    for prefix, stats in state.running.items():
        stats.mean[...] = values[f"{prefix}.running_mean"]
        stats.var[...] = values[f"{prefix}.running_var"]
    return state


def with_attention_depth(config, depth):
    return replace(config, attention_depth=depth)

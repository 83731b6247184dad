"""Valid-padding encoder-decoder network (U-Net layout) and its checkpoints.

Each encoder stage applies two 3x3 convolutions with ReLU and a 2x2 max-pool;
the decoder mirrors it with a stride-2 up-convolution that halves the
channels, concatenation with the center-cropped skip tensor, and two more
3x3 convolutions. A 1x1 convolution maps to two classes, followed by a
per-pixel softmax.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointShapeError,
    CorruptHeaderError,
    GeometryError,
    ShapeError,
    TruncatedCheckpointError,
)

CHECKPOINT_MAGIC = b"DCPA"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    base_width: int = 64
    in_channels: int = 3
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes != 2:
            raise ValueError("only two-class (disc / background) networks are supported")

    def halved(self):
        """Same architecture at half the channel width."""
        if self.base_width % 2:
            raise ValueError(f"base_width {self.base_width} is odd and cannot be halved")
        return ModelConfig(self.depth, self.base_width // 2, self.in_channels, self.num_classes, self.seed)

    def widths(self):
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]


R1 = ModelConfig(depth=4, base_width=64)
R2 = R1.halved()


# -- geometry -----------------------------------------------------------------

@dataclass(frozen=True)
class GeometrySpec:
    output_w: int
    output_h: int
    input_w: int
    input_h: int
    margin: int


def _input_extent(depth, out):
    """Trace an output extent back to the input extent, or None if invalid."""
    if out < 1:
        return None
    s = out
    for _ in range(depth):
        s += 4
        if s % 2:
            return None
        s //= 2
    s += 4
    for _ in range(depth):
        s = 2 * s + 4
    return s


def _output_extent(depth, inp):
    s = inp
    for _ in range(depth):
        s -= 4
        if s < 2 or s % 2:
            return None
        s //= 2
    s -= 4
    if s < 1:
        return None
    for _ in range(depth):
        s = 2 * s - 4
        if s < 1:
            return None
    return s


def margin_for_depth(depth):
    """Context pixels needed on each side of an output patch."""
    out = next(o for o in range(1, 4 * 2 ** depth) if _input_extent(depth, o) is not None)
    return (_input_extent(depth, out) - out) // 2


def _nearest_valid(depth, size, fn, limit=64 * 1024):
    below = next((s for s in range(size - 1, 0, -1) if fn(depth, s) is not None), None)
    above = next((s for s in range(size + 1, size + limit) if fn(depth, s) is not None), None)
    return below, above


def _check_output(depth, out):
    inp = _input_extent(depth, out)
    if inp is None:
        below, above = _nearest_valid(depth, out, _input_extent)
        raise GeometryError(
            f"output extent {out} is not realizable at depth {depth}; "
            f"nearest valid output sizes: {below} and {above}"
        )
    return inp


def geometry(config, output_size):
    """Input geometry needed to produce an ``output_size`` = w or (w, h) patch."""
    ow, oh = (output_size, output_size) if np.isscalar(output_size) else output_size
    iw, ih = _check_output(config.depth, int(ow)), _check_output(config.depth, int(oh))
    return GeometrySpec(int(ow), int(oh), iw, ih, (iw - int(ow)) // 2)


def geometry_for_input(config, input_size):
    """Inverse of :func:`geometry`: output patch produced by an input patch."""
    iw, ih = (input_size, input_size) if np.isscalar(input_size) else input_size
    sizes = []
    for s in (int(iw), int(ih)):
        o = _output_extent(config.depth, s)
        if o is None:
            below, above = _nearest_valid(config.depth, s, _output_extent)
            raise GeometryError(
                f"input extent {s} is not realizable at depth {config.depth}; "
                f"nearest valid input sizes: {below} and {above}"
            )
        sizes.append(o)
    return GeometrySpec(sizes[0], sizes[1], int(iw), int(ih), (int(iw) - sizes[0]) // 2)


# -- parameters ---------------------------------------------------------------

def _layer_shapes(config):
    """Ordered (name, weight shape, bias length, fan_in) for every layer."""
    layers = []
    widths = config.widths()
    cin = config.in_channels
    for i in range(config.depth):
        w = widths[i]
        layers.append((f"enc{i}.conv1", (w, cin, 3, 3), w, cin * 9))
        layers.append((f"enc{i}.conv2", (w, w, 3, 3), w, w * 9))
        cin = w
    wb = widths[config.depth]
    layers.append(("bottleneck.conv1", (wb, cin, 3, 3), wb, cin * 9))
    layers.append(("bottleneck.conv2", (wb, wb, 3, 3), wb, wb * 9))
    cin = wb
    for i in reversed(range(config.depth)):
        w = widths[i]
        layers.append((f"dec{i}.up", (cin, w, 2, 2), w, cin))
        layers.append((f"dec{i}.conv1", (w, 2 * w, 3, 3), w, 2 * w * 9))
        layers.append((f"dec{i}.conv2", (w, w, 3, 3), w, w * 9))
        cin = w
    layers.append(("head", (config.num_classes, cin, 1, 1), config.num_classes, cin))
    return layers


def param_count(config):
    """Exact number of trainable scalars, from layer arithmetic alone."""
    total = 0
    for _, wshape, nbias, _ in _layer_shapes(config):
        total += int(np.prod(wshape)) + nbias
    return total


class UNet:
    def __init__(self, config, dtype=np.float32, params=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {}
        if params is not None:
            self.load_state_dict(params)
            return
        rng = np.random.default_rng(config.seed)
        for name, wshape, nbias, fan_in in _layer_shapes(config):
            w = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
            self.params[f"{name}.weight"] = T.Tensor(w.astype(self.dtype), requires_grad=True)
            self.params[f"{name}.bias"] = T.Tensor(np.zeros(nbias, self.dtype), requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        expected = {}
        for name, wshape, nbias, _ in _layer_shapes(self.config):
            expected[f"{name}.weight"] = tuple(wshape)
            expected[f"{name}.bias"] = (nbias,)
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointShapeError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            arr = np.asarray(state[name])
            if arr.shape != shape:
                raise CheckpointShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = T.Tensor(arr.astype(self.dtype, copy=True), requires_grad=True)

    def astype(self, dtype):
        return UNet(self.config, dtype=dtype, params=self.state_dict())

    def geometry(self, output_size):
        return geometry(self.config, output_size)

    def _layer(self, name, x, up=False):
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        return T.upconv2(x, w, b) if up else T.conv2d(x, w, b)

    def logits(self, x):
        x = T.as_tensor(x)
        if x.ndim not in (3, 4) or x.shape[-3] != self.config.in_channels:
            raise ShapeError(f"expected input with {self.config.in_channels} channels, got shape {x.shape}")
        if x.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype))
        geometry_for_input(self.config, (x.shape[-1], x.shape[-2]))
        skips = []
        for i in range(self.config.depth):
            x = T.relu(self._layer(f"enc{i}.conv1", x))
            x = T.relu(self._layer(f"enc{i}.conv2", x))
            skips.append(x)
            x = T.maxpool2(x)
        x = T.relu(self._layer("bottleneck.conv1", x))
        x = T.relu(self._layer("bottleneck.conv2", x))
        for i in reversed(range(self.config.depth)):
            x = self._layer(f"dec{i}.up", x, up=True)
            skip = T.center_crop(skips[i], x.shape[-2], x.shape[-1])
            x = T.concat_channels(skip, x)
            x = T.relu(self._layer(f"dec{i}.conv1", x))
            x = T.relu(self._layer(f"dec{i}.conv2", x))
        return self._layer("head", x)

    def forward(self, x):
        """Per-pixel class probabilities; channel 1 is the disc class."""
        return T.softmax_channels(self.logits(x))

    __call__ = forward


def build(config, dtype=np.float32):
    return UNet(config, dtype=dtype)


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)

    def model(self, dtype=np.float32):
        return UNet(self.config, dtype=dtype, params=self.params)


def save(model, path, metadata=None):
    """Write ``model`` (a UNet or Checkpoint) in the binary checkpoint format."""
    if isinstance(model, Checkpoint):
        config, params, meta = model.config, model.params, dict(model.metadata)
    else:
        config, params, meta = model.config, model.state_dict(), {}
    if metadata:
        meta.update(metadata)
    header = json.dumps({"config": asdict(config), "metadata": meta}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) < 5:
        raise TruncatedCheckpointError(f"{path}: file too short for a checkpoint header")
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = r.unpack("<B", "version")
    if version != CHECKPOINT_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "config record").decode("utf-8"))
        config = ModelConfig(**header["config"])
    except TruncatedCheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable config record ({exc})") from exc
    (count,) = r.unpack("<I", "entry count")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "entry name length")
        name = r.take(nlen, "entry name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"extents of {name}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(nbytes, f"values of {name}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(buf):
        raise CorruptHeaderError(f"{path}: {len(buf) - r.pos} trailing bytes after the last entry")
    ckpt = Checkpoint(config, params, header.get("metadata", {}))
    ckpt.model()  # validates names and shapes against the architecture
    return ckpt


def load(path, dtype=np.float32):
    return load_checkpoint(path).model(dtype)

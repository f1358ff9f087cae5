"""Sequential 3D CNN: architecture description, evaluation and persistence.

An :class:`Architecture` is a chain ``conv* -> fc -> softmax``. Weights live
in a :class:`ParamSet`, one ``(weight, bias)`` pair per layer:

* conv: ``[filters, C_in, k, k, k]``
* fc / softmax: ``[units, fan_in]``; the fc input is the last conv output
  flattened channel-major.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ArchitectureError,
    ArchParseError,
    CheckpointError,
    DimensionError,
    GeometryError,
)

CONV, FC, SOFTMAX = "conv3d", "fully_connected", "softmax_classifier"
ACTIVATIONS = ("relu", "sigmoid", "none")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int
    kernel: int = 0
    stride: int = 0
    pad: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in (CONV, FC, SOFTMAX):
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        if self.units < 1:
            raise ArchitectureError(f"{self.kind} needs a positive unit count")
        if self.activation not in ACTIVATIONS:
            raise ArchitectureError(f"unknown activation {self.activation!r}")
        if self.kind == CONV:
            if self.kernel < 1 or self.stride < 1 or self.pad < 0:
                raise ArchitectureError(
                    f"bad conv geometry k={self.kernel} s={self.stride} p={self.pad}"
                )
        elif self.kind == SOFTMAX and self.activation != "none":
            raise ArchitectureError("softmax_classifier takes no activation")

    @classmethod
    def conv(cls, filters, kernel, stride, pad=0, activation="sigmoid"):
        return cls(CONV, filters, kernel, stride, pad, activation)

    @classmethod
    def fc(cls, units, activation="sigmoid"):
        return cls(FC, units, activation=activation)

    @classmethod
    def softmax(cls, classes):
        return cls(SOFTMAX, classes)


@dataclass(frozen=True)
class Architecture:
    input_dims: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()

    def _validate(self):
        if len(self.input_dims) != 4 or self.input_dims[0] != 1 or min(self.input_dims) < 1:
            raise ArchitectureError(f"input must be 1xXxYxZ, got {self.input_dims}")
        kinds = [l.kind for l in self.layers]
        n_conv = kinds.count(CONV)
        if kinds[n_conv:] != [FC, SOFTMAX]:
            raise ArchitectureError(
                "layers must be conv* followed by exactly one fc and a terminal softmax"
            )
        self.shapes()  # raises GeometryError on an invalid chain

    def shapes(self):
        """Output shape of every layer, in order."""
        c, *spatial = self.input_dims
        out = []
        for layer in self.layers:
            if layer.kind == CONV:
                spatial = [
                    T.conv_output_extent(e, layer.kernel, layer.stride, layer.pad)
                    for e in spatial
                ]
                c = layer.units
                out.append((c, *spatial))
            else:
                out.append((layer.units,))
        return out

    def fan_ins(self):
        """Number of inputs feeding each layer (per filter position for conv)."""
        shapes = [self.input_dims] + self.shapes()
        fans = []
        for layer, prev in zip(self.layers, shapes):
            if layer.kind == CONV:
                fans.append(prev[0] * layer.kernel**3)
            else:
                fans.append(int(np.prod(prev)))
        return fans

    @property
    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == CONV]

    @property
    def num_classes(self):
        return self.layers[-1].units

    def replace_layers(self, layers):
        return Architecture(self.input_dims, tuple(layers))

    def __str__(self):
        return serialize_architecture(self)


def initial_architecture(input_dims=(1, 30, 30, 30), num_classes=10, activation="sigmoid"):
    """Root network of the search: two strided conv layers, fc(400), softmax."""
    return Architecture(
        tuple(input_dims),
        (
            LayerSpec.conv(16, 6, 2, activation=activation),
            LayerSpec.conv(32, 5, 2, activation=activation),
            LayerSpec.fc(400, activation=activation),
            LayerSpec.softmax(num_classes),
        ),
    )


@dataclass
class ParamSet:
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __len__(self):
        return len(self.weights)

    def copy(self):
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def size(self):
        return sum(a.size for a in self.arrays())

    def equals(self, other):
        """Bit-exact equality of every tensor."""
        if len(self) != len(other):
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.arrays(), other.arrays())
        )


def param_shapes(arch):
    shapes = []
    prev = [arch.input_dims] + arch.shapes()
    for layer, p in zip(arch.layers, prev):
        if layer.kind == CONV:
            shapes.append(((layer.units, p[0], layer.kernel, layer.kernel, layer.kernel), (layer.units,)))
        else:
            shapes.append(((layer.units, int(np.prod(p))), (layer.units,)))
    return shapes


def check_params(arch, params):
    expected = param_shapes(arch)
    if len(params) != len(expected):
        raise DimensionError(f"{len(params)} parameter layers for {len(expected)} arch layers")
    for i, ((ws, bs), w, b) in enumerate(zip(expected, params.weights, params.biases)):
        if w.shape != ws or b.shape != bs:
            raise DimensionError(
                f"layer {i}: params {w.shape}/{b.shape} do not match arch {ws}/{bs}"
            )


def param_count(arch):
    return sum(int(np.prod(ws)) + int(np.prod(bs)) for ws, bs in param_shapes(arch))


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for (ws, bs), layer in zip(param_shapes(arch), arch.layers):
        if layer.kind == CONV:
            receptive = layer.kernel**3
            fan_in, fan_out = ws[1] * receptive, ws[0] * receptive
        else:
            fan_in, fan_out = ws[1], ws[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=ws))
        biases.append(np.zeros(bs))
    return ParamSet(weights, biases)


def zero_params(arch):
    return ParamSet(
        [np.zeros(ws) for ws, _ in param_shapes(arch)],
        [np.zeros(bs) for _, bs in param_shapes(arch)],
    )


def _as_input(arch, x):
    x = np.asarray(x, dtype=T.DTYPE)
    if x.shape == arch.input_dims[1:]:
        x = x[None, None]
    elif x.ndim == 4 and x.shape[1:] == arch.input_dims[1:]:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1:] != arch.input_dims:
        raise DimensionError(f"input batch {x.shape} does not match {arch.input_dims}")
    return x


def forward(arch, params, x, return_cache=False):
    """Logits ``[B, C]`` for a batch of voxel grids.

    ``x`` may be ``[B, 1, X, Y, Z]``, ``[B, X, Y, Z]`` or a single ``[X, Y, Z]``
    grid (returned as a batch of one).
    """
    check_params(arch, params)
    h = _as_input(arch, x)
    cache = []
    for layer, w, b in zip(arch.layers, params.weights, params.biases):
        inp = h
        if layer.kind == CONV:
            z = T.conv3d_forward(h, w, b, layer.stride, layer.pad)
        else:
            flat = h.reshape(h.shape[0], -1)
            z = flat @ w.T + b
        h = T.activation_forward(z, layer.activation) if layer.activation != "none" else z
        cache.append((inp, z))
    if return_cache:
        return h, cache
    return h


def backward(arch, params, cache, grad_logits):
    """Gradient ParamSet given the forward cache and dLoss/dlogits."""
    grads_w = [None] * len(arch.layers)
    grads_b = [None] * len(arch.layers)
    g = grad_logits
    for i in reversed(range(len(arch.layers))):
        layer = arch.layers[i]
        inp, z = cache[i]
        w = params.weights[i]
        if layer.activation != "none":
            g = T.activation_backward(z, layer.activation, g)
        if layer.kind == CONV:
            need_input = i > 0
            if need_input:
                gx, gw, gb = T.conv3d_backward(inp, w, layer.stride, layer.pad, g)
            else:
                # first layer: skip the input gradient, nobody consumes it
                v = T._windows(T._padded(inp, layer.pad), layer.kernel, layer.stride, g.shape[2:])
                gw = np.tensordot(g, v, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                gb = g.sum(axis=(0, 2, 3, 4))
                gx = None
            grads_w[i], grads_b[i] = gw, gb
            g = gx
        else:
            flat = inp.reshape(inp.shape[0], -1)
            grads_w[i] = g.T @ flat
            grads_b[i] = g.sum(axis=0)
            g = (g @ w).reshape(inp.shape)
    return ParamSet(grads_w, grads_b)


def loss_and_grads(arch, params, x, labels):
    logits, cache = forward(arch, params, x, return_cache=True)
    loss, grad_logits = T.softmax_cross_entropy(logits, np.asarray(labels))
    return loss, backward(arch, params, cache, grad_logits), logits


# -- text format ------------------------------------------------------------

_TEXT_KEYS = {CONV: ("filters", "k", "s", "p", "act"), FC: ("units", "act"), SOFTMAX: ("classes",)}
_TEXT_KIND = {"conv": CONV, "fc": FC, "softmax": SOFTMAX}


def serialize_architecture(arch):
    x = "x".join(str(d) for d in arch.input_dims)
    lines = [f"input {x}"]
    for l in arch.layers:
        if l.kind == CONV:
            lines.append(f"conv filters={l.units} k={l.kernel} s={l.stride} p={l.pad} act={l.activation}")
        elif l.kind == FC:
            lines.append(f"fc units={l.units} act={l.activation}")
        else:
            lines.append(f"softmax classes={l.units}")
    return "\n".join(lines) + "\n"


def parse_architecture(text):
    """Inverse of :func:`serialize_architecture`; errors carry the 1-based line number."""
    lines = [(n, ln.strip()) for n, ln in enumerate(text.splitlines(), 1)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ArchParseError(1, "empty architecture text")
    n, head = lines[0]
    parts = head.split()
    if len(parts) != 2 or parts[0] != "input":
        raise ArchParseError(n, f"expected 'input 1xXxYxZ', got {head!r}")
    try:
        dims = tuple(int(v) for v in parts[1].split("x"))
    except ValueError:
        raise ArchParseError(n, f"bad input dims {parts[1]!r}") from None
    if len(dims) != 4:
        raise ArchParseError(n, f"bad input dims {parts[1]!r}")

    layers = []
    for n, ln in lines[1:]:
        word, *fields = ln.split()
        kind = _TEXT_KIND.get(word)
        if kind is None:
            raise ArchParseError(n, f"unknown layer type {word!r}")
        kv = {}
        for f in fields:
            key, sep, val = f.partition("=")
            if not sep:
                raise ArchParseError(n, f"expected key=value, got {f!r}")
            kv[key] = val
        if set(kv) != set(_TEXT_KEYS[kind]):
            raise ArchParseError(n, f"{word} needs keys {', '.join(_TEXT_KEYS[kind])}")
        try:
            if kind == CONV:
                layer = LayerSpec.conv(int(kv["filters"]), int(kv["k"]), int(kv["s"]), int(kv["p"]), kv["act"])
            elif kind == FC:
                layer = LayerSpec.fc(int(kv["units"]), kv["act"])
            else:
                layer = LayerSpec.softmax(int(kv["classes"]))
        except ValueError as e:
            raise ArchParseError(n, str(e)) from None
        layers.append(layer)
    try:
        return Architecture(dims, tuple(layers))
    except (ArchitectureError, GeometryError) as e:
        raise ArchParseError(lines[-1][0], str(e)) from None


# -- checkpoints ------------------------------------------------------------

MAGIC = b"MSCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def _write_record(buf, arr, dtype):
    arr = np.asarray(arr)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def checkpoint_bytes(arch, params, dtype="f64"):
    check_params(arch, params)
    code = {"f64": 0, "f32": 1}[dtype]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HB", VERSION, code))
    text = serialize_architecture(arch).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for w, b in zip(params.weights, params.biases):
        _write_record(buf, w, _DTYPES[code])
        _write_record(buf, b, _DTYPES[code])
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(arch, params, path, dtype="f64"):
    """Write atomically; ``dtype='f32'`` is lossy."""
    data = checkpoint_bytes(arch, params, dtype)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data):
    if len(data) < 4 + 3 + 4 + 4:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, code = r.unpack("<HB")
    if version != VERSION or code not in _DTYPES:
        raise CheckpointError(f"unsupported version {version} / dtype {code}")
    (n,) = r.unpack("<I")
    try:
        arch = parse_architecture(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, ArchParseError) as e:
        raise CheckpointError(f"bad architecture block: {e}") from None
    dt = _DTYPES[code]
    arrays = []
    for _ in range(2 * len(arch.layers)):
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        count = int(np.prod(shape))
        raw = r.take(count * dt.itemsize)
        arrays.append(np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last record")
    params = ParamSet(arrays[0::2], arrays[1::2])
    try:
        check_params(arch, params)
    except DimensionError as e:
        raise CheckpointError(str(e)) from None
    return arch, params


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())

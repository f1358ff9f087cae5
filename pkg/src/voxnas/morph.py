"""Function-preserving morphisms: widen the top conv layer, or stack a new one on it.

Widening follows the Net2Net recipe. Output channel ``j`` of the widened
layer copies source channel ``g[j]`` (weights and bias), and every weight in
the following layer that reads channel ``j`` is the source weight divided by
the number of channels sharing that source. Deepening inserts a conv layer
whose filters are identity kernels.

Channel indices are 0-based here; ``g[j] == j`` for ``j < n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .errors import ArchitectureError, CapExceededError
from .net import CONV, LayerSpec

ACTIONS = ("deepen_top", "widen_top")


@dataclass(frozen=True)
class WidenMapping:
    n: int
    q: int
    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.int64)
        if self.q <= self.n or self.n < 1 or g.shape != (self.q,):
            raise ValueError(f"need q > n >= 1 and len(g) == q (n={self.n}, q={self.q})")
        if not np.array_equal(g[: self.n], np.arange(self.n)):
            raise ValueError("g must be the identity on the first n channels")
        if g.min() < 0 or g.max() >= self.n:
            raise ValueError("g must map into [0, n)")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    def replication_counts(self):
        """``counts[c] = |{j : g[j] == c}|`` for each source channel."""
        return np.bincount(self.g, minlength=self.n)


def make_mapping(n, q, seed):
    """Identity on the first ``n`` channels, uniform draws with replacement after."""
    if q <= n:
        raise ValueError(f"widened size q={q} must exceed n={n}")
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    g = np.concatenate([np.arange(n), rng.integers(0, n, size=q - n)])
    return WidenMapping(n, q, g)


def widen_layer(arch, params, index, mapping):
    """Widen conv layer ``index`` to ``mapping.q`` filters, preserving the function."""
    layer = arch.layers[index]
    if layer.kind != CONV:
        raise ArchitectureError(f"layer {index} is not a conv layer")
    if layer.units != mapping.n:
        raise ValueError(f"mapping expects {mapping.n} filters, layer has {layer.units}")
    net.check_params(arch, params)
    g = mapping.g
    counts = mapping.replication_counts()[g].astype(np.float64)

    new = params.copy()
    new.weights[index] = params.weights[index][g].copy()
    new.biases[index] = params.biases[index][g].copy()

    nxt = index + 1
    w_next = params.weights[nxt]
    if arch.layers[nxt].kind == CONV:
        new.weights[nxt] = w_next[:, g] / counts[None, :, None, None, None]
    else:
        # fc input is flattened channel-major: one contiguous block per channel
        units = w_next.shape[0]
        blocks = w_next.reshape(units, mapping.n, -1)
        new.weights[nxt] = (blocks[:, g] / counts[None, :, None]).reshape(units, -1)

    layers = list(arch.layers)
    layers[index] = LayerSpec.conv(mapping.q, layer.kernel, layer.stride, layer.pad, layer.activation)
    return arch.replace_layers(layers), new


def _top_conv(arch):
    idx = arch.conv_indices
    if not idx:
        raise ArchitectureError("architecture has no conv layer")
    return idx[-1]


def widen_top(arch, params, seed, max_filters=None):
    """Double the filter count of the top conv layer."""
    top = _top_conv(arch)
    n = arch.layers[top].units
    if max_filters is not None and 2 * n > max_filters:
        raise CapExceededError(f"widening to {2 * n} filters exceeds cap {max_filters}")
    return widen_layer(arch, params, top, make_mapping(n, 2 * n, seed))


def identity_kernel(channels, kernel):
    if kernel % 2 == 0:
        raise ValueError("identity kernel needs an odd size")
    w = np.zeros((channels, channels, kernel, kernel, kernel))
    mid = kernel // 2
    w[np.arange(channels), np.arange(channels), mid, mid, mid] = 1.0
    return w


def deepened_layer(top: LayerSpec) -> LayerSpec:
    """Stride 1 "same" conv with the top layer's width and (odd-rounded) kernel."""
    k = top.kernel if top.kernel % 2 else top.kernel + 1
    return LayerSpec.conv(top.units, k, 1, (k - 1) // 2, top.activation)


def deepen_top(arch, params, max_conv_layers=None):
    """Insert an identity-initialised conv layer right above the top conv layer.

    Exact for relu (``relu(relu(x)) == relu(x)``); with sigmoid the new layer
    applies the nonlinearity a second time, so outputs change.
    """
    top = _top_conv(arch)
    if max_conv_layers is not None and len(arch.conv_indices) + 1 > max_conv_layers:
        raise CapExceededError(f"deepening exceeds cap of {max_conv_layers} conv layers")
    net.check_params(arch, params)
    layer = deepened_layer(arch.layers[top])
    layers = list(arch.layers)
    layers.insert(top + 1, layer)
    new_arch = arch.replace_layers(layers)

    new = params.copy()
    new.weights.insert(top + 1, identity_kernel(layer.units, layer.kernel))
    new.biases.insert(top + 1, np.zeros(layer.units))
    return new_arch, new


def apply_action(action, arch, params, seed, max_filters=None, max_conv_layers=None):
    if action == "widen_top":
        return widen_top(arch, params, seed, max_filters)
    if action == "deepen_top":
        return deepen_top(arch, params, max_conv_layers)
    raise ValueError(f"unknown action {action!r}")


def applicable_actions(arch, max_filters=None, max_conv_layers=None):
    """Actions from :data:`ACTIONS` whose result respects the caps."""
    idx = arch.conv_indices
    if not idx:
        return []
    out = []
    if max_conv_layers is None or len(idx) + 1 <= max_conv_layers:
        out.append("deepen_top")
    if max_filters is None or 2 * arch.layers[idx[-1]].units <= max_filters:
        out.append("widen_top")
    return out

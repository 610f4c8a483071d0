"""Minimal neural-network substrate with exact reverse-mode gradients.

Networks are flat stacks of three layer kinds (``dense``, ``conv3x3``,
``activation``) operating on single samples. That is deliberately all the
machinery the pipeline needs: a small conv net for the degradation map, a
spectrally normalized strided conv net for the critic, and a conv net for
the joint score. Everything runs in float64 numpy, so two training runs from
identical state are bit-identical.

Conventions:

* a parameter set is a plain ``dict[str, np.ndarray]`` in layer order;
* conv layers use 3x3 kernels, zero padding 1, and an integer stride;
* score networks are unconditional nets whose raw output is divided by the
  noise scale at evaluation time (pass ``sigma=`` to :func:`forward`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrays import SeededRng
from .errors import NumericalError

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "AdamState",
    "EmaState",
    "init_params",
    "forward",
    "backward",
    "adam_init",
    "adam_step",
    "spectral_normalize",
    "conv_spectral_norm",
    "SpectralProjector",
    "ema_init",
    "ema_update",
    "make_conv_net",
    "make_critic_net",
    "make_dense_net",
]

ACTIVATIONS = ("elu", "lrelu", "identity")
LRELU_SLOPE = 0.2


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv3x3" | "activation"
    fan_in: int = 0
    fan_out: int = 0
    activation: str = "identity"
    stride: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack plus the input shape it expects ((C, H, W) or (n,))."""

    in_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def out_shape(self) -> tuple:
        return _trace_shapes(self)[-1]


def _trace_shapes(net: NetworkSpec) -> list[tuple]:
    """Shapes before/after each layer; raises if adjacent layers do not compose."""
    shape = tuple(net.in_shape)
    shapes = [shape]
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv3x3":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv3x3 needs (C, H, W) input, has {shape}")
            c, h, w = shape
            if c != layer.fan_in:
                raise ValueError(f"layer {i}: expected {layer.fan_in} channels, has {c}")
            s = layer.stride
            if s < 1 or h % s or w % s:
                raise ValueError(f"layer {i}: stride {s} incompatible with {h}x{w}")
            shape = (layer.fan_out, h // s, w // s)
        elif layer.kind == "dense":
            n = int(np.prod(shape))
            if n != layer.fan_in:
                raise ValueError(f"layer {i}: dense fan_in {layer.fan_in} != input size {n}")
            shape = (layer.fan_out,)
        elif layer.kind == "activation":
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
        else:
            raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
        shapes.append(shape)
    return shapes


def init_params(net: NetworkSpec, rng: SeededRng) -> dict:
    """Fan-in-scaled uniform weights, zero biases; deterministic in the rng."""
    _trace_shapes(net)
    params: dict[str, np.ndarray] = {}
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv3x3":
            fan = layer.fan_in * 9
            a = 1.0 / np.sqrt(fan)
            params[f"layer{i:02d}.weight"] = rng.uniform((layer.fan_out, layer.fan_in, 3, 3), -a, a)
            params[f"layer{i:02d}.bias"] = np.zeros(layer.fan_out)
        elif layer.kind == "dense":
            a = 1.0 / np.sqrt(layer.fan_in)
            params[f"layer{i:02d}.weight"] = rng.uniform((layer.fan_out, layer.fan_in), -a, a)
            params[f"layer{i:02d}.bias"] = np.zeros(layer.fan_out)
    return params


# -- layer primitives --------------------------------------------------------


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = h // stride, w // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, ho, wo), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
    return cols.reshape(c * 9, ho * wo)


def _col2im(dcols: np.ndarray, in_shape: tuple, stride: int) -> np.ndarray:
    c, h, w = in_shape
    ho, wo = h // stride, w // stride
    dd = dcols.reshape(c, 3, 3, ho, wo)
    dxp = np.zeros((c, h + 2, w + 2), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dd[:, ki, kj]
    return dxp[:, 1 : h + 1, 1 : w + 1]


def _conv_forward(x, weight, bias, stride):
    c_out = weight.shape[0]
    cols = _im2col(x, stride)
    y = weight.reshape(c_out, -1) @ cols + bias[:, None]
    ho, wo = x.shape[1] // stride, x.shape[2] // stride
    return y.reshape(c_out, ho, wo), cols


def _conv_backward(grad_y, x, weight, cols, stride):
    c_out = weight.shape[0]
    g = grad_y.reshape(c_out, -1)
    d_weight = (g @ cols.T).reshape(weight.shape)
    d_bias = g.sum(axis=1)
    dcols = weight.reshape(c_out, -1).T @ g
    d_x = _col2im(dcols, x.shape, stride)
    return d_weight, d_bias, d_x


def _act_forward(x, name):
    if name == "elu":
        return np.where(x > 0, x, np.expm1(x))
    if name == "lrelu":
        return np.where(x > 0, x, LRELU_SLOPE * x)
    return x


def _act_backward(grad_y, x, name):
    if name == "elu":
        return grad_y * np.where(x > 0, 1.0, np.exp(x))
    if name == "lrelu":
        return grad_y * np.where(x > 0, 1.0, LRELU_SLOPE)
    return grad_y


# -- forward / backward ------------------------------------------------------


def forward(net: NetworkSpec, params: dict, x: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """Evaluate the network; pass ``sigma`` to get score-style output raw/sigma."""
    y, _ = _forward_cached(net, params, x)
    return y / sigma if sigma is not None else y


def _forward_cached(net, params, x):
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != tuple(net.in_shape):
        raise ValueError(f"input shape {x.shape} != spec {net.in_shape}")
    cache = []
    cur = x
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv3x3":
            w = params[f"layer{i:02d}.weight"]
            b = params[f"layer{i:02d}.bias"]
            out, cols = _conv_forward(cur, w, b, layer.stride)
            cache.append((cur, cols))
            cur = out
        elif layer.kind == "dense":
            w = params[f"layer{i:02d}.weight"]
            b = params[f"layer{i:02d}.bias"]
            flat = cur.reshape(-1)
            cache.append((cur, flat))
            cur = w @ flat + b
        else:
            cache.append((cur, None))
            cur = _act_forward(cur, layer.activation)
    return cur, cache


def backward(net: NetworkSpec, params: dict, x: np.ndarray, grad_out: np.ndarray):
    """Exact reverse-mode gradients of ``sum(grad_out * forward(x))``.

    Returns ``(param_grads, grad_in)``; ``param_grads`` has one entry per
    weight/bias, ``grad_in`` is the gradient with respect to the input.
    """
    y, cache = _forward_cached(net, params, x)
    if grad_out.shape != y.shape:
        raise ValueError(f"upstream gradient shape {grad_out.shape} != output {y.shape}")
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        inp, aux = cache[i]
        if layer.kind == "conv3x3":
            w = params[f"layer{i:02d}.weight"]
            dw, db, g = _conv_backward(g, inp, w, aux, layer.stride)
            grads[f"layer{i:02d}.weight"] += dw
            grads[f"layer{i:02d}.bias"] += db
        elif layer.kind == "dense":
            w = params[f"layer{i:02d}.weight"]
            grads[f"layer{i:02d}.weight"] += np.outer(g, aux)
            grads[f"layer{i:02d}.bias"] += g
            g = (w.T @ g).reshape(inp.shape)
        else:
            g = _act_backward(g, inp, layer.activation)
    return grads, g


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    t: int
    m: dict
    v: dict
    beta1: float
    beta2: float
    lr: float
    eps: float


def adam_init(params: dict, lr: float, beta1: float, beta2: float, eps: float = 1e-8) -> AdamState:
    return AdamState(
        t=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        beta1=beta1,
        beta2=beta2,
        lr=lr,
        eps=eps,
    )


def adam_step(state: AdamState, params: dict, grads: dict, scale: float = 1.0):
    """One bias-corrected Adam update; ``scale`` multiplies the loss gradient
    (use -1.0 for ascent). Aborts on non-finite gradients."""
    for k in params:
        if not np.all(np.isfinite(grads[k])):
            raise NumericalError(f"non-finite gradient in {k} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    new_params = {}
    for k in params:
        g = scale * grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        new_params[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, state


# -- spectral normalization --------------------------------------------------


def spectral_normalize(weight: np.ndarray, iters: int = 1, state: tuple | None = None):
    """Divide a dense weight matrix by a power-iteration estimate of its top
    singular value.

    Returns ``(normalized, sigma, (u, v))``; feed the ``(u, v)`` state back in
    to warm-start later calls. A zero matrix is returned unchanged.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w = np.asarray(weight, dtype=np.float64)
    out_dim, in_dim = w.shape
    if state is None:
        v = np.full(in_dim, 1.0 / np.sqrt(in_dim))
    else:
        _, v = state
    sigma = 0.0
    u = np.zeros(out_dim)
    for _ in range(iters):
        u_raw = w @ v
        nu = np.linalg.norm(u_raw)
        if nu == 0.0:
            return w.copy(), 0.0, (u, v)
        u = u_raw / nu
        v_raw = w.T @ u
        nv = np.linalg.norm(v_raw)
        if nv == 0.0:
            return w.copy(), 0.0, (u, v)
        v = v_raw / nv
        sigma = float(u @ (w @ v))
    return w / sigma, sigma, (u, v)


def conv_spectral_norm(weight: np.ndarray, in_shape: tuple, stride: int, iters: int = 1, state=None):
    """Top singular value of the conv3x3 operator itself (not the reshaped
    kernel matrix), via power iteration on image-shaped vectors. Returns
    ``(sigma, v_state)``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    c_in, h, w = in_shape
    bias = np.zeros(weight.shape[0])
    if state is None:
        v = np.full(in_shape, 1.0, dtype=np.float64)
        v /= np.linalg.norm(v)
    else:
        v = state
    sigma = 0.0
    for _ in range(iters):
        y, cols = _conv_forward(v, weight, bias, stride)
        sigma = float(np.linalg.norm(y))
        if sigma == 0.0:
            return 0.0, v
        u = y / sigma
        _, _, v_raw = _conv_backward(u, v, weight, cols, stride)
        nv = np.linalg.norm(v_raw)
        if nv == 0.0:
            return 0.0, v
        v = v_raw / nv
    y, _ = _conv_forward(v, weight, bias, stride)
    return float(np.linalg.norm(y)), v


class SpectralProjector:
    """Keeps every weight of a network at unit spectral norm.

    Applied as a projection after each optimizer step (gradients are not
    taken through the normalization). Conv kernels are normalized by the
    spectral norm of the actual convolution operator at the layer's input
    geometry, so the per-layer product bounds the network's Lipschitz
    constant with 1-Lipschitz activations.
    """

    def __init__(self, net: NetworkSpec, iters: int = 2):
        self.net = net
        self.iters = iters
        self.shapes = _trace_shapes(net)
        self.state: dict[str, object] = {}

    def export_state(self) -> dict:
        """Power-iteration vectors as plain arrays, for checkpointing."""
        out = {}
        for name, st in self.state.items():
            out[name] = st[1].copy() if isinstance(st, tuple) else st.copy()
        return out

    def load_state(self, state: dict) -> None:
        for i, layer in enumerate(self.net.layers):
            name = f"layer{i:02d}.weight"
            if name not in state:
                continue
            v = np.asarray(state[name], dtype=np.float64)
            if layer.kind == "dense":
                self.state[name] = (None, v)
            elif layer.kind == "conv3x3":
                self.state[name] = v.reshape(self.shapes[i])

    def project(self, params: dict, iters: int | None = None) -> dict:
        it = self.iters if iters is None else iters
        for i, layer in enumerate(self.net.layers):
            name = f"layer{i:02d}.weight"
            if layer.kind == "dense":
                wn, sigma, st = spectral_normalize(params[name], it, self.state.get(name))
                self.state[name] = st
                if sigma > 0.0:
                    params[name] = wn
            elif layer.kind == "conv3x3":
                sigma, st = conv_spectral_norm(
                    params[name], self.shapes[i], layer.stride, it, self.state.get(name)
                )
                self.state[name] = st
                if sigma > 0.0:
                    params[name] = params[name] / sigma
        return params


# -- EMA ---------------------------------------------------------------------


@dataclass
class EmaState:
    decay: float
    shadow: dict


def ema_init(params: dict, decay: float) -> EmaState:
    if not 0.0 < decay < 1.0:
        raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
    return EmaState(decay=decay, shadow={k: p.copy() for k, p in params.items()})


def ema_update(state: EmaState, params: dict) -> EmaState:
    d = state.decay
    for k in state.shadow:
        state.shadow[k] = d * state.shadow[k] + (1.0 - d) * params[k]
    return state


# -- spec builders -----------------------------------------------------------


def make_conv_net(in_ch: int, out_ch: int, hw: int, channels: int = 16, depth: int = 3,
                  activation: str = "elu") -> NetworkSpec:
    """Shape-preserving conv stack: in_ch -> channels x (depth-1) -> out_ch."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    layers = []
    prev = in_ch
    for _ in range(depth - 1):
        layers.append(LayerSpec("conv3x3", prev, channels))
        layers.append(LayerSpec("activation", activation=activation))
        prev = channels
    layers.append(LayerSpec("conv3x3", prev, out_ch))
    return NetworkSpec(in_shape=(in_ch, hw, hw), layers=tuple(layers))


def make_critic_net(in_ch: int, hw: int, channels: int = 16, n_down: int = 3) -> NetworkSpec:
    """Strided conv net ending in a scalar head, for the Lipschitz critic."""
    layers = []
    prev = in_ch
    size = hw
    for _ in range(n_down):
        layers.append(LayerSpec("conv3x3", prev, channels, stride=2))
        layers.append(LayerSpec("activation", activation="lrelu"))
        prev = channels
        size //= 2
    layers.append(LayerSpec("dense", prev * size * size, 1))
    return NetworkSpec(in_shape=(in_ch, hw, hw), layers=tuple(layers))


def make_dense_net(sizes: tuple, activation: str = "elu") -> NetworkSpec:
    """Fully connected stack on flat vectors, used by toy tests."""
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append(LayerSpec("dense", a, b))
        layers.append(LayerSpec("activation", activation=activation))
    layers.pop()  # no activation after the last affine map
    return NetworkSpec(in_shape=(sizes[0],), layers=tuple(layers))

"""Small dense networks with hand-written reverse-mode gradients.

All parameters of a network live in one flat float64 vector; per-layer
weights and biases are views into it. Gradients use the same layout, so the
optimizer and the gradient checker work on plain vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import NumericalError

HIDDEN_WIDTHS = (32, 64, 32, 16, 32)
ACTIVATIONS = ("relu", "sigmoid", "linear")
PRED_CLAMP = 1e-7


class DenseNetwork:
    """Feed-forward stack of affine layers, each followed by an activation.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``(1, 32, 64, 1)``.
    activations : sequence of str
        One tag per layer (``len(sizes) - 1``), from ``relu``, ``sigmoid``,
        ``linear``.
    rng : numpy Generator, optional
        Source for Glorot-uniform weight init. Biases start at zero. When
        omitted, parameters are all zero (used when loading from disk).
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator | None = None):
        sizes = tuple(int(s) for s in sizes)
        activations = tuple(activations)
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.sizes = sizes
        self.activations = activations
        n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        self.params = np.zeros(n_params)
        self.layers = self._views(self.params)
        self.version = 0
        if rng is not None:
            for (w, _), (fan_in, fan_out) in zip(self.layers, zip(sizes[:-1], sizes[1:])):
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w[...] = rng.uniform(-limit, limit, size=w.shape)

    def _views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        views, offset = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = flat[offset:offset + fan_out]
            offset += fan_out
            views.append((w, b))
        return views

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def gradient_views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._views(flat)

    def mark_updated(self) -> None:
        """Invalidate caches from earlier forward passes."""
        self.version += 1

    def copy(self, dtype=None) -> "DenseNetwork":
        """Independent copy; ``dtype`` switches the parameter precision."""
        other = DenseNetwork(self.sizes, self.activations)
        other.params = self.params.astype(dtype or self.params.dtype)
        other.layers = other._views(other.params)
        return other

    def __call__(self, x) -> np.ndarray:
        return forward(self, x).output


@dataclass
class ForwardCache:
    network_id: int
    version: int
    activations: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def forward(net: DenseNetwork, x, dtype=None) -> ForwardCache:
    """Run ``x`` (one vector or a row batch) through ``net``, keeping every layer output.

    ``dtype`` lets the gradient checker evaluate in extended precision.
    """
    h = np.asarray(x, dtype=dtype or float)
    if h.ndim == 1:
        h = h.reshape(1, -1)
    acts = [h]
    for k, ((w, b), act) in enumerate(zip(net.layers, net.activations)):
        if h.shape[-1] != w.shape[0]:
            raise ValueError(f"layer {k} expects input dim {w.shape[0]}, got {h.shape[-1]}")
        if dtype is not None:
            w, b = w.astype(dtype, copy=False), b.astype(dtype, copy=False)
        h = _activate(h @ w + b, act)
        acts.append(h)
    return ForwardCache(id(net), net.version, acts)


def relu_pattern(cache: ForwardCache, net: DenseNetwork) -> bytes:
    """On/off signature of every relu unit, used to detect stencils that cross a kink."""
    masks = [cache.activations[k + 1] > 0 for k, act in enumerate(net.activations) if act == "relu"]
    return np.packbits(np.concatenate([m.ravel() for m in masks])).tobytes() if masks else b""


def backward(net: DenseNetwork, cache: ForwardCache, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass: gradient of the loss w.r.t. all parameters (flat) and the input."""
    if cache.network_id != id(net) or cache.version != net.version:
        raise ValueError("forward cache does not belong to the current network parameters")
    g = np.asarray(grad_out, dtype=float)
    acts = cache.activations
    if g.shape != acts[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} does not match output {acts[-1].shape}")
    grads = np.zeros(net.n_params)
    views = net.gradient_views(grads)
    for k in range(len(net.layers) - 1, -1, -1):
        act, out = net.activations[k], acts[k + 1]
        if act == "relu":
            g = g * (out > 0)
        elif act == "sigmoid":
            g = g * out * (1.0 - out)
        gw, gb = views[k]
        np.matmul(acts[k].T, g, out=gw)
        gb[...] = g.sum(axis=0)
        g = g @ net.layers[k][0].T
    return grads, g


def _floating(x) -> np.ndarray:
    arr = np.asarray(x)
    return arr if arr.dtype in (np.float64, np.longdouble) else arr.astype(float)


def bce_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy and its gradient w.r.t. ``pred``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` before the logs.
    """
    p = _floating(pred)
    t = _floating(target)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    p = np.clip(p, PRED_CLAMP, 1.0 - PRED_CLAMP)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    grad = (p - t) / (p * (1.0 - p)) / n
    return loss, grad


def gaussian_kl_loss(mu, logvar) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    mu = _floating(mu)
    logvar = _floating(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    batch = mu.shape[0] if mu.ndim > 1 else 1
    var = np.exp(logvar)
    loss = -0.5 * np.sum(1.0 + logvar - mu * mu - var) / batch
    return loss, mu / batch, 0.5 * (var - 1.0) / batch


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), lr=lr)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must agree")
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam bound to one network; bumps the network version on every update."""

    def __init__(self, net: DenseNetwork, lr: float = 1e-3):
        self.net = net
        self.state = AdamState.for_params(net.params, lr)

    def step(self, grads: np.ndarray) -> None:
        adam_step(self.net.params, grads, self.state)
        self.net.mark_updated()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference(params: np.ndarray, loss: Callable[[], tuple[float, bytes]],
                      h: float = 1e-5, min_h: float = 1e-10) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every entry of ``params``.

    ``loss`` returns ``(value, pattern)`` where ``pattern`` fingerprints the
    piecewise-linear regime (relu on/off masks). If a stencil changes the
    pattern it straddles a kink, where central differences are meaningless,
    so the step is shrunk tenfold until both sides match the base point.
    Entries are perturbed in place and restored afterwards.
    """
    _, base = loss()
    out = np.empty(params.size, dtype=float)
    for k in range(params.size):
        orig = params[k]
        step = h
        while True:
            params[k] = orig + step
            up, pat_up = loss()
            hi = params[k]
            params[k] = orig - step
            down, pat_down = loss()
            lo = params[k]
            if (pat_up == base and pat_down == base) or step / 10.0 < min_h:
                break
            step /= 10.0
        params[k] = orig
        out[k] = float((up - down) / (hi - lo))
    return out


def _relu_masks(acts: Sequence[np.ndarray], activations: Sequence[str]) -> bytes:
    masks = [a > 0 for a, act in zip(acts, activations) if act == "relu"]
    return np.packbits(np.concatenate([m.ravel() for m in masks])).tobytes() if masks else b""


def network_finite_difference(net: DenseNetwork, x, head: Callable[[np.ndarray], tuple[float, bytes]],
                              h: float = 1e-5) -> np.ndarray:
    """Central differences of ``head(net(x))`` w.r.t. all parameters of ``net``.

    ``head`` maps the network output to ``(loss, pattern)``. Evaluation
    runs in the dtype of ``net.params``. Perturbing layer ``k`` leaves the
    activations below it untouched, so those are computed once per layer.
    """
    dtype = net.params.dtype
    base = forward(net, x, dtype=dtype).activations
    out, offset = [], 0
    for k, (w, b) in enumerate(net.layers):
        block = net.params[offset:offset + w.size + b.size]
        offset += block.size
        rest = list(zip(net.layers[k:], net.activations[k:]))

        def loss(inp=base[k], rest=rest) -> tuple[float, bytes]:
            acts, hcur = [], inp
            for (wk, bk), act in rest:
                hcur = _activate(hcur @ wk + bk, act)
                acts.append(hcur)
            value, extra = head(hcur)
            return value, _relu_masks(acts, [a for _, a in rest]) + extra

        out.append(finite_difference(block, loss, h))
    return np.concatenate(out)


def grad_check(net: DenseNetwork, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``loss_fn`` maps the network output to ``(loss, d loss / d output)``.
    The finite-difference side runs in extended precision so round-off does
    not swamp gradients near the 1e-8 floor of the relative error.
    """
    cache = forward(net, x)
    _, g_out = loss_fn(cache.output)
    analytic, _ = backward(net, cache, g_out)
    wide = net.copy(np.longdouble)
    numeric = network_finite_difference(wide, x, lambda out: (loss_fn(out)[0], b""), h)
    return float(relative_error(analytic, numeric).max())

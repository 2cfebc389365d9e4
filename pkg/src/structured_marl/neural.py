"""Dense ReLU networks with hand-written backprop and Adam, all in float64."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

HEADS = ("softmax", "tanh", "linear")


@dataclass
class Mlp:
    layer_sizes: tuple[int, ...]
    head: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    u_max: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        self.layer_sizes = tuple(int(k) for k in self.layer_sizes)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ValueError(f"layer {k}: weight {w.shape} / bias {b.shape}, expected {want}")

    @property
    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.head, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.u_max)

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "head": self.head, "u_max": self.u_max,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases], "format_version": 1}

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version {d.get('format_version')}")
        return cls(tuple(d["layer_sizes"]), d["head"],
                   [np.array(w, dtype=float).reshape(d["layer_sizes"][k], d["layer_sizes"][k + 1])
                    for k, w in enumerate(d["weights"])],
                   [np.array(b, dtype=float) for b in d["biases"]], float(d["u_max"]))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GradBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    @property
    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases


def init_glorot(layer_sizes: Sequence[int], head: str = "linear", seed=0,
                u_max: float = 1.0) -> Mlp:
    """Glorot-uniform weights and zero biases. ``seed`` may be an int or a Generator."""
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ValueError(f"bad layer sizes {layer_sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(layer_sizes), head, weights, biases, u_max)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward_cache(net: Mlp, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.layer_sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} != {net.layer_sizes[0]}")
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    z = acts[-1]
    if net.head == "softmax":
        y = _softmax(z)
    elif net.head == "tanh":
        y = net.u_max * np.tanh(z)
    else:
        y = z
    return y, acts


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return forward_cache(net, x)[0]


def _head_backward(net: Mlp, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    g = np.asarray(upstream, dtype=float)
    if g.shape != y.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {y.shape}")
    if net.head == "softmax":
        return y * (g - (g * y).sum(axis=-1, keepdims=True))
    if net.head == "tanh":
        return g * (net.u_max - y * y / net.u_max)
    return g


def backward(net: Mlp, x: np.ndarray, upstream: np.ndarray, cache=None) -> GradBundle:
    """Gradients of sum(upstream * forward(net, x)), summed over any batch axis."""
    if cache is None:
        y, acts = forward_cache(net, x)
    else:
        y, acts = cache
    g = _head_backward(net, y, upstream)
    batched = g.ndim == 2
    n_layers = len(net.weights)
    dw, db = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        h_in = acts[k]
        if batched:
            dw[k] = h_in.T @ g
            db[k] = g.sum(axis=0)
        else:
            dw[k] = np.outer(h_in, g)
            db[k] = g.copy()
        g = g @ net.weights[k].T
        if k > 0:
            g = g * (acts[k] > 0)
    return GradBundle(dw, db, g)


def first_preactivation(net: Mlp, x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float) @ net.weights[0] + net.biases[0]


def forward_from_preactivation(net: Mlp, z1: np.ndarray):
    """Finish a forward pass given the first layer's pre-activation."""
    last = len(net.weights) - 1
    h = np.maximum(z1, 0.0) if last > 0 else z1
    hs = [h]
    for k in range(1, last + 1):
        z = h @ net.weights[k] + net.biases[k]
        h = np.maximum(z, 0.0) if k < last else z
        hs.append(h)
    z = hs[-1]
    if net.head == "softmax":
        y = _softmax(z)
    elif net.head == "tanh":
        y = net.u_max * np.tanh(z)
    else:
        y = z
    return y, hs


def backward_to_preactivation(net: Mlp, cache, upstream: np.ndarray) -> np.ndarray:
    """Gradient with respect to the first pre-activation only (no parameter gradients)."""
    y, hs = cache
    g = _head_backward(net, y, upstream)
    for k in range(len(net.weights) - 1, 0, -1):
        g = g @ net.weights[k].T
        g *= hs[k - 1] > 0
    return g


@dataclass
class OptimState:
    """Adam moments for one network."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_net(cls, net: Mlp, lr: float, **kw) -> "OptimState":
        return cls(lr, m=[np.zeros_like(p) for p in net.params],
                   v=[np.zeros_like(p) for p in net.params], **kw)


def optim_step(opt: OptimState, net: Mlp, grads: GradBundle | Sequence[np.ndarray]) -> Mlp:
    """One Adam step with bias correction; updates ``net`` and ``opt`` in place."""
    gs = grads.params if isinstance(grads, GradBundle) else list(grads)
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    for p, g, m, v in zip(net.params, gs, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return net


def soft_update(main: Mlp, target: Mlp, tau: float) -> Mlp:
    """target <- tau * main + (1 - tau) * target, in place."""
    if main.layer_sizes != target.layer_sizes:
        raise ValueError("main and target shapes differ")
    for p, q in zip(main.params, target.params):
        q *= (1.0 - tau)
        q += tau * p
    return target


def has_nan(net: Mlp) -> bool:
    return not all(np.all(np.isfinite(p)) for p in net.params)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function over every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = x[ix]
        x[ix] = old + h
        fp = f()
        x[ix] = old - h
        fm = f()
        x[ix] = old
        g[ix] = (fp - fm) / (2 * h)
    return g


def grad_check(net: Mlp, x: np.ndarray, upstream: Optional[np.ndarray] = None,
               h: float = 1e-5) -> float:
    """Max relative error of :func:`backward` against central differences."""
    y = forward(net, x)
    if upstream is None:
        upstream = np.random.default_rng(1).standard_normal(y.shape)
    analytic = backward(net, x, upstream)
    f = lambda: float(np.sum(upstream * forward(net, x)))
    numeric = [numeric_grad(f, p, h) for p in net.params] + [numeric_grad(f, x, h)]
    worst = 0.0
    for a, n in zip(analytic.params + [analytic.input], numeric):
        scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst

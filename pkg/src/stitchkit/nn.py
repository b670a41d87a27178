"""Small dense MLP substrate with hand-written backprop and Adam.

Every learned model in the package is one or more of these networks. Inputs
are batched as ``(n, d_in)``; a single vector ``(d_in,)`` is also accepted and
the output is squeezed accordingly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stitchkit.errors import ConfigurationError, TrainingFault

HEADS = ("linear", "tanh", "gaussian")


@dataclass
class Network:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"
    scale: np.ndarray | None = None
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown output head {self.head!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError("number of weight matrices does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ConfigurationError(f"layer {i} parameter shapes do not chain with layer_sizes")
        if self.head == "gaussian" and self.layer_sizes[-1] % 2:
            raise ConfigurationError("gaussian head needs an even output width (mean + log_std)")
        if self.head == "tanh":
            if self.scale is None:
                self.scale = np.ones(self.layer_sizes[-1])
            self.scale = np.asarray(self.scale, dtype=float)
            if self.scale.shape != (self.layer_sizes[-1],):
                raise ConfigurationError("tanh head scale must match the output width")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        """Width of the head output (half the last layer for gaussian heads)."""
        if self.head == "gaussian":
            return self.layer_sizes[-1] // 2
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> Network:
        return Network(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.head,
            None if self.scale is None else self.scale.copy(),
            self.log_std_min,
            self.log_std_max,
            dict(self.meta),
        )

    def load_params(self, other: Network) -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def __call__(self, x):
        return forward(self, x)

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "layer_sizes": list(self.layer_sizes),
            "head": self.head,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "meta": self.meta,
        }
        if self.head == "tanh":
            d["scale"] = self.scale.tolist()
        if self.head == "gaussian":
            d["log_std_bounds"] = [self.log_std_min, self.log_std_max]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Network:
        lo, hi = d.get("log_std_bounds", (-10.0, 2.0))
        return cls(
            layer_sizes=list(d["layer_sizes"]),
            weights=[np.array(w, dtype=float).reshape(a, b) for w, a, b in
                     zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])],
            biases=[np.array(b, dtype=float) for b in d["biases"]],
            head=d["head"],
            scale=None if d.get("scale") is None else np.array(d["scale"], dtype=float),
            log_std_min=float(lo),
            log_std_max=float(hi),
            meta=dict(d.get("meta", {})),
        )


def init_network(layer_sizes, rng: np.random.Generator, head="linear", scale=None,
                 log_std_bounds=(-10.0, 2.0)) -> Network:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    sizes = [int(n) for n in layer_sizes]
    if len(sizes) < 2 or any(n <= 0 for n in sizes):
        raise ConfigurationError(f"bad layer sizes {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Network(sizes, weights, biases, head, scale, log_std_bounds[0], log_std_bounds[1])


def zero_network(layer_sizes, head="linear", scale=None) -> Network:
    sizes = [int(n) for n in layer_sizes]
    return Network(
        sizes,
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        head,
        scale,
    )


def mlp_sizes(d_in: int, hidden, d_out: int) -> list[int]:
    return [int(d_in), *[int(h) for h in hidden], int(d_out)]


# -- forward / backward -----------------------------------------------------


def _as_batch(net: Network, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ConfigurationError(f"input has shape {x.shape[1:] if x.ndim == 2 else x.shape}, network expects {net.in_dim}")
    return x, single


def forward_cached(net: Network, x):
    """Batched forward pass returning ``(output, cache)`` for :func:`backward_cached`."""
    x, single = _as_batch(net, x)
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    z = acts[-1]
    if net.head == "linear":
        out = z
    elif net.head == "tanh":
        t = np.tanh(z)
        out = net.scale * t
    else:
        k = net.out_dim
        mean, raw = z[:, :k], z[:, k:]
        out = (mean, np.clip(raw, net.log_std_min, net.log_std_max))
    return out, (acts, single)


def backward_cached(net: Network, cache, upstream):
    """Gradients for every parameter (same order as ``net.params()``) and for the input."""
    acts, single = cache
    z = acts[-1]
    if net.head == "gaussian":
        if not isinstance(upstream, (tuple, list)) or len(upstream) != 2:
            raise ConfigurationError("gaussian head expects (d_mean, d_log_std) upstream gradients")
        g_mean, g_log_std = (np.asarray(u, dtype=float) for u in upstream)
        if single:
            g_mean, g_log_std = g_mean.reshape(1, -1), g_log_std.reshape(1, -1)
        k = net.out_dim
        raw = z[:, k:]
        if g_mean.shape != (z.shape[0], k) or g_log_std.shape != (z.shape[0], k):
            raise ConfigurationError("upstream gradient shape does not match gaussian head output")
        inside = (raw >= net.log_std_min) & (raw <= net.log_std_max)
        g = np.concatenate([g_mean, g_log_std * inside], axis=1)
    else:
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g.reshape(1, -1)
        if g.shape != z.shape:
            raise ConfigurationError(f"upstream gradient shape {g.shape} does not match output {z.shape}")
        if net.head == "tanh":
            g = g * net.scale * (1.0 - np.tanh(z) ** 2)

    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        h_in = acts[i]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g = g * (acts[i] > 0)
    grad_x = g[0] if single else g
    return grads, grad_x


def _squeeze(out, single):
    if not single:
        return out
    if isinstance(out, tuple):
        return tuple(o[0] for o in out)
    return out[0]


def forward(net: Network, x):
    """Network output; a ``(mean, log_std)`` pair for gaussian heads."""
    out, (_, single) = forward_cached(net, x)
    return _squeeze(out, single)


def backward(net: Network, x, upstream):
    """Pure function of (net, x, upstream): returns ``(param_grads, input_grad)``."""
    _, cache = forward_cached(net, x)
    return backward_cached(net, cache, upstream)


# -- optimisation ------------------------------------------------------------


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_coeff: float = 0.0
    step_count: int = 0
    first_moment: list | None = None
    second_moment: list | None = None

    def step(self, net: Network, grads) -> None:
        params = net.params()
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ConfigurationError("gradients are not shape-compatible with the network")
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingFault(f"non-finite gradient at Adam step {self.step_count + 1}")
        if self.first_moment is None:
            self.first_moment = [np.zeros_like(p) for p in params]
            self.second_moment = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.first_moment, self.second_moment):
            if self.l2_coeff > 0:
                g = g + self.l2_coeff * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(net: Network, grads, opt: Adam):
    """In-place Adam update; returns ``(net, opt)`` for chaining."""
    opt.step(net, grads)
    return net, opt


# -- gradient checking -------------------------------------------------------


def _probe_loss(net, x, weights):
    out = forward(net, x)
    if isinstance(out, tuple):
        return float(np.sum(out[0] * weights[0]) + np.sum(out[1] * weights[1]))
    return float(np.sum(out * weights))


def grad_check(net: Network, x, h: float = 1e-5, seed: int = 0, max_per_tensor: int | None = None) -> float:
    """Max relative error between backprop and central differences.

    The probe loss is a fixed random linear functional of the output. With
    ``max_per_tensor`` only a random subset of coordinates of each tensor is
    checked, which keeps very wide layers affordable.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    if net.head == "gaussian":
        k = net.out_dim
        shape = (k,) if x.ndim == 1 else (x.shape[0], k)
        weights = (rng.normal(size=shape), rng.normal(size=shape))
    else:
        shape = (net.out_dim,) if x.ndim == 1 else (x.shape[0], net.out_dim)
        weights = rng.normal(size=shape)
    grads, _ = backward(net, x, weights)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            up = _probe_loss(net, x, weights)
            flat[j] = old - h
            down = _probe_loss(net, x, weights)
            flat[j] = old
            numeric = (up - down) / (2 * h)
            analytic = gflat[j]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------------


def save_json(obj: dict, path) -> None:
    """Write a JSON document atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj))
    tmp.replace(path)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def save_network(net: Network, path) -> None:
    save_json(net.to_dict(), path)


def load_network(path) -> Network:
    return Network.from_dict(load_json(path))

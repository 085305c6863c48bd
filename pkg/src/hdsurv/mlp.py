"""Small fully-connected feed-forward networks with reverse-mode gradients.

Layer ``l`` maps ``v -> act_l(W_l v + b_l)``. Inputs are handled row-wise:
a batch ``X`` of shape ``(n, k_0)`` produces outputs of shape ``(n, k_L)``.
Hidden-layer dropout uses Bernoulli keep masks with inverted scaling, so
evaluation mode needs no rescaling and is deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .coxcore import CoxRiskSets
from .survdata import SurvivalDataset

ACTIVATIONS = ("relu", "linear", "sigmoid")


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "linear":
        return z
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "linear":
        return np.ones_like(z)
    return a * (1.0 - a)


@dataclass
class Layer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, float))
        self.biases = np.asarray(self.biases, float).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.biases.size != self.weights.shape[0]:
            raise ValueError("bias length must equal the number of layer outputs")


@dataclass
class ForwardCache:
    inputs: list          # A_{l-1} per layer, after dropout
    pre: list             # Z_l
    post: list            # act(Z_l), before dropout
    masks: list           # scaled keep masks (None when no dropout)
    squeeze: bool


@dataclass
class Network:
    layers: list
    input_dim: int = field(default=0)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        if not self.input_dim:
            self.input_dim = self.layers[0].weights.shape[1]
        k = self.input_dim
        for i, L in enumerate(self.layers):
            if L.weights.shape[1] != k:
                raise ValueError(f"layer {i} expects {L.weights.shape[1]} inputs, gets {k}")
            k = L.weights.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].weights.shape[0]

    @property
    def dims(self):
        return [self.input_dim] + [L.weights.shape[0] for L in self.layers]

    @property
    def n_params(self):
        return sum(L.weights.size + L.biases.size for L in self.layers)

    # -- evaluation -------------------------------------------------------

    def forward(self, x, dropout=0.0, rng=None, return_cache=False):
        X = np.asarray(x, float)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"input has {X.shape[1]} features, network expects {self.input_dim}")
        if dropout and rng is None:
            raise ValueError("dropout requires a random generator")
        cache = ForwardCache([], [], [], [], squeeze)
        A = X
        last = len(self.layers) - 1
        for i, L in enumerate(self.layers):
            cache.inputs.append(A)
            Z = A @ L.weights.T + L.biases
            H = _act(Z, L.activation)
            cache.pre.append(Z)
            cache.post.append(H)
            mask = None
            if dropout and i < last:
                mask = (rng.random(H.shape) >= dropout) / (1.0 - dropout)
                H = H * mask
            cache.masks.append(mask)
            A = H
        out = A[0] if squeeze else A
        return (out, cache) if return_cache else out

    __call__ = forward

    def backward(self, upstream, cache: ForwardCache):
        """Gradients of ``sum(upstream * output)`` with respect to every
        ``(W_l, b_l)``, plus the gradient with respect to the input."""
        G = np.asarray(upstream, float)
        out_shape = cache.post[-1].shape
        if cache.squeeze:
            G = G.reshape(1, -1)
        if G.shape != out_shape:
            raise ValueError(f"upstream gradient has shape {np.shape(upstream)}, "
                             f"output has shape {out_shape if not cache.squeeze else out_shape[1:]}")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            L = self.layers[i]
            if cache.masks[i] is not None:
                G = G * cache.masks[i]
            dZ = G * _act_grad(cache.pre[i], cache.post[i], L.activation)
            grads[i] = (dZ.T @ cache.inputs[i], dZ.sum(axis=0))
            G = dZ @ L.weights
        return grads, (G[0] if cache.squeeze else G)

    # -- flat parameter vector ---------------------------------------------

    def get_flat(self):
        return np.concatenate([np.concatenate([L.weights.ravel(), L.biases]) for L in self.layers])

    def set_flat(self, v):
        v = np.asarray(v, float)
        if v.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        k = 0
        for L in self.layers:
            m = L.weights.size
            L.weights = v[k:k + m].reshape(L.weights.shape).copy()
            k += m
            L.biases = v[k:k + L.biases.size].copy()
            k += L.biases.size
        return self

    @staticmethod
    def flatten_grads(grads):
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])

    def copy(self):
        return Network([Layer(L.weights.copy(), L.biases.copy(), L.activation)
                        for L in self.layers], self.input_dim)

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        return {"input_dim": self.input_dim, "dims": self.dims,
                "layers": [{"weights": L.weights.tolist(), "biases": L.biases.tolist(),
                            "activation": L.activation} for L in self.layers]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls([Layer(np.asarray(L["weights"], float).reshape(len(L["biases"]), -1),
                          L["biases"], L["activation"]) for L in d["layers"]],
                   int(d["input_dim"]))


def forward(net: Network, x, **kw):
    return net.forward(x, **kw)


def backward(net: Network, upstream, cache: ForwardCache):
    return net.backward(upstream, cache)[0]


def init_network(input_dim, hidden=(16,), output_dim=1, activation="relu", rng=None,
                 output_activation="linear") -> Network:
    """Random network; relu layers use He-scaled uniform weights
    ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``, other layers the Glorot
    range ``sqrt(6 / (fan_in + fan_out))``. Biases start at zero."""
    rng = np.random.default_rng(rng)
    dims = [int(input_dim)] + [int(h) for h in hidden] + [int(output_dim)]
    acts = [activation] * len(hidden) + [output_activation]
    layers = []
    for k_in, k_out, a in zip(dims[:-1], dims[1:], acts):
        lim = np.sqrt(6.0 / k_in) if a == "relu" else np.sqrt(6.0 / (k_in + k_out))
        layers.append(Layer(rng.uniform(-lim, lim, size=(k_out, k_in)), np.zeros(k_out), a))
    return Network(layers, int(input_dim))


def gd_backtracking(fun, x0, lr=0.1, epochs=200, grow=1.1, max_halvings=40, tol=1e-10):
    """Full-batch gradient descent with step halving.

    ``fun(x, epoch)`` returns ``(value, gradient)``; within an epoch it must be
    deterministic (a dropout mask is held fixed by the caller through ``epoch``).
    A step is accepted only if the value does not increase; the learning rate
    is multiplied by ``grow`` after an accepted step and halved on rejection.
    Returns ``(x, trace, converged)`` where ``trace`` holds the accepted values.
    """
    x = np.asarray(x0, float).copy()
    trace = []
    converged = False
    for ep in range(epochs):
        val, g = fun(x, ep)
        if not trace:
            trace.append(val)
        accepted = False
        for _ in range(max_halvings):
            cand = x - lr * g
            new_val, _ = fun(cand, ep)
            if np.isfinite(new_val) and new_val <= val:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            converged = True
            trace.append(val)
            break
        decrease = val - new_val
        x = cand
        trace.append(new_val)
        lr *= grow
        if decrease <= tol * max(1.0, abs(val)):
            converged = True
            break
    return x, np.asarray(trace), converged


@dataclass
class CoxNetFit:
    network: Network
    loss_trace: np.ndarray
    converged: bool
    feature_names: tuple = ()

    def risk(self, X):
        return np.asarray(self.network.forward(np.atleast_2d(X)))[:, 0]

    def to_dict(self):
        return {"network": self.network.to_dict(), "loss_trace": self.loss_trace.tolist(),
                "converged": self.converged, "feature_names": list(self.feature_names)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(Network.from_dict(d["network"]), np.asarray(d["loss_trace"], float),
                   bool(d["converged"]), tuple(d["feature_names"]))


def train_cox_net(ds: SurvivalDataset, hidden=(16,), lr=0.5, epochs=500, seed=0, dropout=0.0,
                  activation="relu") -> CoxNetFit:
    """Fit ``F(x) = forward(net, x)`` by minimizing the negative log partial
    likelihood divided by ``n``, full-batch, with backtracking steps.

    ``hidden = ()`` gives the linear Cox model. With dropout, one mask per
    epoch is drawn from the seeded generator and held fixed while the step is
    searched, so the masked loss is non-increasing within each epoch.
    """
    ds.require_events()
    if not 0 <= dropout < 1:
        raise ValueError("dropout must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    net = init_network(ds.p, hidden, 1, activation, rng)
    rs = CoxRiskSets(ds.time, ds.event)
    X = ds.X
    n = ds.n
    mask_seeds = rng.integers(0, 2 ** 63 - 1, size=epochs) if dropout else None
    work = net.copy()

    def fun(v, ep):
        work.set_flat(v)
        mrng = np.random.default_rng(mask_seeds[ep]) if dropout else None
        out, cache = work.forward(X, dropout=dropout, rng=mrng, return_cache=True)
        val, g = rs.loss_grad(out[:, 0])
        if not np.isfinite(val):
            return np.inf, None
        grads, _ = work.backward(g[:, None] / n, cache)
        return val / n, Network.flatten_grads(grads)

    v, trace, conv = gd_backtracking(fun, net.get_flat(), lr, epochs)
    net.set_flat(v)
    return CoxNetFit(net, trace, conv, ds.feature_names)

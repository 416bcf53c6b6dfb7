"""Small feed-forward networks with hand-written backprop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

ACTIVATIONS = ("relu", "identity")


class Mlp:
    """Fully connected network on a flat parameter vector.

    ``activations`` has one entry per weight layer. By default hidden layers
    are relu and the output layer is identity.
    """

    def __init__(self, layer_sizes: Sequence[int], activations: Sequence[str] | None = None,
                 seed: int | np.random.Generator | None = None, zero_output: bool = False):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if activations is None:
            activations = ["relu"] * (len(sizes) - 2) + ["identity"]
        activations = list(activations)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per weight layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.layer_sizes = sizes
        self.activations = activations
        self._sizes = np.asarray(sizes, dtype=np.int64)
        self._relu = np.asarray([a == "relu" for a in activations], dtype=np.bool_)
        n_params = sum(m * k + k for m, k in zip(sizes[:-1], sizes[1:]))
        self.params = np.zeros(n_params)
        self.grads = np.zeros(n_params)
        self._acts: np.ndarray | None = None
        self._batch = 0
        self.init_params(seed, zero_output=zero_output)

    def init_params(self, seed=None, zero_output: bool = False) -> None:
        """Uniform fan-in initialisation, U(-1/sqrt(m), 1/sqrt(m)) for W and b."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        p = 0
        last = len(self.layer_sizes) - 2
        for l, (m, k) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            bound = 1.0 / np.sqrt(m)
            block = rng.uniform(-bound, bound, size=m * k + k)
            if zero_output and l == last:
                block[:] = 0.0
            self.params[p : p + m * k + k] = block
            p += m * k + k

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def layer_slices(self):
        """Yield (W view, b view) for every layer, in order."""
        p = 0
        for m, k in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = self.params[p : p + m * k].reshape(m, k)
            p += m * k
            b = self.params[p : p + k]
            p += k
            yield w, b

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ValueError(f"expected input width {self.n_inputs}, got shape {x.shape}")
        return np.ascontiguousarray(x)

    def forward(self, x) -> np.ndarray:
        """Batch forward pass; caches activations for :meth:`backward`."""
        xb = self._as_batch(x)
        acts = kernels.mlp_forward(self.params, self._sizes, self._relu, xb)
        self._acts = acts
        self._batch = xb.shape[0]
        n_out = self._batch * self.n_outputs
        return acts[acts.shape[0] - n_out :].reshape(self._batch, self.n_outputs).copy()

    def forward_cache(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Forward pass returning (output, activation cache) without touching the
        internal cache; pass the cache to :meth:`backward` later."""
        xb = self._as_batch(x)
        acts = kernels.mlp_forward(self.params, self._sizes, self._relu, xb)
        n_out = xb.shape[0] * self.n_outputs
        return acts[acts.shape[0] - n_out :].reshape(xb.shape[0], self.n_outputs).copy(), acts

    def predict(self, x) -> np.ndarray:
        """Forward pass without caching."""
        return kernels.mlp_predict(self.params, self._sizes, self._relu, self._as_batch(x))

    def backward(self, grad_out, cache: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients for d(loss)/d(output) = ``grad_out``."""
        acts = self._acts if cache is None else cache
        if acts is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        n = acts.shape[0] // int(self._sizes.sum())
        if g.shape != (n, self.n_outputs):
            raise ValueError(f"output gradient shape {g.shape} != {(n, self.n_outputs)}")
        kernels.mlp_backward(self.params, self._sizes, self._relu, acts,
                             np.ascontiguousarray(g), self.grads)

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def copy_from(self, other: "Mlp") -> None:
        if other.layer_sizes != self.layer_sizes or other.activations != self.activations:
            raise ValueError("architecture mismatch")
        self.params[:] = other.params

    def clone(self) -> "Mlp":
        net = Mlp(self.layer_sizes, self.activations, seed=0)
        net.params[:] = self.params
        return net

    # serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "activations": self.activations,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        net = cls(data["layer_sizes"], data["activations"], seed=0)
        params = np.asarray(data["params"], dtype=np.float64)
        if params.shape != net.params.shape:
            raise ValueError(f"expected {net.params.size} params, got {params.size}")
        net.params[:] = params
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Sgd:
    lr: float
    kind: str = field(default="sgd", init=False)

    def step(self, net: Mlp) -> None:
        kernels.sgd_update(net.params, net.grads, self.lr)


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kind: str = field(default="adam", init=False)
    t: int = field(default=0, init=False)
    m: np.ndarray | None = field(default=None, init=False, repr=False)
    v: np.ndarray | None = field(default=None, init=False, repr=False)

    def step(self, net: Mlp) -> None:
        if self.m is None:
            self.m = np.zeros_like(net.params)
            self.v = np.zeros_like(net.params)
        self.t += 1
        kernels.adam_update(net.params, net.grads, self.m, self.v, self.lr,
                            self.beta1, self.beta2, self.eps, self.t)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def clip_grad_norm(net: Mlp, max_norm: float) -> float:
    """Rescale ``net.grads`` in place so its L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(np.dot(net.grads, net.grads)))
    if max_norm > 0 and norm > max_norm:
        net.grads *= max_norm / norm
    return norm

"""Small tanh MLP with hand-written reverse accumulation, plus Adam.

Parameters live in one flat float64 vector. Layer ``l`` stores its weight
matrix ``W`` of shape ``(fan_in, fan_out)`` row-major, followed by its bias
``b`` of shape ``(fan_out,)``. Hidden layers use tanh, the output layer is
affine.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, NumericError


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum((fi + 1) * fo for fi, fo in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True, eq=False)
class Mlp:
    layer_sizes: tuple[int, ...]
    params: np.ndarray
    _slices: list = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractViolation(f"bad layer sizes {sizes}")
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (n_params(sizes),):
            raise ContractViolation(
                f"expected {n_params(sizes)} params for {sizes}, got {params.shape}"
            )
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "params", params)
        slices, start = [], 0
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            w = slice(start, start + fi * fo)
            b = slice(w.stop, w.stop + fo)
            slices.append((w, b, fi, fo))
            start = b.stop
        object.__setattr__(self, "_slices", slices)

    @classmethod
    def init(cls, layer_sizes: Sequence[int], seed=0) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for fi, fo in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fi + fo))
            chunks.append(rng.uniform(-limit, limit, size=fi * fo))
            chunks.append(np.zeros(fo))
        return cls(tuple(layer_sizes), np.concatenate(chunks))

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "Mlp":
        return cls(tuple(layer_sizes), np.zeros(n_params(layer_sizes)))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params: np.ndarray) -> "Mlp":
        return replace(self, params=np.array(params, dtype=np.float64))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.params[w].reshape(fi, fo), self.params[b])
            for w, b, fi, fo in self._slices
        ]

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ContractViolation(f"input shape {x.shape} does not match n_in={self.n_in}")
        return X, single

    def _activations(self, X: np.ndarray) -> list[np.ndarray]:
        acts = [X]
        h = X
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            h = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        X, single = self._check_input(x)
        out = self._activations(X)[-1]
        return out[0] if single else out

    def _deltas(self, X: np.ndarray, upstream) -> tuple[list, list]:
        U = np.asarray(upstream, dtype=np.float64)
        if U.ndim == 1:
            U = U[None, :]
        if U.shape != (X.shape[0], self.n_out):
            raise ContractViolation(
                f"upstream shape {np.shape(upstream)} does not match output ({X.shape[0]}, {self.n_out})"
            )
        acts = self._activations(X)
        layers = self.layers()
        deltas = [None] * len(layers)
        delta = U
        for l in range(len(layers) - 1, -1, -1):
            deltas[l] = delta
            if l > 0:
                delta = (delta @ layers[l][0].T) * (1.0 - acts[l] ** 2)
        return acts, deltas

    def param_gradient(self, x, upstream) -> np.ndarray:
        """Gradient of ``sum_i upstream_i . forward(x_i)`` w.r.t. params."""
        X, _ = self._check_input(x)
        acts, deltas = self._deltas(X, upstream)
        grad = np.empty(self.n_params)
        for (w, b, _, _), a, d in zip(self._slices, acts[:-1], deltas):
            grad[w] = (a.T @ d).ravel()
            grad[b] = d.sum(axis=0)
        return grad

    def per_sample_param_gradient(self, X, upstream) -> np.ndarray:
        """Row ``i`` is the gradient of ``upstream_i . forward(x_i)``."""
        X, _ = self._check_input(X)
        acts, deltas = self._deltas(X, upstream)
        grad = np.empty((X.shape[0], self.n_params))
        for (w, b, fi, fo), a, d in zip(self._slices, acts[:-1], deltas):
            grad[:, w] = np.einsum("bi,bo->bio", a, d).reshape(X.shape[0], fi * fo)
            grad[:, b] = d
        return grad

    def save(self, path) -> None:
        header = "layer_sizes=" + ";".join(str(s) for s in self.layer_sizes)
        np.savetxt(path, self.params, header=header, fmt="%.17g")

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            first = fh.readline().lstrip("# ").strip()
        sizes = tuple(int(s) for s in first.split("=", 1)[1].split(";"))
        return cls(sizes, np.atleast_1d(np.loadtxt(path)))


def mlp_forward(m: Mlp, x) -> np.ndarray:
    return m.forward(x)


def mlp_param_gradient(m: Mlp, x, upstream) -> np.ndarray:
    return m.param_gradient(x, upstream)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamConfig
) -> tuple[np.ndarray, AdamState]:
    """One descent step of Adam with decoupled weight decay.

    To ascend, pass the negated gradient.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ContractViolation("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError(f"non-finite gradient entry at index {bad}")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    new = params * (1.0 - hyper.lr * hyper.weight_decay)
    new = new - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, t)

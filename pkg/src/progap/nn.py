"""Dense neural building blocks with hand-written gradients.

Parameters live in plain ``dict[str, ndarray]`` objects so that optimizers,
gradient clipping and checkpointing can treat any model as a flat bundle of
named tensors.
"""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .rng import make_rng

SELU_SCALE = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

GradientBundle = Dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


def selu(x):
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0)))


def selu_grad(x):
    return SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0)))


def glorot_uniform(rng, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Mlp:
    """Stack of linear layers, each followed by optional norm and SeLU.

    Parameters
    ----------
    dims : sequence of int
        Layer widths ``[d_in, h_1, ..., d_out]``.
    norm : {"none", "batch", "group"}
        Normalization after each activated linear map. ``"group"`` is group
        norm with a single group, i.e. per-row standardization over channels.
    plain_last : bool
        If true the last layer is a bare linear map (no norm, no activation).
    """

    NORMS = ("none", "batch", "group")

    def __init__(self, dims: Sequence[int], norm: str = "none", plain_last: bool = False,
                 seed: int = 0, dtype=np.float32):
        if len(dims) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        if norm not in self.NORMS:
            raise ValueError(f"norm must be one of {self.NORMS}, got {norm!r}")
        self.dims = [int(d) for d in dims]
        self.norm = norm
        self.plain_last = plain_last
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = make_rng(seed, "mlp-init")
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.params[f"{i}.weight"] = glorot_uniform(rng, fan_in, fan_out, self.dtype)
            self.params[f"{i}.bias"] = np.zeros(fan_out, self.dtype)
            if self._normed(i):
                self.params[f"{i}.norm.weight"] = np.ones(fan_out, self.dtype)
                self.params[f"{i}.norm.bias"] = np.zeros(fan_out, self.dtype)
                if norm == "batch":
                    self.buffers[f"{i}.norm.running_mean"] = np.zeros(fan_out, self.dtype)
                    self.buffers[f"{i}.norm.running_var"] = np.ones(fan_out, self.dtype)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def _activated(self, i: int) -> bool:
        return not (self.plain_last and i == self.num_layers - 1)

    def _normed(self, i: int) -> bool:
        return self.norm != "none" and self._activated(i)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = np.array(state[k], dtype=self.dtype)

    def forward(self, x: np.ndarray, train: bool = False):
        """Return ``(output, cache)``; ``cache`` feeds :meth:`backward`.

        In training mode batch norm uses batch statistics and updates its
        running estimates; in eval mode it uses the running estimates.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        cache = []
        for i in range(self.num_layers):
            entry = {"x": x}
            z = x @ self.params[f"{i}.weight"] + self.params[f"{i}.bias"]
            if self._normed(i):
                xhat, inv_std, batch_stats = self._normalize(i, z, train)
                entry.update(xhat=xhat, inv_std=inv_std, batch_stats=batch_stats)
                z = xhat * self.params[f"{i}.norm.weight"] + self.params[f"{i}.norm.bias"]
            if self._activated(i):
                entry["pre_act"] = z
                z = selu(z)
            cache.append(entry)
            x = z
        return x, cache

    def _normalize(self, i, z, train):
        if self.norm == "group":
            mean = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
            return (z - mean) * inv_std, inv_std, False
        rm = self.buffers[f"{i}.norm.running_mean"]
        rv = self.buffers[f"{i}.norm.running_var"]
        if train:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            b = z.shape[0]
            unbiased = var * b / (b - 1) if b > 1 else var
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * unbiased
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
            return (z - mean) * inv_std, inv_std, True
        inv_std = 1.0 / np.sqrt(rv + NORM_EPS)
        return (z - rm) * inv_std, inv_std, False

    def backward(self, cache, grad_out: np.ndarray, per_sample: bool = False):
        """Gradients of a scalar loss given ``d loss / d output``.

        Returns ``(grads, grad_input)``. With ``per_sample=True`` each
        gradient gains a leading batch axis holding the contribution of each
        input row; this requires that no layer mixes rows (batch norm in
        training mode does).
        """
        g = np.asarray(grad_out, dtype=self.dtype)
        batch = cache[0]["x"].shape[0]
        if g.shape != (batch, self.out_dim):
            raise ShapeError(f"upstream gradient shape {g.shape} != {(batch, self.out_dim)}")
        grads: GradientBundle = {}
        for i in reversed(range(self.num_layers)):
            entry = cache[i]
            if self._activated(i):
                g = g * selu_grad(entry["pre_act"])
            if self._normed(i):
                xhat, inv_std = entry["xhat"], entry["inv_std"]
                gamma = self.params[f"{i}.norm.weight"]
                if per_sample:
                    if entry["batch_stats"]:
                        raise ValueError("per-sample gradients are undefined under batch statistics")
                    grads[f"{i}.norm.weight"] = g * xhat
                    grads[f"{i}.norm.bias"] = g
                else:
                    grads[f"{i}.norm.weight"] = (g * xhat).sum(axis=0)
                    grads[f"{i}.norm.bias"] = g.sum(axis=0)
                dxhat = g * gamma
                if self.norm == "group":
                    h = dxhat.shape[1]
                    g = inv_std / h * (h * dxhat - dxhat.sum(axis=1, keepdims=True)
                                       - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
                elif entry["batch_stats"]:
                    b = dxhat.shape[0]
                    g = inv_std / b * (b * dxhat - dxhat.sum(axis=0)
                                       - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    g = dxhat * inv_std
            x = entry["x"]
            if per_sample:
                grads[f"{i}.weight"] = np.einsum("bi,bo->bio", x, g)
                grads[f"{i}.bias"] = g
            else:
                grads[f"{i}.weight"] = x.T @ g
                grads[f"{i}.bias"] = g.sum(axis=0)
            g = g @ self.params[f"{i}.weight"].T
        return grads, g


def jk_concat(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate stage embeddings column-wise, in stage order."""
    if not embeddings:
        raise ShapeError("need at least one embedding")
    rows = {e.shape[0] for e in embeddings}
    if len(rows) != 1:
        raise ShapeError(f"embeddings disagree on row count: {sorted(rows)}")
    return np.concatenate(embeddings, axis=1)


def jk_split(grad: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    """Route the gradient of a concatenation back to its inputs."""
    if grad.shape[-1] != sum(widths):
        raise ShapeError("gradient width does not match the concatenated widths")
    return np.split(grad, np.cumsum(widths)[:-1], axis=-1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean() if b else 0.0
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / max(b, 1)


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, so ties go to the lowest class
    return np.argmax(logits, axis=1)


def predict_proba(logits: np.ndarray) -> np.ndarray:
    return softmax(logits, axis=1)

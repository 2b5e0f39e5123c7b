"""Shared router: pooled token descriptor -> MLP -> softmax merge weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nk
from .errors import DataError, DimensionError


@dataclass
class RouterMLP:
    w1: np.ndarray  # (d, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, K)
    b2: np.ndarray
    trainable: bool = True

    @property
    def width(self):
        return self.w2.shape[1]

    @property
    def in_dim(self):
        return self.w1.shape[0]

    def named(self):
        return [("router.l1.w", self.w1), ("router.l1.b", self.b1),
                ("router.l2.w", self.w2), ("router.l2.b", self.b2)]

    def tensors(self):
        return [t for _, t in self.named()]

    def astype(self, dtype):
        return RouterMLP(*(t.astype(dtype) for t in self.tensors()), trainable=self.trainable)

    def widened(self):
        """Copy with one extra output column, zero-initialized."""
        w2 = np.concatenate([self.w2, np.zeros((self.w2.shape[0], 1), self.w2.dtype)], axis=1)
        b2 = np.concatenate([self.b2, np.zeros(1, self.b2.dtype)])
        return RouterMLP(self.w1.copy(), self.b1.copy(), w2, b2, self.trainable)


def init_router(dim, k, hidden=128, seed=0):
    rng = np.random.default_rng([int(seed), 0x2007])
    w1 = (rng.standard_normal((dim, hidden)) / np.sqrt(dim)).astype(np.float32)
    w2 = (rng.standard_normal((hidden, k)) * 0.02).astype(np.float32)
    return RouterMLP(w1, np.zeros(hidden, np.float32), w2, np.zeros(k, np.float32))


def pool(x):
    """Mean over token rows; (N, d) -> (d,) or (B, N, d) -> (B, d)."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError("pooling needs at least one token")
    return x.mean(axis=-2)


def pool_backward(dpooled, n_tokens):
    return np.repeat((dpooled / n_tokens)[..., None, :], n_tokens, axis=-2)


def route(descriptor, mlp: RouterMLP, cache=None):
    """Merge weights ``softmax(MLP(descriptor))`` for a (d,) or (B, d) descriptor."""
    x = np.asarray(descriptor)
    if x.shape[-1] != mlp.in_dim:
        raise DimensionError(f"descriptor width {x.shape[-1]} != router input {mlp.in_dim}")
    a = x @ mlp.w1 + mlp.b1
    h = nk.gelu(a)
    pi = nk.softmax_rows(h @ mlp.w2 + mlp.b2)
    if cache is not None:
        cache.update(x=x, a=a, h=h, pi=pi)
    return pi


def route_backward(cache, dpi, mlp: RouterMLP):
    """Returns (d descriptor, {name: grad}) for a batched cache."""
    dz = nk.softmax_backward(cache["pi"], dpi)
    dh, dw2 = nk.matmul_backward(cache["h"], mlp.w2, dz)
    da = nk.gelu_backward(cache["a"], dh)
    dx, dw1 = nk.matmul_backward(cache["x"], mlp.w1, da)
    grads = {"router.l1.w": dw1, "router.l1.b": da.reshape(-1, da.shape[-1]).sum(0),
             "router.l2.w": dw2, "router.l2.b": dz.reshape(-1, dz.shape[-1]).sum(0)}
    return dx, grads


def routing_target(sample, k):
    """(target, mask): one-hot for plain fakes, ``lam e_a + (1 - lam) e_b`` for fused fakes.

    Reals carry no routing supervision (mask False). Generator ids are 1-based.
    """
    target = np.zeros(k)
    if sample.fusion is not None:
        a, b, lam = sample.fusion
        if a == b:
            raise DataError("fused sample with identical generators")
        if not (1 <= a <= k and 1 <= b <= k):
            return target, False
        target[a - 1] += lam
        target[b - 1] += 1.0 - lam
        return target, True
    if sample.g == 0 or sample.g > k:
        return target, False
    target[sample.g - 1] = 1.0
    return target, True


def routing_loss(pred, targets, mask):
    """Soft cross-entropy averaged over masked-in rows; returns (loss, has_signal)."""
    pred = np.asarray(pred)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0, False
    return nk.cross_entropy_soft(pred[mask], targets[mask]), True


def routing_loss_backward(pred, targets, mask):
    pred = np.asarray(pred)
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(pred)
    if mask.any():
        grad[mask] = nk.cross_entropy_soft_backward(pred[mask], np.asarray(targets)[mask])
    return grad

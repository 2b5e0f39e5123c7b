"""Forgery detection head: single-query attention pooling plus a linear real/fake classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nk
from .errors import DataError, DimensionError

HEAD_MODES = ("attn_pool", "cls_token")


@dataclass
class AttentionPool:
    q: np.ndarray   # (d,)
    wk: np.ndarray  # (d, d)
    wv: np.ndarray  # (d, d)


@dataclass
class Classifier:
    w: np.ndarray  # (d, 2)
    b: np.ndarray  # (2,)


@dataclass
class DetectionHead:
    attn: AttentionPool
    clf: Classifier
    mode: str = "attn_pool"

    def named(self):
        out = []
        if self.mode == "attn_pool":
            out += [("head.attn.q", self.attn.q), ("head.attn.wk", self.attn.wk), ("head.attn.wv", self.attn.wv)]
        return out + [("head.clf.w", self.clf.w), ("head.clf.b", self.clf.b)]

    def astype(self, dtype):
        return DetectionHead(AttentionPool(self.attn.q.astype(dtype), self.attn.wk.astype(dtype),
                                           self.attn.wv.astype(dtype)),
                             Classifier(self.clf.w.astype(dtype), self.clf.b.astype(dtype)), self.mode)


def init_head(dim, seed=0, mode="attn_pool"):
    """Random pooling projections, zero classifier (so untrained output is [0.5, 0.5])."""
    rng = np.random.default_rng([int(seed), 0x4EAD])
    std = 1.0 / math.sqrt(dim)
    attn = AttentionPool((rng.standard_normal(dim) * 0.02).astype(np.float32),
                         (rng.standard_normal((dim, dim)) * std).astype(np.float32),
                         (rng.standard_normal((dim, dim)) * std).astype(np.float32))
    return DetectionHead(attn, Classifier(np.zeros((dim, 2), np.float32), np.zeros(2, np.float32)), mode)


def attn_pool(tokens, pool: AttentionPool, cache=None):
    """``sum_n softmax(q . (X Wk)_n / sqrt(d)) (X Wv)_n`` for (N, d) or (B, N, d) tokens."""
    x = np.asarray(tokens)
    d = pool.q.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"token width {x.shape[-1]} != head width {d}")
    keys = x @ pool.wk
    values = x @ pool.wv
    scores = nk.softmax_rows((keys @ pool.q) / math.sqrt(d))
    out = (scores[..., None] * values).sum(axis=-2)
    if cache is not None:
        cache.update(x=x, keys=keys, values=values, scores=scores)
    return out


def attn_pool_backward(cache, dout, pool: AttentionPool):
    x, keys, values, s = cache["x"], cache["keys"], cache["values"], cache["scores"]
    d = pool.q.shape[0]
    dvalues = s[..., None] * dout[..., None, :]
    ds = (values * dout[..., None, :]).sum(-1)
    dlogit = nk.softmax_backward(s, ds) / math.sqrt(d)
    dkeys = dlogit[..., None] * pool.q
    dq = (dlogit[..., None] * keys).reshape(-1, d).sum(0)
    dx_k, dwk = nk.matmul_backward(x, pool.wk, dkeys)
    dx_v, dwv = nk.matmul_backward(x, pool.wv, dvalues)
    return dx_k + dx_v, {"head.attn.q": dq, "head.attn.wk": dwk, "head.attn.wv": dwv}


def classify(feature, clf: Classifier):
    """``softmax(feature @ W + b)``; column 1 is the fake probability."""
    f = np.asarray(feature)
    if f.shape[-1] != clf.w.shape[0]:
        raise DimensionError(f"feature width {f.shape[-1]} != classifier width {clf.w.shape[0]}")
    return nk.softmax_rows(f @ clf.w + clf.b)


def classify_backward(feature, probs, dprobs, clf: Classifier):
    dz = nk.softmax_backward(probs, dprobs)
    df, dw = nk.matmul_backward(np.atleast_2d(feature), clf.w, np.atleast_2d(dz))
    return df.reshape(np.shape(feature)), {"head.clf.w": dw, "head.clf.b": np.atleast_2d(dz).sum(0)}


def one_hot_labels(labels):
    y = np.asarray(labels)
    if y.size == 0:
        raise DataError("empty batch")
    if np.any((y != 0) & (y != 1)):
        raise DataError("labels must be 0 or 1")
    return np.eye(2)[y.astype(int)]


def cls_loss(probs, labels):
    """``-(1/B) sum_i log p[i, y_i]`` with the 1e-12 clamp."""
    target = one_hot_labels(labels)
    return nk.cross_entropy_soft(np.asarray(probs), target.astype(np.asarray(probs).dtype))


def cls_loss_backward(probs, labels):
    return nk.cross_entropy_soft_backward(probs, one_hot_labels(labels).astype(probs.dtype))

"""Per-generator low-rank branches and their router-weighted composition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nk
from .backbone import Injection
from .errors import ConfigError, InjectionError, RegistryError, RoutingError

SIMPLEX_TOL = 1e-5


@dataclass
class LoraBranch:
    """Low-rank factors ``A`` (d x r) and ``B`` (r x d) for every designated slot."""

    name: str
    rank: int
    alpha: float
    factors: dict = field(default_factory=dict)  # (layer, proj) -> (A, B)
    trainable: bool = True

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def slots(self):
        return frozenset(self.factors)

    def named(self):
        out = []
        for (layer, proj), (a, b) in sorted(self.factors.items()):
            out.append((f"lora.{self.name}.{layer}.{proj}.A", a))
            out.append((f"lora.{self.name}.{layer}.{proj}.B", b))
        return out

    def digest(self):
        return nk.tensor_digest(self.named())

    def astype(self, dtype):
        return LoraBranch(self.name, self.rank, self.alpha,
                          {s: (a.astype(dtype), b.astype(dtype)) for s, (a, b) in self.factors.items()},
                          self.trainable)


def init_branch(name, slots, dim, rank=4, alpha=8.0, seed=0, existing=()):
    """A ~ N(0, 0.02), B = 0 for each slot, so the initial residual is exactly zero."""
    if name in existing:
        raise RegistryError(f"generator {name!r} already has a branch")
    if not 1 <= rank <= dim:
        raise ConfigError(f"LoRA rank must satisfy 1 <= r <= {dim}, got {rank}")
    rng = np.random.default_rng([int(seed), 0x10A])
    factors = {}
    for slot in sorted(slots):
        a = (rng.standard_normal((dim, rank)) * 0.02).astype(np.float32)
        factors[slot] = (a, np.zeros((rank, dim), np.float32))
    return LoraBranch(name, int(rank), float(alpha), factors)


def branch_delta(x, branch: LoraBranch, slot):
    """``(alpha / r) * (x @ A) @ B`` for one slot, never forming ``A @ B``."""
    try:
        a, b = branch.factors[slot]
    except KeyError:
        raise InjectionError(f"branch {branch.name!r} has no slot {slot}") from None
    return branch.scale * ((x @ a) @ b)


@dataclass
class LoraHub:
    slots: frozenset
    branches: list = field(default_factory=list)

    def __post_init__(self):
        self.slots = frozenset(self.slots)
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise RegistryError("generator names in a hub must be unique")
        for b in self.branches:
            self._check_slots(b)

    def _check_slots(self, branch):
        if branch.slots != self.slots:
            raise RegistryError(f"branch {branch.name!r} covers {sorted(branch.slots)} "
                                f"but the hub designates {sorted(self.slots)}")

    def __len__(self):
        return len(self.branches)

    @property
    def names(self):
        return [b.name for b in self.branches]

    @property
    def scale(self):
        return self.branches[0].scale if self.branches else 1.0

    def named(self):
        return [item for b in self.branches for item in b.named()]

    def astype(self, dtype):
        return LoraHub(self.slots, [b.astype(dtype) for b in self.branches])


def add_branch(hub: LoraHub, branch: LoraBranch) -> LoraHub:
    """A new hub with ``branch`` appended; existing branch objects are shared unchanged."""
    if branch.name in hub.names:
        raise RegistryError(f"generator {branch.name!r} already has a branch")
    if hub.branches and (branch.rank, branch.alpha) != (hub.branches[0].rank, hub.branches[0].alpha):
        raise RegistryError("all branches in a hub share rank and alpha")
    return LoraHub(hub.slots, hub.branches + [branch])


def check_simplex(weights, k, tol=SIMPLEX_TOL):
    w = np.asarray(weights)
    if w.shape[-1] != k:
        raise RoutingError(f"merge weights have length {w.shape[-1]}, hub has {k} branches")
    if np.any(w < -tol) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise RoutingError("merge weights are not on the probability simplex")


def integrate(x, hub: LoraHub, weights, slot):
    """``(alpha / r) * sum_k pi_k (x @ A_k) @ B_k``.

    ``x`` is (N, d) with ``weights`` (K,), or (B, N, d) with per-sample
    ``weights`` (B, K).
    """
    k = len(hub)
    check_simplex(weights, k)
    w = np.asarray(weights)
    out = 0.0
    for i, branch in enumerate(hub.branches):
        pi = w[..., i]
        if x.ndim == 3 and pi.ndim == 1:
            pi = pi[:, None, None]
        out = out + pi * branch_delta(x, branch, slot)
    return out


class HubInjection(Injection):
    """Feeds the integrated residual of a hub into the encoder and collects gradients.

    ``weights`` is (B, K) merge weights, or a callable ``(layer, x) -> (B, K)``
    used for per-layer routing. Gradients w.r.t. trainable branch factors
    land in ``factor_grads``; gradients w.r.t. the merge weights of each layer
    land in ``weight_grads``.
    """

    def __init__(self, hub: LoraHub, weights, train_factors=False):
        self.hub = hub
        self.slots = hub.slots
        self.train_factors = train_factors
        self._fixed = None if callable(weights) else np.asarray(weights)
        self._router = weights if callable(weights) else None
        self.layer_weights = {}
        self._inputs = {}
        self.factor_grads = {}
        self.weight_grads = {}
        self.layer_router_backward = None

    def enter_layer(self, layer, x):
        if self._router is not None:
            self.layer_weights[layer] = self._router(layer, x)
        else:
            self.layer_weights[layer] = self._fixed

    def delta(self, layer, proj, h):
        pi = self.layer_weights[layer]
        self._inputs[(layer, proj)] = h
        scale = self.hub.scale
        out = 0.0
        for i, branch in enumerate(self.hub.branches):
            a, b = branch.factors[(layer, proj)]
            out = out + (scale * pi[:, i])[:, None, None] * ((h @ a) @ b)
        return out

    def delta_backward(self, layer, proj, g):
        h = self._inputs[(layer, proj)]
        pi = self.layer_weights[layer]
        scale = self.hub.scale
        dh = 0.0
        dpi = self.weight_grads.setdefault(layer, np.zeros_like(pi))
        for i, branch in enumerate(self.hub.branches):
            a, b = branch.factors[(layer, proj)]
            ha = h @ a
            gb = g @ b.T
            dpi[:, i] += scale * (ha * gb).sum(axis=(1, 2))
            w = (scale * pi[:, i])[:, None, None]
            dh = dh + w * (gb @ a.T)
            if self.train_factors and branch.trainable:
                ws = w * gb
                da = h.reshape(-1, h.shape[-1]).T @ ws.reshape(-1, ws.shape[-1])
                db = (w * ha).reshape(-1, ha.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                for key, grad in ((f"lora.{branch.name}.{layer}.{proj}.A", da),
                                  (f"lora.{branch.name}.{layer}.{proj}.B", db)):
                    prev = self.factor_grads.get(key)
                    self.factor_grads[key] = grad if prev is None else prev + grad
        return dh

    def enter_layer_backward(self, layer, dx):
        if self.layer_router_backward is None or layer not in self.weight_grads:
            return None
        return self.layer_router_backward(layer, self.weight_grads[layer])

"""Finite-difference checks of the two training objectives at a random probe point.

Fresh branches (B = 0) and a zero classifier make most gradients vanish, so
the probe model has its zero-initialized tensors filled with random values
before checking; the backbone stays at its seeded init.
"""

from __future__ import annotations

import time

import numpy as np

from . import numeric as nk
from .backbone import init_backbone
from .data import make_real, normalize
from .head import init_head
from .lora import LoraHub, init_branch
from .model import Detector, LossWeights, objective
from .router import init_router

TOLERANCE = 1e-4


def probe_model(run, seed=0, k=None):
    """A float64 detector for ``run``'s architecture with every tensor non-zero."""
    vit = run.vit()
    k = run.k if k is None else k
    rng = np.random.default_rng([int(seed), 0x6C])
    backbone = init_backbone(vit, run.backbone_seed, warmup=False)
    branches = []
    for i in range(k):
        br = init_branch(f"g{i + 1}", vit.slots, vit.embed_dim, run.rank, run.alpha, seed=int(seed) + i)
        for a, b in br.factors.values():
            b[...] = 0.3 * rng.standard_normal(b.shape)
        branches.append(br)
    router = init_router(vit.embed_dim, k, hidden=run.router_hidden, seed=int(seed))
    router.w2[...] = rng.standard_normal(router.w2.shape)
    head = init_head(vit.embed_dim, seed=int(seed), mode=run.head)
    head.clf.w[...] = rng.standard_normal(head.clf.w.shape)
    if run.head == "attn_pool":
        head.attn.q[...] = rng.standard_normal(head.attn.q.shape)
    hub = LoraHub(vit.slots, branches)
    return Detector(backbone, hub, head, router, run.route_per_layer).astype(np.float64)


def _probe_batch(run, batch, k, seed):
    vit = run.vit()
    images = np.stack([normalize(make_real([int(seed), 0x6D, i], vit.image_size, vit.channels))
                       for i in range(batch)]).astype(np.float64)
    labels = np.arange(batch) % 2
    targets = np.zeros((batch, k))
    mask = labels == 1
    for i in np.flatnonzero(mask):
        if k == 1:
            targets[i, 0] = 1.0
        else:
            # a GenMix-style soft target
            a, b = i % k, (i + 1) % k
            targets[i, a], targets[i, b] = 0.25, 0.75
    return images, labels, targets, mask


def _loss_fn(model, images, labels, targets, mask, weights, **flags):
    def fn(store):
        losses, grads, _, _ = objective(model, images, labels, targets, mask, weights, **flags)
        for name, g in grads.items():
            if name in store and store.param(name).trainable:
                store.accumulate(name, g)
        return losses["total"]
    return fn


def check_gradients(run, batch=2, seed=0, n_coords=32, eps=1e-4):
    """Gradcheck stage 1 (one branch + temp head) and stage 2 (router + head).

    Returns a dict with per-stage reports, the overall maximum relative error
    and the wall time.
    """
    start = time.perf_counter()
    k = max(run.k, 1)
    full = probe_model(run, seed, k)
    images, labels, targets, mask = _probe_batch(run, batch, k, seed)

    one = Detector(full.backbone, LoraHub(full.hub.slots, [full.hub.branches[0]]), full.head)
    store1 = one.params()
    store1.set_trainable(f"lora.{one.names[0]}.", True)
    store1.set_trainable("head.", True)
    rep1 = nk.gradcheck(_loss_fn(one, images, labels, None, None, LossWeights(), train_factors=True),
                        store1, eps=eps, n_coords=n_coords, seed=seed)

    store2 = full.params()
    store2.set_trainable("router.", True)
    store2.set_trainable("head.", True)
    weights = LossWeights(run.lambda_route, run.lambda_reg)
    rep2 = nk.gradcheck(_loss_fn(full, images, labels, targets, mask, weights, train_router=True),
                        store2, eps=eps, n_coords=n_coords, seed=seed)

    worst = max(rep1.max_rel_error, rep2.max_rel_error)
    return {"stage1": {"max_rel_error": rep1.max_rel_error, "checked": rep1.n_checked,
                       "floored": rep1.n_floored, "groups": rep1.per_group},
            "stage2": {"max_rel_error": rep2.max_rel_error, "checked": rep2.n_checked,
                       "floored": rep2.n_floored, "groups": rep2.per_group},
            "max_rel_error": worst, "passed": bool(worst < TOLERANCE),
            "seconds": time.perf_counter() - start}

"""Two-stage training: per-generator branch specialization, then router + head alignment.

Stage 1 trains one LoRA branch with a throwaway head on reals plus a single
generator's fakes. Stage 2 freezes every branch and trains the router and a
detection head on the full mixture, with routing supervision and
occasional fake-fake fusion. Freezing is checked by hashing tensors at the
stage boundaries.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nk
from .backbone import BackboneWeights, init_backbone
from .data import AugmentationConfig, Sample, augment, genmix, normalize
from .errors import ConfigError, DataError, StateError, TrainingError
from .head import init_head
from .lora import LoraBranch, LoraHub, add_branch, init_branch
from .model import Detector, LossWeights, objective
from .router import init_router, routing_target

_STAGE1_TAG = 0x51
_STAGE2_TAG = 0x52


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def state(self):
        return nk.OptimState(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class Stage1Config:
    generator_name: str
    epochs: int = 5
    batch_size: int = 32
    optim: OptimConfig = OptimConfig()
    augment: AugmentationConfig | None = AugmentationConfig()
    seed: int = 0
    head_mode: str = "attn_pool"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("stage 1 needs epochs >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 5
    batch_size: int = 32
    lambda_route: float = 1.0
    lambda_reg: float = 1e-4
    p_fuse: float = 0.15
    no_router: bool = False
    no_route_loss: bool = False
    no_fusion: bool = False
    joint_single_stage: bool = False
    optim: OptimConfig = OptimConfig()
    augment: AugmentationConfig | None = AugmentationConfig()
    seed: int = 0
    head_mode: str = "attn_pool"
    router_hidden: int = 128
    route_per_layer: bool = False
    fresh_head: bool = True

    def __post_init__(self):
        if self.lambda_route < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.p_fuse <= 1:
            raise ConfigError(f"p_fuse must lie in [0, 1], got {self.p_fuse}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("stage 2 needs epochs >= 0 and batch_size >= 1")
        if self.no_router and self.route_per_layer:
            raise ConfigError("no_router contradicts route_per_layer")

    @property
    def loss_weights(self):
        route = 0.0 if (self.no_route_loss or self.no_router) else self.lambda_route
        return LossWeights(route, 0.0 if self.no_router else self.lambda_reg)


# ---------------------------------------------------------------- logging


class TrainLog:
    """Per-step loss records; serialized as JSON lines."""

    def __init__(self, stage=""):
        self.stage = stage
        self.records = []

    def add(self, step, epoch, losses):
        for key in ("l_cls", "l_route", "l_reg", "total"):
            if not math.isfinite(losses[key]):
                raise TrainingError(f"non-finite {key} in {self.stage or 'training'}", step)
        self.records.append({"step": step, "epoch": epoch, "l_cls": float(losses["l_cls"]),
                             "l_route": float(losses["l_route"]), "l_reg": float(losses["l_reg"]),
                             "total": float(losses["total"])})

    def epoch_means(self, key="total"):
        by_epoch = {}
        for r in self.records:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}

    def summary(self):
        means = self.epoch_means()
        return {"stage": self.stage, "steps": len(self.records),
                "first_epoch_loss": means[min(means)] if means else None,
                "last_epoch_loss": means[max(means)] if means else None}

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


# ---------------------------------------------------------------- shared loop


def _batch_images(samples, aug, seed_parts):
    if aug is None:
        images = [s.image for s in samples]
    else:
        images = [augment(s.image, aug, [*seed_parts, i]) for i, s in enumerate(samples)]
    return normalize(np.stack(images)).astype(np.float32)


def _apply(store, grads):
    for name, g in grads.items():
        if name in store and store.param(name).trainable:
            store.accumulate(name, g)


def _epoch_order(n, seed, tag, epoch):
    return np.random.default_rng([int(seed), tag, epoch]).permutation(n)


def _check_frozen(before, after, what):
    if before != after:
        raise StateError(f"{what} changed during training")


# ---------------------------------------------------------------- stage 1


@dataclass
class Stage1Result:
    branch: LoraBranch
    head: object
    log: TrainLog


def train_stage1(samples, backbone: BackboneWeights, branch: LoraBranch, config: Stage1Config,
                 peers=()):
    """Specialize ``branch`` on reals plus one generator's fakes.

    Only the branch factors and a temporary head receive updates. ``peers``
    are other branches whose hashes are checked to stay unchanged.
    """
    if branch.name != config.generator_name:
        raise ConfigError(f"branch {branch.name!r} does not match generator {config.generator_name!r}")
    fake_ids = {s.g for s in samples if s.g != 0}
    if len(fake_ids) > 1:
        raise DataError(f"stage 1 data mixes fakes from generators {sorted(fake_ids)}")
    if not samples:
        raise DataError("empty stage 1 dataset")
    dim = backbone.config.embed_dim
    head = init_head(dim, seed=config.seed, mode=config.head_mode).astype(backbone["patch.w"].dtype)
    model = Detector(backbone, LoraHub(branch.slots, [branch]), head)
    store = model.params()
    store.set_trainable(f"lora.{branch.name}.", True)
    store.set_trainable("head.", True)
    frozen_bb = backbone.digest()
    frozen_peers = [p.digest() for p in peers]
    state = config.optim.state()
    log = TrainLog("stage1")
    labels_all = np.array([s.y for s in samples])
    step = 0
    for epoch in range(config.epochs):
        order = _epoch_order(len(samples), config.seed, _STAGE1_TAG, epoch)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            step += 1
            images = _batch_images([samples[i] for i in idx], config.augment,
                                   [config.seed, _STAGE1_TAG, epoch, start])
            losses, grads, _, _ = objective(model, images, labels_all[idx], train_factors=True)
            log.add(step, epoch + 1, losses)
            store.zero_grad()
            _apply(store, grads)
            nk.adamw_step(store, state)
    _check_frozen(frozen_bb, backbone.digest(), "backbone")
    _check_frozen(frozen_peers, [p.digest() for p in peers], "peer branches")
    return Stage1Result(branch, head, log)


# ---------------------------------------------------------------- stage 2


def align_generators(samples, dataset_names, hub_names):
    """Re-number generator ids so that id k means hub branch k (1-based).

    Generators without a branch get ids after the hub's, which the routing
    loss ignores.
    """
    dataset_names = list(dataset_names)
    hub_names = list(hub_names)
    extra = [n for n in dataset_names if n not in hub_names]
    new_id = {}
    for g, name in enumerate(dataset_names, start=1):
        new_id[g] = (hub_names.index(name) + 1 if name in hub_names
                     else len(hub_names) + 1 + extra.index(name))
    if all(new_id[g] == g for g in new_id):
        return list(samples)
    return [s if s.g == 0 else Sample(s.image, s.y, new_id[s.g]) for s in samples]


@dataclass
class Stage2Result:
    model: Detector
    log: TrainLog


def _fuse_batch(batch, pool_by_gen, gens, p_fuse, rng):
    """Replace each fake by a GenMix blend with probability ``p_fuse``."""
    out = []
    for s in batch:
        u, pick, lam = rng.random(), rng.random(), rng.random()
        others = [g for g in gens if g != s.g]
        if s.y == 1 and others and u < p_fuse:
            g = others[int(pick * len(others))]
            partner = pool_by_gen[g][int(rng.integers(len(pool_by_gen[g])))]
            out.append(genmix(s, partner, lam))
        else:
            out.append(s)
    return out


def prepare_stage2_model(model: Detector, config: Stage2Config):
    """Attach a router (unless disabled) and, if requested, a fresh head.

    A router or head carried over from ``model`` is copied, so training never
    touches the caller's model.
    """
    dim = model.backbone.config.embed_dim
    router = None
    if not config.no_router:
        router = (model.router.astype(model.router.w1.dtype) if model.router is not None
                  else init_router(dim, model.k, hidden=config.router_hidden, seed=config.seed))
    if config.fresh_head or model.head is None:
        head = init_head(dim, seed=config.seed + 1, mode=config.head_mode)
    else:
        head = model.head.astype(model.head.clf.w.dtype)
    return Detector(model.backbone, model.hub, head, router, config.route_per_layer)


def train_stage2(samples, model: Detector, config: Stage2Config, names=None):
    """Train router + head on the mixture with branches (and backbone) frozen.

    With ``joint_single_stage`` the branch factors train too. ``names`` are
    the dataset's generator names when its ids do not follow the hub order.
    """
    if model.k < 1:
        raise ConfigError("stage 2 needs at least one branch")
    if not samples:
        raise DataError("empty stage 2 dataset")
    if names is not None:
        samples = align_generators(samples, names, model.names)
    model = prepare_stage2_model(model, config)
    k = model.k
    store = model.params()
    store.set_trainable("head.", True)
    store.set_trainable("router.", True)
    joint = config.joint_single_stage
    if joint:
        store.set_trainable("lora.", True)
    frozen_bb = model.backbone.digest()
    frozen_hub = [b.digest() for b in model.hub.branches]
    weights = config.loss_weights
    p_fuse = 0.0 if config.no_fusion else config.p_fuse
    pool_by_gen = {}
    for s in samples:
        if s.g > 0:
            pool_by_gen.setdefault(s.g, []).append(s)
    gens = sorted(pool_by_gen)
    state = config.optim.state()
    log = TrainLog("stage2")
    step = 0
    for epoch in range(config.epochs):
        order = _epoch_order(len(samples), config.seed, _STAGE2_TAG, epoch)
        for start in range(0, len(order), config.batch_size):
            step += 1
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            rng = np.random.default_rng([int(config.seed), _STAGE2_TAG, epoch, start, 0xF5])
            if p_fuse > 0:
                batch = _fuse_batch(batch, pool_by_gen, gens, p_fuse, rng)
            images = _batch_images(batch, config.augment, [config.seed, _STAGE2_TAG, epoch, start])
            labels = np.array([s.y for s in batch])
            targets, mask = zip(*(routing_target(s, k) for s in batch))
            losses, grads, _, _ = objective(
                model, images, labels, np.array(targets, dtype=images.dtype), np.array(mask), weights,
                train_factors=joint, train_router=model.router is not None, train_head=True)
            log.add(step, epoch + 1, losses)
            store.zero_grad()
            _apply(store, grads)
            nk.adamw_step(store, state)
    _check_frozen(frozen_bb, model.backbone.digest(), "backbone")
    if not joint:
        _check_frozen(frozen_hub, [b.digest() for b in model.hub.branches], "LoRA hub")
    return Stage2Result(model, log)


# ---------------------------------------------------------------- pipelines


def stage1_config(run, name):
    return Stage1Config(
        generator_name=name, epochs=run.stage1_epochs, batch_size=run.stage1_batch_size,
        optim=OptimConfig(run.stage1_lr, run.stage1_weight_decay, run.stage1_beta1, run.stage1_beta2,
                          run.stage1_eps),
        augment=AugmentationConfig() if run.augment else None, seed=run.seed, head_mode=run.head)


def stage2_config(run, **overrides):
    cfg = Stage2Config(
        epochs=run.stage2_epochs, batch_size=run.stage2_batch_size, lambda_route=run.lambda_route,
        lambda_reg=run.lambda_reg, p_fuse=run.p_fuse, no_router=run.no_router,
        no_route_loss=run.no_route_loss, no_fusion=run.no_fusion,
        joint_single_stage=run.joint_single_stage,
        optim=OptimConfig(run.stage2_lr, run.stage2_weight_decay, run.stage2_beta1, run.stage2_beta2,
                          run.stage2_eps),
        augment=AugmentationConfig() if run.augment else None, seed=run.seed, head_mode=run.head,
        router_hidden=run.router_hidden, route_per_layer=run.route_per_layer)
    if cfg.joint_single_stage:
        cfg = replace(cfg, epochs=run.joint_epochs)
    return replace(cfg, **overrides)


def make_backbone(run):
    return init_backbone(run.vit(), run.backbone_seed)


def branch_seed(run, name):
    # keyed by name so a branch's init does not depend on its position in the hub
    return (int(run.seed) << 32) + zlib.crc32(name.encode())


def new_branch(run, name, existing=()):
    cfg = run.vit()
    return init_branch(name, cfg.slots, cfg.embed_dim, run.rank, run.alpha,
                       seed=branch_seed(run, name), existing=existing)


def specialize(run, dataset, name, backbone=None, peers=()):
    """Stage 1 for the dataset generator ``name``; returns the Stage1Result."""
    if name not in dataset.names:
        raise DataError(f"dataset has no generator named {name!r}")
    backbone = backbone if backbone is not None else make_backbone(run)
    g = dataset.names.index(name) + 1
    train = [s for s in dataset.train if s.g in (0, g)]
    return train_stage1(train, backbone, new_branch(run, name, [p.name for p in peers]),
                        stage1_config(run, name), peers)


def train_pipeline(run, dataset, branches=None, backbone=None):
    """Stage 1 for each of the first ``run.k`` generators, then stage 2.

    Pre-trained ``branches`` (by name) are reused instead of retraining.
    Returns ``(model, logs)`` where ``logs`` maps stage names to TrainLogs.
    """
    backbone = backbone if backbone is not None else make_backbone(run)
    names = dataset.names[:run.k]
    if len(names) < run.k:
        raise ConfigError(f"k={run.k} but the dataset has {len(dataset.names)} generators")
    branches = dict(branches or {})
    logs = {}
    trained = []
    for name in names:
        if name not in branches:
            res = specialize(run, dataset, name, backbone, trained)
            branches[name] = res.branch
            logs[f"stage1.{name}"] = res.log
        trained.append(branches[name])
    model = Detector(backbone, LoraHub(run.vit().slots, trained), None)
    res = train_stage2(dataset.train, model, stage2_config(run), names=dataset.names)
    logs["stage2"] = res.log
    return res.model, logs


def extend_with_generator(model: Detector, dataset, new_name, run):
    """Add a branch for ``new_name``: stage 1 on its data, widen the router, re-run stage 2.

    The router's new output column starts at zero and the existing head is
    kept as a warm start. Existing branches are checked to stay bit-identical.
    """
    from .errors import RegistryError

    if new_name in model.names:
        raise RegistryError(f"generator {new_name!r} already has a branch")
    if model.router is None or model.head is None:
        raise ConfigError("extension needs a trained router and head")
    before = [b.digest() for b in model.hub.branches]
    res1 = specialize(run, dataset, new_name, model.backbone, model.hub.branches)
    hub = add_branch(model.hub, res1.branch)
    widened = Detector(model.backbone, hub, model.head, model.router.widened(), model.route_per_layer)
    res2 = train_stage2(dataset.train, widened, stage2_config(run, fresh_head=False), names=dataset.names)
    _check_frozen(before, [b.digest() for b in res2.model.hub.branches[:len(before)]], "existing branches")
    return res2.model, {f"stage1.{new_name}": res1.log, "stage2": res2.log}


# ---------------------------------------------------------------- ablations

FLAGS = ("no_router", "no_route_loss", "no_fusion", "no_augment", "joint_single_stage")

# Core design-choice rows: each adds one ingredient on top of the previous one.
CORE_VARIANTS = {
    "single_lora": {"k": 1, "no_router": True, "joint_single_stage": True},
    "hub": {"no_router": True, "joint_single_stage": True},
    "router": {"no_route_loss": True, "no_fusion": True, "joint_single_stage": True},
    "route_loss": {"no_fusion": True, "joint_single_stage": True},
    "full": {},
}
PRESETS = {"core": list(CORE_VARIANTS), "k_sweep": ["k=1", "k=2", "k=3"],
           "strategy": ["full", "no_fusion", "no_augment", "joint_single_stage"]}


def variant_overrides(spec):
    """Config overrides for a variant name: a core row, ``k=N``, or flags joined by ``+``."""
    if spec in CORE_VARIANTS:
        return dict(CORE_VARIANTS[spec])
    if spec.startswith("k="):
        try:
            return {"k": int(spec[2:])}
        except ValueError:
            raise ConfigError(f"bad K in variant {spec!r}") from None
    overrides = {}
    for flag in spec.split("+"):
        if flag not in FLAGS:
            raise ConfigError(f"unknown ablation flag {flag!r}; expected one of {FLAGS}")
        if flag == "no_augment":
            overrides["augment"] = False
        else:
            overrides[flag] = True
    if overrides.get("no_router") and overrides.get("no_route_loss"):
        raise ConfigError("no_route_loss is meaningless together with no_router")
    return overrides


def expand_variants(specs):
    out = []
    for spec in specs:
        for v in PRESETS.get(spec, [spec]):
            if v not in out:
                out.append(v)
    return out


def run_variant(run, dataset, spec, seed, cache=None):
    """Train and evaluate one variant; stage-1 branches are shared through ``cache``."""
    from .metrics import evaluate

    overrides = variant_overrides(spec)
    cfg = run.with_overrides(seed=seed, **overrides)
    cache = {} if cache is None else cache
    two_stage = not cfg.joint_single_stage
    # everything stage 1 depends on, which excludes k and all stage-2 keys
    key = cfg.with_overrides(k=1).to_text().split("[stage2]")[0]
    if two_stage:
        entry = cache.setdefault(key, {"backbone": make_backbone(cfg), "branches": {}})
        model, _ = train_pipeline(cfg, dataset, entry["branches"], entry["backbone"])
        for b in model.hub.branches:
            entry["branches"].setdefault(b.name, b)
    else:
        backbone = make_backbone(cfg)
        names = dataset.names[:cfg.k] if cfg.k > 1 else ["shared"]
        hub = LoraHub(cfg.vit().slots, [new_branch(cfg, n) for n in names])
        res = train_stage2(dataset.train, Detector(backbone, hub, None), stage2_config(cfg),
                           names=dataset.names)
        model = res.model
    report = evaluate(model, dataset.test, cfg.threshold, cfg.eval_batch_size, names=dataset.names)
    return {"variant": spec, "seed": seed, "acc": report["acc"], "ap": report["ap"],
            "auc": report["auc"], "eer": report["eer"]}


def run_ablation(run, dataset, specs, seeds):
    """One metrics row per variant per seed, plus per-variant means."""
    variants = expand_variants(specs)
    for v in variants:
        variant_overrides(v)  # reject bad flags before any training
    rows = []
    cache = {}
    for seed in seeds:
        for v in variants:
            rows.append(run_variant(run, dataset, v, seed, cache))
    summary = {}
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        summary[v] = {m: float(np.mean([r[m] for r in sel])) for m in ("acc", "ap", "auc", "eer")}
    return {"rows": rows, "mean": summary, "seeds": list(seeds)}

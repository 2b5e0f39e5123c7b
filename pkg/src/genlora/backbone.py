"""Small pre-norm vision transformer used as the frozen feature extractor.

Self-attention projections accept an additive residual from an injection
object (see :class:`Injection`), which is how LoRA branches enter the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import numeric as nk
from .errors import ConfigError, DimensionError, InjectionError

PROJECTIONS = ("q", "k", "v", "o")
INIT_STD = 0.02
_TRUNC = 2.0
_TRUNC_STD = float(truncnorm.std(-_TRUNC, _TRUNC))


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    lora_targets: tuple = ("q", "v")
    warmup_epochs: int = 10

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "depth", "heads", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        targets = tuple(self.lora_targets)
        if not targets or any(t not in PROJECTIONS for t in targets) or len(set(targets)) != len(targets):
            raise ConfigError(f"lora_targets must be distinct members of {PROJECTIONS}, got {targets}")
        object.__setattr__(self, "lora_targets", tuple(p for p in PROJECTIONS if p in targets))

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self):
        return self.n_patches + 1

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def slots(self):
        """Designated (layer, projection) injection points."""
        return tuple((layer, p) for layer in range(self.depth) for p in self.lora_targets)


def _trunc_normal(rng, shape, std=INIT_STD, dtype=np.float32):
    z = truncnorm.rvs(-_TRUNC, _TRUNC, size=shape, random_state=rng)
    return (z * (std / _TRUNC_STD)).astype(dtype)


@dataclass
class BackboneWeights:
    config: ViTConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.tensors[key]

    def named(self, prefix="backbone."):
        return [(prefix + k, v) for k, v in self.tensors.items()]

    def astype(self, dtype):
        return BackboneWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def digest(self):
        return nk.tensor_digest(self.named())


def backbone_tensor_shapes(config: ViTConfig):
    d, hid = config.embed_dim, config.embed_dim * config.mlp_ratio
    shapes = {
        "patch.w": (config.patch_dim, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (config.n_tokens, d),
    }
    for layer in range(config.depth):
        p = f"{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, hid), p + "mlp.b1": (hid,),
            p + "mlp.w2": (hid, d), p + "mlp.b2": (d,),
        })
    return shapes


def init_backbone(config: ViTConfig, seed: int, warmup=True) -> BackboneWeights:
    """Seeded random init (truncated normal, std 0.02), then optional reconstruction warmup."""
    if not isinstance(config, ViTConfig):
        raise ConfigError("init_backbone expects a ViTConfig")
    rng = np.random.default_rng([int(seed), 0xB0])
    tensors = {}
    for name, shape in backbone_tensor_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape, np.float32)
        elif leaf.startswith("b") and len(shape) == 1 and name != "cls":
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    weights = BackboneWeights(config, tensors)
    if warmup and config.warmup_epochs > 0:
        warmup_reconstruction(weights, seed, config.warmup_epochs)
    return weights


# ---------------------------------------------------------------- tokens


def patchify(images, patch):
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


def tokenize(images, weights: BackboneWeights):
    """Patchify, project, prepend the class token and add positional embeddings.

    Accepts one image (C, H, W) or a batch (B, C, H, W).
    """
    cfg = weights.config
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"expected images of shape (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
    patches = patchify(images.astype(weights["patch.w"].dtype, copy=False), cfg.patch_size)
    emb = patches @ weights["patch.w"] + weights["patch.b"]
    cls = np.broadcast_to(weights["cls"], (emb.shape[0], 1, cfg.embed_dim))
    tokens = np.concatenate([cls, emb], axis=1) + weights["pos"]
    return tokens[0] if single else tokens


def tokenize_backward(images, weights: BackboneWeights, dtokens):
    patches = patchify(images.astype(dtokens.dtype, copy=False), weights.config.patch_size)
    demb = dtokens[:, 1:]
    _, dw = nk.matmul_backward(patches, weights["patch.w"], demb)
    return {
        "patch.w": dw,
        "patch.b": demb.reshape(-1, demb.shape[-1]).sum(0),
        "cls": dtokens[:, 0].sum(0),
        "pos": dtokens.sum(0),
    }


# ---------------------------------------------------------------- injection


class Injection:
    """Supplies additive residuals for designated attention projections.

    ``delta`` must return an array shaped like the projection output, or the
    explicit zero scalar ``0.0``; returning None for a designated slot is an
    error. Subclasses that route per layer can observe the layer input via
    ``enter_layer`` and push extra gradient back through ``enter_layer_backward``.
    """

    slots: frozenset = frozenset()

    def enter_layer(self, layer, x):
        pass

    def delta(self, layer, proj, h):
        raise NotImplementedError

    def delta_backward(self, layer, proj, g):
        """Gradient w.r.t. the projection input ``h``, or None if it is not needed."""
        return None

    def enter_layer_backward(self, layer, dx):
        return None


class ZeroInjection(Injection):
    def __init__(self, slots):
        self.slots = frozenset(slots)

    def delta(self, layer, proj, h):
        return 0.0


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _injected(injection, layer, proj, h, designated):
    if injection is None or (layer, proj) not in designated:
        return None
    out = injection.delta(layer, proj, h)
    if out is None:
        raise InjectionError(f"injection provided no residual for layer {layer} projection {proj!r}")
    return out


def encode(tokens, weights: BackboneWeights, injection: Injection | None = None, cache=None):
    """Run the transformer blocks over a token batch (B, T, d) or sequence (T, d).

    ``injection`` must cover every designated slot of the config. When
    ``cache`` is a list, per-layer activations are appended to it for
    :func:`encode_backward`.
    """
    cfg = weights.config
    x = np.asarray(tokens)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"token width {x.shape[-1]} != embed_dim {cfg.embed_dim}")
    designated = frozenset(cfg.slots)
    if injection is not None:
        missing = designated - frozenset(injection.slots)
        if missing:
            raise InjectionError(f"injection is missing designated slots {sorted(missing)[:4]}")
    scale = 1.0 / math.sqrt(cfg.head_dim)
    w = weights.tensors
    for layer in range(cfg.depth):
        p = f"{layer}."
        if injection is not None:
            injection.enter_layer(layer, x)
        x_in = x
        h = nk.layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        proj = {}
        for name in ("q", "k", "v"):
            out = h @ w[p + f"attn.w{name}"] + w[p + f"attn.b{name}"]
            extra = _injected(injection, layer, name, h, designated)
            if extra is not None:
                out = out + extra
            proj[name] = _split_heads(out, cfg.heads)
        att = nk.softmax_rows((proj["q"] @ proj["k"].transpose(0, 1, 3, 2)) * scale)
        ctx = _merge_heads(att @ proj["v"])
        o = ctx @ w[p + "attn.wo"] + w[p + "attn.bo"]
        extra = _injected(injection, layer, "o", ctx, designated)
        if extra is not None:
            o = o + extra
        x_mid = x + o
        h2 = nk.layernorm(x_mid, w[p + "ln2.g"], w[p + "ln2.b"])
        a1 = h2 @ w[p + "mlp.w1"] + w[p + "mlp.b1"]
        g1 = nk.gelu(a1)
        x = x_mid + g1 @ w[p + "mlp.w2"] + w[p + "mlp.b2"]
        if cache is not None:
            cache.append(dict(x_in=x_in, h=h, q=proj["q"], k=proj["k"], v=proj["v"],
                              att=att, ctx=ctx, x_mid=x_mid, h2=h2, a1=a1, g1=g1))
    return x[0] if single else x


def encode_backward(dout, weights: BackboneWeights, cache, injection: Injection | None = None,
                    need_weights=False):
    """Backpropagate through :func:`encode`.

    Returns ``(dtokens, weight_grads)``; ``weight_grads`` is None unless
    ``need_weights`` is set.
    """
    cfg = weights.config
    w = weights.tensors
    scale = 1.0 / math.sqrt(cfg.head_dim)
    designated = frozenset(cfg.slots) if injection is not None else frozenset()
    grads = {} if need_weights else None
    dx = dout
    for layer in reversed(range(cfg.depth)):
        c = cache[layer]
        p = f"{layer}."
        # MLP branch
        dg1, dw2 = nk.matmul_backward(c["g1"], w[p + "mlp.w2"], dx)
        da1 = nk.gelu_backward(c["a1"], dg1)
        dh2, dw1 = nk.matmul_backward(c["h2"], w[p + "mlp.w1"], da1)
        dxm, dg2, db2ln = nk.layernorm_backward(c["x_mid"], w[p + "ln2.g"], dh2)
        dx_mid = dx + dxm
        if need_weights:
            d = cfg.embed_dim
            grads[p + "mlp.w2"] = dw2
            grads[p + "mlp.b2"] = dx.reshape(-1, d).sum(0)
            grads[p + "mlp.w1"] = dw1
            grads[p + "mlp.b1"] = da1.reshape(-1, da1.shape[-1]).sum(0)
            grads[p + "ln2.g"] = dg2
            grads[p + "ln2.b"] = db2ln
        # attention branch
        do = dx_mid
        dctx, dwo = nk.matmul_backward(c["ctx"], w[p + "attn.wo"], do)
        if (layer, "o") in designated:
            extra = injection.delta_backward(layer, "o", do)
            if extra is not None:
                dctx = dctx + extra
        dctx_h = _split_heads(dctx, cfg.heads)
        att = c["att"]
        datt = dctx_h @ c["v"].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx_h
        ds = nk.softmax_backward(att, datt) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        dh = 0.0
        dproj = {"q": _merge_heads(dq), "k": _merge_heads(dk), "v": _merge_heads(dv)}
        for name in ("q", "k", "v"):
            g = dproj[name]
            dh_part, dwp = nk.matmul_backward(c["h"], w[p + f"attn.w{name}"], g)
            dh = dh + dh_part
            if (layer, name) in designated:
                extra = injection.delta_backward(layer, name, g)
                if extra is not None:
                    dh = dh + extra
            if need_weights:
                grads[p + f"attn.w{name}"] = dwp
                grads[p + f"attn.b{name}"] = g.reshape(-1, g.shape[-1]).sum(0)
        dxl, dg1n, db1n = nk.layernorm_backward(c["x_in"], w[p + "ln1.g"], dh)
        dx = dx_mid + dxl
        if need_weights:
            grads[p + "attn.wo"] = dwo
            grads[p + "attn.bo"] = do.reshape(-1, do.shape[-1]).sum(0)
            grads[p + "ln1.g"] = dg1n
            grads[p + "ln1.b"] = db1n
        if injection is not None:
            extra = injection.enter_layer_backward(layer, dx)
            if extra is not None:
                dx = dx + extra
    return dx, grads


# ---------------------------------------------------------------- warmup


def warmup_reconstruction(weights: BackboneWeights, seed, epochs, n_images=512, batch_size=32, lr=1e-3):
    """Patch-reconstruction pretraining on synthetic real images, in place.

    A linear decoder maps each output patch token back to its normalized
    pixels; the decoder is discarded afterwards.
    """
    from .data import make_real, normalize

    cfg = weights.config
    rng = np.random.default_rng([int(seed), 0xAA])
    images = np.stack([normalize(make_real([int(seed), 0xAA, i], cfg.image_size, cfg.channels))
                       for i in range(n_images)]).astype(np.float32)
    store = nk.ParamStore()
    for name, value in weights.tensors.items():
        store.add(name, value)
    store.add("dec.w", _trunc_normal(rng, (cfg.embed_dim, cfg.patch_dim)))
    store.add("dec.b", np.zeros(cfg.patch_dim, np.float32))
    state = nk.OptimState(lr=lr, weight_decay=0.0, beta2=0.999)
    for epoch in range(epochs):
        order = np.random.default_rng([int(seed), 0xAA, epoch]).permutation(n_images)
        for start in range(0, n_images, batch_size):
            batch = images[order[start:start + batch_size]]
            store.zero_grad()
            target = patchify(batch, cfg.patch_size)
            tokens = tokenize(batch, weights)
            cache = []
            out = encode(tokens, weights, cache=cache)
            feats = out[:, 1:]
            pred = feats @ store["dec.w"] + store["dec.b"]
            diff = pred - target
            dpred = (2.0 / diff.size) * diff
            dfeats, dwdec = nk.matmul_backward(feats, store["dec.w"], dpred)
            store.accumulate("dec.w", dwdec)
            store.accumulate("dec.b", dpred.reshape(-1, cfg.patch_dim).sum(0))
            dout = np.zeros_like(out)
            dout[:, 1:] = dfeats
            dtok, grads = encode_backward(dout, weights, cache, need_weights=True)
            grads.update(tokenize_backward(batch, weights, dtok))
            for name, g in grads.items():
                store.accumulate(name, g)
            nk.adamw_step(store, state)
    return weights

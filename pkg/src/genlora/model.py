"""The full detector: frozen encoder + LoRA hub + router + detection head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nk
from .backbone import BackboneWeights, encode, encode_backward, tokenize
from .errors import ConfigError
from .head import (DetectionHead, attn_pool, attn_pool_backward, classify, classify_backward,
                   cls_loss, cls_loss_backward)
from .lora import HubInjection, LoraHub
from .router import (RouterMLP, pool, pool_backward, route, route_backward, routing_loss,
                     routing_loss_backward)


@dataclass
class Detector:
    backbone: BackboneWeights
    hub: LoraHub
    head: DetectionHead | None
    router: RouterMLP | None = None
    route_per_layer: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.router is not None and self.router.width != len(self.hub):
            raise ConfigError(f"router width {self.router.width} != number of branches {len(self.hub)}")

    @property
    def names(self):
        return self.hub.names

    @property
    def k(self):
        return len(self.hub)

    def named(self):
        out = list(self.backbone.named()) + self.hub.named()
        if self.router is not None:
            out += self.router.named()
        if self.head is not None:
            out += self.head.named()
        return out

    def params(self):
        """Every tensor by checkpoint name, all frozen; callers unfreeze by prefix."""
        store = nk.ParamStore()
        for name, value in self.named():
            store.add(name, value, trainable=False)
        return store

    def astype(self, dtype):
        return Detector(self.backbone.astype(dtype), self.hub.astype(dtype),
                        None if self.head is None else self.head.astype(dtype),
                        None if self.router is None else self.router.astype(dtype),
                        self.route_per_layer)

    # ------------------------------------------------------------ forward

    def _merge_weights(self, tokens, cache):
        b = tokens.shape[0]
        if self.router is None:
            return np.full((b, self.k), 1.0 / self.k, dtype=tokens.dtype), None
        if not self.route_per_layer:
            rc = {}
            pi = route(pool(tokens), self.router, rc)
            cache["route"] = rc
            return pi, None
        caches = cache.setdefault("route_layers", {})

        def per_layer(layer, x):
            caches[layer] = {}
            return route(pool(x), self.router, caches[layer])

        return None, per_layer

    def forward(self, images, cache=None):
        """Fake/real probabilities (B, 2) and merge weights (B, K) for normalized images.

        With per-layer routing the returned weights are those of layer 0.
        """
        if self.head is None:
            raise ConfigError("model has no detection head")
        cache = {} if cache is None else cache
        tokens = tokenize(images, self.backbone)
        if tokens.ndim == 2:
            tokens = tokens[None]
        pi, per_layer = self._merge_weights(tokens, cache)
        injection = HubInjection(self.hub, per_layer if per_layer is not None else pi)
        enc = []
        out = encode(tokens, self.backbone, injection, enc)
        if self.head.mode == "attn_pool":
            hc = {}
            feat = attn_pool(out, self.head.attn, hc)
            cache["head"] = hc
        else:
            feat = out[:, 0]
        probs = classify(feat, self.head.clf)
        cache.update(images=images, injection=injection, encoder=enc, out=out, feat=feat, probs=probs)
        if per_layer is not None:
            pi = injection.layer_weights[0]
        return probs, pi

    def layer_weights(self, cache):
        """Merge weights per layer from a forward cache."""
        inj = cache["injection"]
        return [inj.layer_weights[layer] for layer in range(self.backbone.config.depth)]

    # ------------------------------------------------------------ backward

    def backward(self, cache, dprobs, droute=None, train_factors=False, train_router=False,
                 train_head=True):
        """Gradients by checkpoint name for the requested groups.

        ``droute`` is the gradient of any direct loss on the merge weights:
        a (B, K) array, or a per-layer list when routing per layer.
        """
        grads = {}
        dfeat, g = classify_backward(cache["feat"], cache["probs"], dprobs, self.head.clf)
        if train_head:
            grads.update(g)
        out = cache["out"]
        if self.head.mode == "attn_pool":
            dout, g = attn_pool_backward(cache["head"], dfeat, self.head.attn)
            if train_head:
                grads.update(g)
        else:
            dout = np.zeros_like(out)
            dout[:, 0] = dfeat
        train_router = train_router and self.router is not None
        if not (train_factors or train_router):
            return grads
        injection = cache["injection"]
        injection.train_factors = train_factors
        injection.factor_grads = {}
        injection.weight_grads = {}
        router_grads = {}

        def add_router(g):
            for name, value in g.items():
                router_grads[name] = router_grads.get(name, 0.0) + value

        if train_router and self.route_per_layer:
            n_tokens = out.shape[1]

            def per_layer(layer, dpi):
                if droute is not None:
                    dpi = dpi + droute[layer]
                ddesc, g = route_backward(cache["route_layers"][layer], dpi, self.router)
                add_router(g)
                return pool_backward(ddesc, n_tokens)

            injection.layer_router_backward = per_layer
        else:
            injection.layer_router_backward = None
        encode_backward(dout, self.backbone, cache["encoder"], injection)
        injection.layer_router_backward = None
        grads.update(injection.factor_grads)
        if train_router and not self.route_per_layer:
            dpi = sum(injection.weight_grads.values())
            if droute is not None:
                dpi = dpi + droute
            _, g = route_backward(cache["route"], dpi, self.router)
            add_router(g)
        grads.update(router_grads)
        return grads


# ---------------------------------------------------------------- objective


@dataclass
class LossWeights:
    route: float = 1.0
    reg: float = 1e-4


def objective(model: Detector, images, labels, targets=None, mask=None, weights=LossWeights(),
              train_factors=False, train_router=False, train_head=True, need_grads=True):
    """``L_cls + route * L_route + reg * L1(router)`` and its gradients.

    Returns ``(losses, grads, probs, merge_weights)`` where ``losses`` holds
    ``l_cls``, ``l_route``, ``l_reg`` and ``total``.
    """
    cache = {}
    probs, pi = model.forward(images, cache)
    l_cls = cls_loss(probs, labels)
    use_route = model.router is not None and weights.route > 0 and targets is not None
    l_route = 0.0
    layer_pis = None
    if use_route:
        if model.route_per_layer:
            layer_pis = model.layer_weights(cache)
            parts = [routing_loss(p, targets, mask) for p in layer_pis]
            l_route = float(np.mean([p[0] for p in parts]))
        else:
            l_route, _ = routing_loss(pi, targets, mask)
    use_reg = model.router is not None and weights.reg > 0
    l_reg = nk.l1_norm(model.router.tensors()) if use_reg else 0.0
    total = l_cls + weights.route * l_route + weights.reg * l_reg
    losses = {"l_cls": l_cls, "l_route": l_route, "l_reg": l_reg, "total": total}
    if not need_grads:
        return losses, {}, probs, pi
    dprobs = cls_loss_backward(probs, labels)
    droute = None
    if use_route:
        if model.route_per_layer:
            n = len(layer_pis)
            droute = [weights.route / n * routing_loss_backward(p, targets, mask) for p in layer_pis]
        else:
            droute = weights.route * routing_loss_backward(pi, targets, mask)
    grads = model.backward(cache, dprobs, droute, train_factors, train_router, train_head)
    if use_reg and train_router:
        for name, t in model.router.named():
            grads[name] = grads[name] + weights.reg * nk.l1_norm_backward(t)
    return losses, grads, probs, pi


def predict(model: Detector, images, batch_size=100):
    """Fake scores (p[:, 1]) and layer-0 merge weights for normalized images."""
    scores, pis = [], []
    for start in range(0, len(images), batch_size):
        probs, pi = model.forward(images[start:start + batch_size])
        scores.append(probs[:, 1])
        pis.append(pi)
    return np.concatenate(scores), np.concatenate(pis)

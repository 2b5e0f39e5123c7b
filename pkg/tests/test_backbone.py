import math

import numpy as np
import pytest

from genlora import numeric as nk
from genlora.backbone import (INIT_STD, Injection, ViTConfig, ZeroInjection, backbone_tensor_shapes,
                              encode, encode_backward, init_backbone, patchify, tokenize,
                              tokenize_backward)
from genlora.errors import ConfigError, DimensionError, InjectionError


def test_config_validation():
    assert ViTConfig(embed_dim=64, heads=4).head_dim == 16
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=10, heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(lora_targets=("q", "x"))
    assert ViTConfig(lora_targets=("v", "q")).lora_targets == ("q", "v")


def test_init_deterministic(tiny_vit):
    a, b = init_backbone(tiny_vit, 3), init_backbone(tiny_vit, 3)
    assert a.digest() == b.digest()
    assert init_backbone(tiny_vit, 4).digest() != a.digest()


def test_warmup_deterministic_and_moves_weights():
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=1, heads=2, warmup_epochs=1)
    w1, w2 = init_backbone(cfg, 5), init_backbone(cfg, 5)
    assert w1.digest() == w2.digest()
    assert w1.digest() != init_backbone(cfg, 5, warmup=False).digest()


def test_init_scale_matches_declared_std():
    w = init_backbone(ViTConfig(warmup_epochs=0), 0)
    m = w["0.mlp.w1"]
    assert m.size >= 10_000
    assert abs(m.var() / INIT_STD ** 2 - 1) < 0.1
    assert np.all(w["0.ln1.g"] == 1) and np.all(w["0.attn.bq"] == 0)


def test_token_count():
    w = init_backbone(ViTConfig(warmup_epochs=0), 0)
    assert tokenize(np.zeros((3, 32, 32), np.float32), w).shape == (65, 64)
    for size, patch in ((8, 4), (16, 2), (12, 3)):
        cfg = ViTConfig(image_size=size, patch_size=patch, embed_dim=8, heads=2, depth=1, warmup_epochs=0)
        assert tokenize(np.zeros((3, size, size)), init_backbone(cfg, 0)).shape[0] == (size // patch) ** 2 + 1


def test_zero_image_tokens(tiny_backbone):
    t = tokenize(np.zeros((3, 8, 8), np.float32), tiny_backbone)
    assert np.array_equal(t[0], tiny_backbone["cls"] + tiny_backbone["pos"][0])
    assert np.array_equal(t[1:], tiny_backbone["patch.b"] + tiny_backbone["pos"][1:])


def test_single_patch_projection(tiny_backbone, rng):
    img = rng.standard_normal((3, 8, 8)).astype(np.float32)
    t = tokenize(img, tiny_backbone)
    # patch index 1 = row 0, column 1 of the 2x2 grid
    flat = img[:, 0:4, 4:8].reshape(-1)
    ref = flat @ tiny_backbone["patch.w"] + tiny_backbone["patch.b"] + tiny_backbone["pos"][2]
    assert np.max(np.abs(t[2] - ref)) < 1e-6


def test_tokenize_shape_error(tiny_backbone):
    with pytest.raises(DimensionError):
        tokenize(np.zeros((3, 16, 16)), tiny_backbone)


def test_zero_injection_bit_identical(tiny_backbone, rng):
    tok = tokenize(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), tiny_backbone)
    plain = encode(tok, tiny_backbone)
    zero = encode(tok, tiny_backbone, ZeroInjection(tiny_backbone.config.slots))
    assert plain.tobytes() == zero.tobytes()


class _OneLayer(Injection):
    def __init__(self, slots, layer, value):
        self.slots = frozenset(slots)
        self.layer, self.value = layer, value

    def delta(self, layer, proj, h):
        return self.value * np.ones_like(h) if layer == self.layer else 0.0


def test_injection_is_causal_through_depth(tiny_backbone, rng):
    tok = tokenize(rng.standard_normal((2, 3, 8, 8)), tiny_backbone)
    c0, c1 = [], []
    encode(tok, tiny_backbone, cache=c0)
    out = encode(tok, tiny_backbone, _OneLayer(tiny_backbone.config.slots, 1, 0.5), cache=c1)
    assert np.array_equal(c0[0]["x_mid"], c1[0]["x_mid"])
    assert np.array_equal(c0[1]["x_in"], c1[1]["x_in"])
    assert not np.array_equal(c0[1]["x_mid"], c1[1]["x_mid"])
    assert not np.array_equal(encode(tok, tiny_backbone), out)


def test_missing_slot_is_an_error(tiny_backbone, rng):
    tok = tokenize(rng.standard_normal((3, 8, 8)), tiny_backbone)
    with pytest.raises(InjectionError):
        encode(tok, tiny_backbone, ZeroInjection([(0, "q")]))

    class NoneInjection(ZeroInjection):
        def delta(self, layer, proj, h):
            return None

    with pytest.raises(InjectionError):
        encode(tok, tiny_backbone, NoneInjection(tiny_backbone.config.slots))


def test_single_layer_single_head_oracle(rng):
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=6, depth=1, heads=1, mlp_ratio=2, warmup_epochs=0)
    w = init_backbone(cfg, 1)
    for name in w.tensors:  # break the zero biases / unit gains so every term matters
        w.tensors[name] = rng.standard_normal(w.tensors[name].shape)
    x = rng.standard_normal((5, 6))

    def ln(v, g, b):
        mu = v.mean()
        return (v - mu) / math.sqrt(((v - mu) ** 2).mean() + 1e-5) * g + b

    h = np.array([ln(r, w["0.ln1.g"], w["0.ln1.b"]) for r in x])
    q = h @ w["0.attn.wq"] + w["0.attn.bq"]
    k = h @ w["0.attn.wk"] + w["0.attn.bk"]
    v = h @ w["0.attn.wv"] + w["0.attn.bv"]
    ctx = np.zeros_like(v)
    for i in range(5):
        s = np.array([q[i] @ k[j] / math.sqrt(6) for j in range(5)])
        e = np.exp(s - s.max())
        ctx[i] = (e / e.sum()) @ v
    mid = x + ctx @ w["0.attn.wo"] + w["0.attn.bo"]
    h2 = np.array([ln(r, w["0.ln2.g"], w["0.ln2.b"]) for r in mid])
    a = h2 @ w["0.mlp.w1"] + w["0.mlp.b1"]
    gl = 0.5 * a * (1 + np.tanh(math.sqrt(2 / math.pi) * (a + 0.044715 * a ** 3)))
    ref = mid + gl @ w["0.mlp.w2"] + w["0.mlp.b2"]
    assert np.max(np.abs(encode(x, w) - ref)) < 1e-5


def test_encode_backward_gradcheck(tiny_vit, rng):
    w = init_backbone(tiny_vit, 2).astype(np.float64)
    for name in w.tensors:
        w.tensors[name] = w.tensors[name] + 0.3 * rng.standard_normal(w.tensors[name].shape)
    images = rng.standard_normal((2, 3, 8, 8))
    target = rng.standard_normal((2, 5, 16))
    store = nk.ParamStore()
    for name, value in w.tensors.items():
        store.add(name, value)

    def loss(p):
        tok = tokenize(images, w)
        cache = []
        out = encode(tok, w, cache=cache)
        dtok, grads = encode_backward(target, w, cache, need_weights=True)
        grads.update(tokenize_backward(images, w, dtok))
        for n, g in grads.items():
            p.accumulate(n, g)
        return float((out * target).sum())

    assert nk.gradcheck(loss, store, n_coords=8).max_rel_error < 1e-4


def test_tensor_shapes_cover_every_weight(tiny_vit, tiny_backbone):
    shapes = backbone_tensor_shapes(tiny_vit)
    assert set(shapes) == set(tiny_backbone.tensors)
    assert all(tiny_backbone[n].shape == s for n, s in shapes.items())
    assert patchify(np.zeros((1, 3, 8, 8)), 4).shape == (1, 4, 48)

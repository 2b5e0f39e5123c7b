import math

import numpy as np
import pytest

from genlora import numeric as nk
from genlora.errors import DataError, DimensionError
from genlora.head import (AttentionPool, Classifier, attn_pool, attn_pool_backward, classify,
                          classify_backward, cls_loss, cls_loss_backward, init_head)


def random_pool(d, rng):
    return AttentionPool(rng.standard_normal(d), rng.standard_normal((d, d)), rng.standard_normal((d, d)))


def test_single_and_repeated_tokens(rng):
    p = random_pool(8, rng)
    t = rng.standard_normal(8)
    assert np.array_equal(attn_pool(t[None], p), t @ p.wv)
    assert np.allclose(attn_pool(np.tile(t, (6, 1)), p), t @ p.wv, atol=1e-12)


def test_attn_pool_vs_direct_oracle(rng):
    d = 8
    p = random_pool(d, rng)
    x = rng.standard_normal((5, d))
    s = [float(p.q @ (x[n] @ p.wk)) / math.sqrt(d) for n in range(5)]
    e = [math.exp(v - max(s)) for v in s]
    ref = sum(e[n] / sum(e) * (x[n] @ p.wv) for n in range(5))
    assert np.max(np.abs(attn_pool(x, p) - ref)) < 1e-6
    with pytest.raises(DimensionError):
        attn_pool(np.ones((3, 4)), p)


def test_attn_pool_in_hull_and_permutation_invariant(rng):
    p = random_pool(6, rng)
    for _ in range(20):
        x = rng.standard_normal((9, 6))
        out = attn_pool(x, p)
        vals = x @ p.wv
        assert np.all(out >= vals.min(0) - 1e-12) and np.all(out <= vals.max(0) + 1e-12)
        assert np.max(np.abs(attn_pool(x[rng.permutation(9)], p) - out)) < 1e-6


def test_classify_examples(rng):
    assert np.array_equal(classify(np.ones(4), Classifier(np.zeros((4, 2)), np.zeros(2))), [0.5, 0.5])
    p = classify(np.ones(4), Classifier(np.zeros((4, 2)), np.array([0.0, 1000.0])))
    assert np.all(np.isfinite(p)) and p[1] == pytest.approx(1.0)
    clf = Classifier(rng.standard_normal((4, 2)), rng.standard_normal(2))
    f = rng.standard_normal(4)
    z = f @ clf.w + clf.b
    assert np.max(np.abs(classify(f, clf) - np.exp(z) / np.exp(z).sum())) < 1e-7
    out = classify(100 * rng.standard_normal((50, 4)), clf)
    assert np.all(out >= 0) and np.allclose(out.sum(1), 1)


def test_cls_loss_examples(rng):
    assert cls_loss(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(math.log(2))
    assert cls_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) <= 1e-11
    p = rng.dirichlet(np.ones(2), size=7)
    y = rng.integers(0, 2, 7)
    ref = -sum(math.log(p[i, y[i]]) for i in range(7)) / 7
    assert abs(cls_loss(p, y) - ref) < 1e-9
    with pytest.raises(DataError):
        cls_loss(p[:2], [0, 2])


def test_init_head_gives_chance():
    h = init_head(8, seed=0)
    assert np.array_equal(classify(np.ones(8), h.clf), [0.5, 0.5])


def test_head_gradients(rng):
    d = 6
    p = random_pool(d, rng)
    clf = Classifier(rng.standard_normal((d, 2)), rng.standard_normal(2))
    y = np.array([0, 1, 1])
    store = nk.ParamStore()
    for name, v in (("head.attn.q", p.q), ("head.attn.wk", p.wk), ("head.attn.wv", p.wv),
                    ("head.clf.w", clf.w), ("head.clf.b", clf.b)):
        store.add(name, v)
    store.add("x", rng.standard_normal((3, 5, d)))

    def loss(s):
        cache = {}
        feat = attn_pool(s["x"], p, cache)
        probs = classify(feat, clf)
        dfeat, g = classify_backward(feat, probs, cls_loss_backward(probs, y), clf)
        dx, g2 = attn_pool_backward(cache, dfeat, p)
        for n, v in {**g, **g2}.items():
            s.accumulate(n, v)
        s.accumulate("x", dx)
        return cls_loss(probs, y)

    assert nk.gradcheck(loss, store).max_rel_error < 1e-4

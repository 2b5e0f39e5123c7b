import numpy as np
import pytest

from genlora import numeric as nk
from genlora.backbone import encode, tokenize
from genlora.errors import ConfigError, InjectionError, RegistryError, RoutingError
from genlora.lora import HubInjection, LoraBranch, LoraHub, add_branch, branch_delta, init_branch, integrate

SLOTS = [(0, "q"), (0, "v"), (1, "q"), (1, "v")]
D, R = 8, 3


def random_branch(name, rng, rank=R, alpha=6.0):
    b = init_branch(name, SLOTS, D, rank, alpha, seed=0)
    return LoraBranch(name, rank, alpha, {s: (rng.standard_normal((D, rank)), rng.standard_normal((rank, D)))
                                          for s in SLOTS})


def dense(x, branch, slot):
    a, b = branch.factors[slot]
    return x @ ((branch.alpha / branch.rank) * (a @ b))


def test_fresh_branch_is_zero(rng):
    b = init_branch("sd", SLOTS, D, R, 8.0, seed=1)
    x = rng.standard_normal((5, D))
    assert all(np.array_equal(branch_delta(x, b, s), np.zeros((5, D))) for s in SLOTS)


def test_init_deterministic_and_scaled():
    a1 = init_branch("sd", SLOTS, D, R, seed=7).factors[(0, "q")][0]
    a2 = init_branch("sd", SLOTS, D, R, seed=7).factors[(0, "q")][0]
    assert a1.tobytes() == a2.tobytes()
    big = init_branch("x", [(0, "q")], 200, 64, seed=0).factors[(0, "q")][0]
    assert big.size >= 10_000 and abs(big.std() / 0.02 - 1) < 0.1


def test_init_errors():
    with pytest.raises(RegistryError):
        init_branch("sd", SLOTS, D, existing=["sd"])
    with pytest.raises(ConfigError):
        init_branch("sd", SLOTS, D, rank=D + 1)


def test_full_rank_degeneration(rng):
    w = rng.standard_normal((D, D))
    b = LoraBranch("x", D, float(D), {(0, "q"): (np.eye(D), w)})
    x = rng.standard_normal((4, D))
    assert np.array_equal(branch_delta(x, b, (0, "q")), x @ w)


def test_branch_delta_vs_dense(rng):
    b = random_branch("a", rng)
    x = rng.standard_normal((6, D))
    for s in SLOTS:
        assert np.max(np.abs(branch_delta(x, b, s) - dense(x, b, s))) < 1e-5
    with pytest.raises(InjectionError):
        branch_delta(x, b, (5, "o"))


def test_integrate_vertices_and_dense_oracle(rng):
    hub = LoraHub(SLOTS, [random_branch(n, rng) for n in "abc"])
    for _ in range(100):
        x = rng.standard_normal((5, D))
        pi = rng.dirichlet(np.ones(3))
        slot = SLOTS[rng.integers(len(SLOTS))]
        ref = sum(pi[k] * dense(x, hub.branches[k], slot) for k in range(3))
        assert np.max(np.abs(integrate(x, hub, pi, slot) - ref)) < 1e-5
    for k in range(3):
        e = np.eye(3)[k]
        assert np.array_equal(integrate(x, hub, e, slot), branch_delta(x, hub.branches[k], slot))
    one = LoraHub(SLOTS, [hub.branches[0]])
    assert np.array_equal(integrate(x, one, [1.0], slot), branch_delta(x, hub.branches[0], slot))


def test_integrate_linear_in_weights(rng):
    hub = LoraHub(SLOTS, [random_branch(n, rng) for n in "abc"])
    x = rng.standard_normal((5, D))
    p1, p2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    a = 0.3
    lhs = integrate(x, hub, a * p1 + (1 - a) * p2, SLOTS[0])
    rhs = a * integrate(x, hub, p1, SLOTS[0]) + (1 - a) * integrate(x, hub, p2, SLOTS[0])
    assert np.max(np.abs(lhs - rhs)) < 1e-5


def test_zero_weight_branch_is_inert(rng):
    hub = LoraHub(SLOTS, [random_branch(n, rng) for n in "ab"])
    x = rng.standard_normal((5, D))
    before = integrate(x, hub, [1.0, 0.0], SLOTS[1])
    hub.branches[1].factors[SLOTS[1]][1][...] += 100.0
    assert np.array_equal(before, integrate(x, hub, [1.0, 0.0], SLOTS[1]))


def test_integrate_rejects_bad_weights(rng):
    hub = LoraHub(SLOTS, [random_branch(n, rng) for n in "ab"])
    x = rng.standard_normal((5, D))
    with pytest.raises(RoutingError):
        integrate(x, hub, [1.0], SLOTS[0])
    with pytest.raises(RoutingError):
        integrate(x, hub, [0.7, 0.5], SLOTS[0])
    with pytest.raises(RoutingError):
        integrate(x, hub, [1.1, -0.1], SLOTS[0])
    integrate(x, hub, [0.5 + 5e-6, 0.5], SLOTS[0])  # inside tolerance


def test_add_branch(rng):
    hub = LoraHub(SLOTS, [random_branch(n, rng) for n in "ab"])
    digests = [b.digest() for b in hub.branches]
    x = rng.standard_normal((5, D))
    pre = integrate(x, hub, [0.4, 0.6], SLOTS[2])
    bigger = add_branch(hub, random_branch("c", rng))
    assert len(bigger) == 3 and [b.digest() for b in bigger.branches[:2]] == digests
    assert np.array_equal(pre, integrate(x, bigger, [0.4, 0.6, 0.0], SLOTS[2]))
    with pytest.raises(RegistryError):
        add_branch(bigger, random_branch("a", rng))
    with pytest.raises(RegistryError):
        add_branch(hub, init_branch("d", SLOTS[:2], D, R))
    with pytest.raises(RegistryError):
        add_branch(hub, random_branch("e", rng, rank=2, alpha=4.0))


def test_hub_rejects_duplicates_and_slot_mismatch(rng):
    with pytest.raises(RegistryError):
        LoraHub(SLOTS, [random_branch("a", rng), random_branch("a", rng)])
    with pytest.raises(RegistryError):
        LoraHub(SLOTS[:2], [random_branch("a", rng)])


def test_factor_gradients_through_encoder(tiny_backbone, rng):
    bb = tiny_backbone.astype(np.float64)
    slots = bb.config.slots
    branches = []
    for n in "ab":
        b = init_branch(n, slots, 16, 4, 8.0, seed=ord(n)).astype(np.float64)
        for _, B in b.factors.values():
            B[...] = 0.5 * rng.standard_normal(B.shape)
        branches.append(b)
    hub = LoraHub(slots, branches)
    pi = rng.dirichlet(np.ones(2), size=2)
    tok = tokenize(rng.standard_normal((2, 3, 8, 8)), bb)
    w = rng.standard_normal(tok.shape)
    store = nk.ParamStore()
    for name, value in hub.named():
        store.add(name, value)

    def loss(p):
        inj = HubInjection(hub, pi, train_factors=True)
        cache = []
        out = encode(tok, bb, inj, cache)
        from genlora.backbone import encode_backward
        encode_backward(w, bb, cache, inj)
        for n, g in inj.factor_grads.items():
            p.accumulate(n, g)
        return float((out * w).sum())

    assert nk.gradcheck(loss, store, n_coords=16).max_rel_error < 1e-4

import itertools
import random

import pytest
from scipy.stats import chisquare

from ppmarl import shamir
from ppmarl.algebra import P61
from ppmarl.errors import (
    BadThreshold,
    IndexMismatch,
    InsufficientParties,
    InsufficientShares,
    MixedDegree,
    ReusedRandomness,
)
from ppmarl.shamir import (
    ArithCircuit,
    Gate,
    ShamirShare,
    add_gate,
    clear_eval,
    eval_circuit,
    gen_double_sharing,
    mul_gate,
    random_circuit,
    reconstruct,
    share,
)


def test_share_example_p11():
    sh = share(5, 1, 3, random.Random(0), p=11, coeffs=[3])
    assert [(s.party_index, s.value) for s in sh] == [(1, 8), (2, 0), (3, 3)]
    assert reconstruct([sh[0], sh[2]], p=11) == 5


def test_t0_constant():
    sh = share(42, 0, 4, random.Random(0))
    assert all(s.value == 42 for s in sh)
    assert reconstruct([ShamirShare(2, 9, 0)]) == 9


def test_share_errors():
    with pytest.raises(BadThreshold):
        share(1, 3, 3, random.Random(0))
    with pytest.raises(BadThreshold):
        share(1, 1, 11, random.Random(0), p=11)


def test_single_share_near_uniform():
    p = 13
    rng = random.Random(1)
    counts = [0] * p
    for _ in range(10_000):
        counts[share(7, 1, 3, rng, p)[0].value] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_reconstruct_any_subset():
    rng = random.Random(2)
    for _ in range(200):
        n = rng.randint(2, 7)
        t = rng.randint(0, min(3, n - 1))
        s = rng.randrange(P61)
        sh = share(s, t, n, rng)
        subset = rng.sample(sh, t + 1)
        assert reconstruct(subset) == s


def test_reconstruct_all_subsets_small_n():
    rng = random.Random(3)
    for n in range(1, 6):
        for t in range(n):
            sh = share(123, t, n, rng)
            for k in range(t + 1, n + 1):
                for sub in itertools.combinations(sh, k):
                    assert reconstruct(sub) == 123


def test_reconstruct_errors():
    sh = share(5, 2, 5, random.Random(4))
    with pytest.raises(InsufficientShares):
        reconstruct(sh[:2])
    with pytest.raises(InsufficientShares):
        reconstruct([])
    with pytest.raises(MixedDegree):
        reconstruct([sh[0], ShamirShare(2, 1, 1)])


def test_privacy_proxy_t1():
    # for any one share and any two secrets, consistent degree-1 polynomials exist
    p = 11
    for idx in range(1, 4):
        for y in range(p):
            for s in range(p):
                # find a with s + a*idx = y
                found = [a for a in range(p) if (s + a * idx) % p == y]
                assert len(found) == 1


def test_add_gate():
    rng = random.Random(5)
    a = share(5, 1, 3, rng)
    b = share(2, 1, 3, rng)
    assert reconstruct(add_gate(a, b)) == 7
    z = share(0, 1, 3, rng)
    assert reconstruct(add_gate(a, z)) == 5
    for _ in range(500):
        x, y = rng.randrange(P61), rng.randrange(P61)
        assert reconstruct(add_gate(share(x, 1, 3, rng), share(y, 1, 3, rng))) == (x + y) % P61


def test_add_gate_mismatch():
    rng = random.Random(6)
    a = share(5, 1, 3, rng)
    b = share(2, 1, 4, rng)[1:]
    with pytest.raises(IndexMismatch):
        add_gate(a, b)


def test_double_sharing_consistent():
    rng = random.Random(7)
    for _ in range(50):
        ds = gen_double_sharing(1, 3, rng)
        assert reconstruct(ds.shares_deg_t[:2]) == reconstruct(ds.shares_deg_2t)
        assert reconstruct(ds.shares_deg_t[1:]) == reconstruct(ds.shares_deg_2t)


def test_double_sharing_degenerate():
    ds = gen_double_sharing(0, 1, random.Random(8))
    assert ds.shares_deg_t[0].value == ds.shares_deg_2t[0].value


def test_double_sharing_uniform():
    p = 7
    rng = random.Random(9)
    counts = [0] * p
    for _ in range(7000):
        ds = gen_double_sharing(1, 3, rng, p)
        counts[reconstruct(ds.shares_deg_2t, p)] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_double_sharing_errors():
    with pytest.raises(BadThreshold):
        gen_double_sharing(1, 2, random.Random(0))


def test_mul_gate():
    rng = random.Random(10)
    a = share(3, 1, 3, rng)
    b = share(4, 1, 3, rng)
    assert reconstruct(mul_gate(a, b, gen_double_sharing(1, 3, rng))) == 12
    one = share(1, 1, 3, rng)
    assert reconstruct(mul_gate(a, one, gen_double_sharing(1, 3, rng))) == 3


def test_mul_gate_output_degree_t():
    rng = random.Random(11)
    for _ in range(200):
        n = rng.choice([3, 5, 7])
        t = rng.randint(1, (n - 1) // 2)
        x, y = rng.randrange(P61), rng.randrange(P61)
        out = mul_gate(share(x, t, n, rng), share(y, t, n, rng), gen_double_sharing(t, n, rng))
        assert all(s.degree == t for s in out)
        for _ in range(3):
            assert reconstruct(rng.sample(out, t + 1)) == x * y % P61


def test_mul_gate_homomorphism():
    rng = random.Random(12)
    for _ in range(500):
        x, y = rng.randrange(P61), rng.randrange(P61)
        out = mul_gate(share(x, 1, 3, rng), share(y, 1, 3, rng), gen_double_sharing(1, 3, rng))
        assert reconstruct(out) == x * y % P61


def test_mul_gate_reuse_rejected():
    rng = random.Random(13)
    a = share(3, 1, 3, rng)
    ds = gen_double_sharing(1, 3, rng)
    mul_gate(a, a, ds)
    with pytest.raises(ReusedRandomness):
        mul_gate(a, a, ds)


def test_mul_gate_insufficient_parties():
    rng = random.Random(14)
    a = share(3, 1, 2, rng)
    ds = gen_double_sharing(0, 2, rng)
    with pytest.raises(InsufficientParties):
        mul_gate(a, a, ds)


def test_eval_circuit_examples():
    rng = random.Random(15)
    c = ArithCircuit(3, [Gate("add", 0, 1), Gate("mul", 3, 2)], 4)
    assert eval_circuit(c, [2, 3, 4], 1, 3, rng) == 20
    passthrough = ArithCircuit(1, [], 0)
    assert eval_circuit(passthrough, [99], 1, 3, rng) == 99


def test_eval_circuit_random():
    rng = random.Random(16)
    for _ in range(300):
        c = random_circuit(rng)
        xs = [rng.randrange(P61) for _ in range(c.inputs)]
        assert eval_circuit(c, xs, 1, 3, rng) == clear_eval(c, xs)


def test_circuit_validation():
    with pytest.raises(ValueError):
        ArithCircuit(1, [Gate("add", 0, 1)], 1)
    with pytest.raises(ValueError):
        ArithCircuit(1, [Gate("xor", 0, 0)], 1)
    with pytest.raises(BadThreshold):
        eval_circuit(ArithCircuit(1, [], 0), [1], 1, 2, random.Random(0))

import struct
import threading

import numpy as np
import pytest
from scipy import stats

from ppmarl.additive2pc import (
    CLEAR,
    TRIPLE_ELEMENTWISE,
    TRIPLE_MATMUL,
    AdditiveBackend,
    PartyBackend,
    make_triple_pair,
    open_shares,
    share_additive,
)
from ppmarl.algebra import DEFAULT_FXP, ShareMatrix
from ppmarl.errors import DealerUnavailable, DimMismatch, RangeOverflow, TripleExhausted
from ppmarl.transport import MsgType, loopback_pair, pack_matrices, HEADER

F = DEFAULT_FXP.frac_bits
ULP = 2.0**-F


def grid(rng, lo, hi, shape):
    """Uniform draws snapped to the fixed-point grid, so the oracle measures
    protocol error rather than input quantization."""
    return np.round(rng.uniform(lo, hi, shape) * 2.0**F) / 2.0**F


@pytest.fixture(scope="module")
def be():
    b = AdditiveBackend.spawn_local(seed=11)
    yield b
    b.close()


# ---------------------------------------------------------------- sharing


def test_zero_shares_sum_to_zero():
    s0, s1 = share_additive(np.zeros((3, 4)), rng=np.random.default_rng(0))
    assert np.all(s0.data + s1.data == 0)


def test_share_roundtrip_500():
    rng = np.random.default_rng(1)
    for _ in range(500):
        shape = tuple(rng.integers(1, 6, size=2))
        x = rng.uniform(-1000, 1000, shape)
        s0, s1 = share_additive(x, rng=rng)
        assert s0.party == 0 and s1.party == 1
        assert np.max(np.abs(open_shares(s0, s1) - x)) <= 2.0 ** -(F + 1)


def test_share_out_of_range():
    with pytest.raises(RangeOverflow):
        share_additive(np.array([[2.0**DEFAULT_FXP.int_bits * 2]]))


@pytest.mark.parametrize("which", [0, 1])
def test_share_marginal_uniform_low_bits(which):
    rng = np.random.default_rng(2)
    x = rng.uniform(-5, 5, (128, 128))
    shares = share_additive(x, rng=rng)
    low = (shares[which].data & np.uint64(0xFF)).astype(np.int64).ravel()
    counts = np.bincount(low, minlength=256)
    assert stats.chisquare(counts).pvalue > 1e-4
    # a high byte too, so the whole word looks uniform rather than just its tail
    high = (shares[which].data >> np.uint64(56)).astype(np.int64).ravel()
    assert stats.chisquare(np.bincount(high, minlength=256)).pvalue > 1e-4


def test_open_shares_mismatch():
    a = ShareMatrix(0, np.zeros((2, 2), dtype=np.uint64))
    b = ShareMatrix(1, np.zeros((2, 3), dtype=np.uint64))
    with pytest.raises(DimMismatch):
        open_shares(a, b)


# ---------------------------------------------------------------- triples


@pytest.mark.parametrize("kind", [TRIPLE_ELEMENTWISE, TRIPLE_MATMUL])
def test_triple_correct_and_consume_once(kind):
    t0, t1 = make_triple_pair(kind, 3, 4, 2, np.random.default_rng(3))
    a0, b0, c0 = t0.consume()
    a1, b1, c1 = t1.consume()
    A, B, C = a0 + a1, b0 + b1, c0 + c1
    assert np.array_equal(C, A @ B if kind == TRIPLE_MATMUL else A * B)
    with pytest.raises(TripleExhausted):
        t0.consume()


# ---------------------------------------------------------------- ops vs clear


def test_mul_examples(be):
    assert abs(be.evaluate("mul", [[3.0]], [[4.0]])[0, 0] - 12.0) <= ULP
    rng = np.random.default_rng(4)
    x = rng.uniform(-8, 8, (5, 5))
    assert np.all(be.evaluate("mul", x, np.zeros_like(x)) == 0.0)


def test_mul_10k(be):
    rng = np.random.default_rng(5)
    x = grid(rng, -8, 8, (100, 100))
    y = grid(rng, -8, 8, (100, 100))
    assert np.max(np.abs(be.evaluate("mul", x, y) - x * y)) <= 2.0 ** (-F + 1)


def test_matmul_examples(be):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(3, 3))
    assert np.max(np.abs(be.evaluate("matmul", np.eye(3), X) - X)) <= 3 * 2.0 ** (-F + 1)
    a, b = grid(rng, -8, 8, (1, 1)), grid(rng, -8, 8, (1, 1))
    assert abs(be.evaluate("matmul", a, b)[0, 0] - a[0, 0] * b[0, 0]) <= 2.0 ** (-F + 1)


def test_matmul_200(be):
    rng = np.random.default_rng(7)
    for _ in range(200):
        A = grid(rng, -8, 8, (4, 3))
        B = grid(rng, -8, 8, (3, 2))
        assert np.max(np.abs(be.evaluate("matmul", A, B) - A @ B)) <= 3 * 2.0 ** (-F + 1)


def test_relu_examples(be):
    assert np.array_equal(be.evaluate("relu", [[-1.0, 2.0]]), [[0.0, 2.0]])
    assert np.all(be.evaluate("relu", -np.ones((3, 3)) * 4.5) == 0.0)
    assert np.array_equal(be.evaluate("relu_prime", [[-1.0, 0.0, 3.0]]), [[0.0, 0.0, 1.0]])


def test_relu_10k(be):
    rng = np.random.default_rng(8)
    x = rng.uniform(-10, 10, (100, 100))
    got = be.evaluate("relu", x)
    assert np.array_equal(got > 0, x > 0)
    assert np.max(np.abs(got - np.maximum(x, 0))) <= 2.0 ** -(F + 1)
    assert np.array_equal(be.evaluate("relu_prime", x), (x > 0).astype(float))


def test_sigmoid_examples(be):
    got = be.evaluate("sigmoid", [[0.0, 20.0]])
    assert abs(got[0, 0] - 0.5) <= ULP
    assert abs(got[0, 1] - 1.0) <= ULP


def test_sigmoid_10k(be):
    rng = np.random.default_rng(9)
    x = rng.uniform(-10, 10, (100, 100))
    assert np.max(np.abs(be.evaluate("sigmoid", x) - 1 / (1 + np.exp(-x)))) <= 2.0 ** (-F + 2)


def test_open_examples(be):
    rng = np.random.default_rng(10)
    x = rng.uniform(-50, 50, (4, 5))
    assert np.max(np.abs(be.evaluate("open", x) - x)) <= 2.0 ** -(F + 1)
    assert np.all(be.evaluate("open", np.zeros((2, 2))) == 0.0)


def test_one_sided_open_bytes(be):
    x = np.random.default_rng(12).normal(size=(6, 7))
    got = be.evaluate("open", x, recipient=0)
    assert np.max(np.abs(got - x)) <= 2.0 ** -(F + 1)
    assert be.last_stats[1]["peer"]["bytes_received"] == 0
    assert be.last_stats[0]["peer"]["bytes_received"] > 0
    be.evaluate("open", x, recipient=1)
    assert be.last_stats[0]["peer"]["bytes_received"] == 0


@pytest.mark.parametrize("op", ["add", "mul", "matmul", "relu", "relu_prime", "sigmoid"])
def test_backend_equivalence_500(be, op):
    tol = {"add": ULP, "mul": 2 * ULP, "relu": ULP / 2, "relu_prime": 0.0, "sigmoid": 4 * ULP}
    rng = np.random.default_rng(sorted(tol).index(op) if op in tol else 99)
    for _ in range(500):
        m, k, n = rng.integers(1, 5, size=3)
        if op == "matmul":
            xs = [grid(rng, -8, 8, (m, k)), grid(rng, -8, 8, (k, n))]
            t = k * 2 * ULP
        elif op in ("add", "mul"):
            xs = [grid(rng, -8, 8, (m, n)), grid(rng, -8, 8, (m, n))]
            t = tol[op]
        else:
            xs = [rng.uniform(-10, 10, (m, n))]
            t = tol[op]
        ref = CLEAR.evaluate(op, *xs)
        assert np.max(np.abs(be.evaluate(op, *xs, rng=rng) - ref)) <= t


# ---------------------------------------------------------------- rounds


def test_mul_one_open_round(be):
    x = np.ones((3, 3))
    be.evaluate("mul", x, x)
    for b in (0, 1):
        st = be.last_stats[b]["peer"]
        assert st["open_rounds"] == 1
        assert st["sent_by_type"] == {"OPEN_VAL": 1}


@pytest.mark.parametrize("k", [1, 5, 20])
def test_matmul_two_opened_matrices(be, k):
    m, n = 3, 2
    be.evaluate("matmul", np.ones((m, k)), np.ones((k, n)))
    expected = HEADER.size + len(pack_matrices([np.zeros((m, k), np.uint64), np.zeros((k, n), np.uint64)]))
    for b in (0, 1):
        st = be.last_stats[b]["peer"]
        assert st["open_rounds"] == 1
        assert st["bytes_sent"] == expected


# ---------------------------------------------------------------- party-level


def test_dealer_unavailable():
    p0, p1 = loopback_pair("peer", timeout=0.5)
    d0, _ = loopback_pair("d0", timeout=0.5)
    d1, _ = loopback_pair("d1", timeout=0.5)
    parties = [PartyBackend(0, p0, d0, 5, 100), PartyBackend(1, p1, d1, 5, 101)]
    errors = []

    def run(pb):
        a = pb._sm(np.zeros((1, 2), dtype=np.uint64))
        try:
            pb.sec_relu(a)
        except DealerUnavailable as e:
            errors.append(e)

    ts = [threading.Thread(target=run, args=(pb,)) for pb in parties]
    for t in ts:
        t.start()
    for t in ts:
        t.join(timeout=10)
    assert len(errors) == 2


def test_sec_input_masks_cancel():
    # owner's share is enc - mask, the other party's is the mask itself
    p0, p1 = loopback_pair("peer")
    a = PartyBackend(0, p0, None, 42, 1)
    b = PartyBackend(1, p1, None, 42, 2)
    v = np.array([[1.5, -2.25]])
    s0 = a.sec_input(v, 0, v.shape)
    s1 = b.sec_input(None, 0, v.shape)
    assert np.array_equal(open_shares(s0, ShareMatrix(1, s1.data)), v)
    assert s0.data.tobytes() != struct.pack("<2Q", *s1.data.ravel())

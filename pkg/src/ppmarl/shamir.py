"""(t+1)-out-of-n Shamir sharing with addition and multiplication gates.

Local multi-party simulation: every party's share lives in one process. This
is the oracle-tested reference for arithmetic-circuit MPC; the networked
runtime uses the two-party additive backend instead (Shamir needs n >= 3).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from .algebra import P61, lagrange_coefficients, poly_eval
from .errors import (
    BadThreshold,
    IndexMismatch,
    InsufficientParties,
    InsufficientShares,
    MixedDegree,
    ReusedRandomness,
)


@dataclass(frozen=True)
class ShamirShare:
    party_index: int
    value: int
    degree: int


def share(
    secret: int,
    t: int,
    n: int,
    rng: random.Random,
    p: int = P61,
    coeffs: Sequence[int] | None = None,
) -> list[ShamirShare]:
    """Share ``secret`` with a random degree-<=t polynomial q, q(0)=secret.

    ``coeffs`` (a_1..a_t) pins the polynomial, for tests.
    """
    if not 0 <= t < n:
        raise BadThreshold(f"need 0 <= t < n, got t={t}, n={n}")
    if n >= p:
        raise BadThreshold(f"need n < p, got n={n}, p={p}")
    if coeffs is None:
        coeffs = [rng.randrange(p) for _ in range(t)]
    elif len(coeffs) != t:
        raise BadThreshold(f"expected {t} coefficients, got {len(coeffs)}")
    poly = [secret % p, *[c % p for c in coeffs]]
    return [ShamirShare(i, poly_eval(poly, i, p), t) for i in range(1, n + 1)]


def reconstruct(shares: Sequence[ShamirShare], p: int = P61) -> int:
    if not shares:
        raise InsufficientShares("no shares given")
    degrees = {s.degree for s in shares}
    if len(degrees) != 1:
        raise MixedDegree(f"shares of different degrees: {sorted(degrees)}")
    (deg,) = degrees
    if len(shares) < deg + 1:
        raise InsufficientShares(f"degree {deg} needs {deg + 1} shares, got {len(shares)}")
    xs = [s.party_index for s in shares]
    lams = lagrange_coefficients(xs, 0, p)
    return sum(lam * s.value for lam, s in zip(lams, shares)) % p


def _check_aligned(a: Sequence[ShamirShare], b: Sequence[ShamirShare]) -> None:
    if [s.party_index for s in a] != [s.party_index for s in b]:
        raise IndexMismatch("share vectors cover different parties")
    if {s.degree for s in a} != {s.degree for s in b}:
        raise IndexMismatch("share vectors have different degrees")


def add_gate(a: Sequence[ShamirShare], b: Sequence[ShamirShare], p: int = P61) -> list[ShamirShare]:
    _check_aligned(a, b)
    return [ShamirShare(x.party_index, (x.value + y.value) % p, x.degree) for x, y in zip(a, b)]


@dataclass
class DoubleSharing:
    """Degree-t and degree-2t sharings of one hidden random value. Consume once."""

    shares_deg_t: list[ShamirShare]
    shares_deg_2t: list[ShamirShare]
    used: bool = field(default=False, repr=False)

    def consume(self) -> tuple[list[ShamirShare], list[ShamirShare]]:
        if self.used:
            raise ReusedRandomness("double sharing already consumed")
        self.used = True
        return self.shares_deg_t, self.shares_deg_2t


def gen_double_sharing(t: int, n: int, rng: random.Random, p: int = P61) -> DoubleSharing:
    """Every party contributes r_j through both degrees; the sums share r = sum r_j."""
    if 2 * t >= n:
        raise BadThreshold(f"degree reduction needs 2t < n, got t={t}, n={n}")
    low = [0] * n
    high = [0] * n
    for _ in range(n):
        r_j = rng.randrange(p)
        for k, s in enumerate(share(r_j, t, n, rng, p)):
            low[k] = (low[k] + s.value) % p
        for k, s in enumerate(share(r_j, 2 * t, n, rng, p)):
            high[k] = (high[k] + s.value) % p
    return DoubleSharing(
        [ShamirShare(i + 1, v, t) for i, v in enumerate(low)],
        [ShamirShare(i + 1, v, 2 * t) for i, v in enumerate(high)],
    )


def mul_gate(
    a: Sequence[ShamirShare],
    b: Sequence[ShamirShare],
    ds: DoubleSharing,
    p: int = P61,
) -> list[ShamirShare]:
    """Local products give a degree-2t sharing c; reduce with d = c - R_2t.

    All n parties open d(0); the output c'(i) = R_t(i) + d(0) has degree t.
    """
    _check_aligned(a, b)
    t = a[0].degree
    n = len(a)
    if 2 * t >= n:
        raise InsufficientParties(f"{n} parties cannot open a degree-{2 * t} polynomial")
    r_t, r_2t = ds.consume()
    if [s.party_index for s in r_t] != [s.party_index for s in a] or r_t[0].degree != t:
        raise IndexMismatch("double sharing does not match the operand sharing")
    d = [
        ShamirShare(x.party_index, (x.value * y.value - r.value) % p, 2 * t)
        for x, y, r in zip(a, b, r_2t)
    ]
    d0 = reconstruct(d, p)
    return [ShamirShare(r.party_index, (r.value + d0) % p, t) for r in r_t]


@dataclass(frozen=True)
class Gate:
    op: str  # "add" | "mul"
    left: int
    right: int


@dataclass
class ArithCircuit:
    """Wires 0..inputs-1 are inputs; gate k writes wire inputs+k."""

    inputs: int
    gates: list[Gate]
    output: int

    def __post_init__(self):
        for k, g in enumerate(self.gates):
            if g.op not in ("add", "mul"):
                raise ValueError(f"unknown gate op {g.op!r}")
            limit = self.inputs + k
            if not (0 <= g.left < limit and 0 <= g.right < limit):
                raise ValueError(f"gate {k} reads a wire that is not yet defined")
        if not 0 <= self.output < self.inputs + len(self.gates):
            raise ValueError("output wire out of range")


def clear_eval(c: ArithCircuit, inputs: Sequence[int], p: int = P61) -> int:
    wires = [x % p for x in inputs]
    for g in c.gates:
        x, y = wires[g.left], wires[g.right]
        wires.append((x + y) % p if g.op == "add" else (x * y) % p)
    return wires[c.output]


def eval_circuit(
    c: ArithCircuit,
    input_secrets: Sequence[int],
    t: int,
    n: int,
    rng: random.Random,
    p: int = P61,
) -> int:
    if len(input_secrets) != c.inputs:
        raise ValueError(f"circuit takes {c.inputs} inputs, got {len(input_secrets)}")
    if 2 * t >= n:
        raise BadThreshold(f"circuit evaluation needs 2t < n, got t={t}, n={n}")
    wires = [share(s, t, n, rng, p) for s in input_secrets]
    for g in c.gates:
        a, b = wires[g.left], wires[g.right]
        if g.op == "add":
            wires.append(add_gate(a, b, p))
        else:
            wires.append(mul_gate(a, b, gen_double_sharing(t, n, rng, p), p))
    return reconstruct(wires[c.output], p)


def random_circuit(rng: random.Random, max_inputs: int = 5, max_gates: int = 20) -> ArithCircuit:
    n_in = rng.randint(1, max_inputs)
    gates = []
    for k in range(rng.randint(0, max_gates)):
        limit = n_in + k
        gates.append(Gate(rng.choice(("add", "mul")), rng.randrange(limit), rng.randrange(limit)))
    return ArithCircuit(n_in, gates, n_in + len(gates) - 1)

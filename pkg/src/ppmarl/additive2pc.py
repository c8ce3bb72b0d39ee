"""Two-party additive secret sharing over Z_{2^64} with a helper dealer.

Pieces:

* ``share_additive`` / ``open_shares``: plain sharing helpers.
* ``ClearBackend``: float64 reference implementation of the backend contract.
* ``PartyBackend``: one party's half of the protocol, talking to its peer and
  the dealer over transport channels.
* ``Dealer``: correlated randomness (matrix Beaver triples) and the masked
  nonlinear services (truncation, sign, sigmoid).
* ``PartyEngine``: a long-running party process that executes gadget calls
  sent by a driver over a control channel.
* ``AdditiveBackend``: the driver-side facade (same ``run_gadget`` surface as
  ``ClearBackend``) that fans calls out to two engines.

The backend contract (method names shared by both backends) is
sec_add, sec_sub, sec_add_row, sec_transpose, sec_colsum, sec_mul, sec_matmul,
sec_relu, sec_relu_prime, sec_relu_mask, sec_sigmoid, sec_rsub, sec_const,
sec_input, sec_open.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    DEFAULT_FXP,
    FixedPointConfig,
    ShareMatrix,
    decode_fixed,
    encode_fixed,
    random_ring,
)
from .errors import (
    ChannelDesync,
    DealerUnavailable,
    DimMismatch,
    PPMarlError,
    ProtocolError,
    TripleExhausted,
)
from .transport import (
    Channel,
    ChannelStats,
    MsgType,
    loopback_pair,
    pack_matrices,
    tcp_pair,
    unpack_matrices,
)

log = logging.getLogger(__name__)

OWNER_BOTH = "both"

# truncation masks live in [0, 2^63); hidden values must satisfy |z| < 2^62
_TRUNC_OFFSET = np.uint64(1 << 62)
# ReLU blinding scale is drawn from [1, 2^16)
_RELU_SCALE_BITS = 16

TRIPLE_ELEMENTWISE = 0
TRIPLE_MATMUL = 1

OP_TRUNC = 1
OP_SIGN = 2
OP_SIGMOID = 3


def _sigmoid(x):
    # numerically stable logistic
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- sharing helpers


def share_additive(x, cfg: FixedPointConfig = DEFAULT_FXP, rng: np.random.Generator | None = None):
    """Split ``x`` into (r, encode(x) - r) with r uniform over the ring."""
    rng = rng if rng is not None else np.random.default_rng()
    enc = np.atleast_2d(encode_fixed(np.asarray(x, dtype=np.float64), cfg))
    r = random_ring(rng, enc.shape)
    return ShareMatrix(0, r, cfg.frac_bits), ShareMatrix(1, enc - r, cfg.frac_bits)


def open_shares(s0: ShareMatrix, s1: ShareMatrix, cfg: FixedPointConfig = DEFAULT_FXP) -> np.ndarray:
    if s0.shape != s1.shape:
        raise DimMismatch(f"share shapes differ: {s0.shape} vs {s1.shape}")
    if s0.frac != s1.frac:
        raise DimMismatch("shares carry different fixed-point scales")
    return decode_fixed(s0.data + s1.data, cfg, frac_bits=s0.frac)


@dataclass
class BeaverTriple:
    """One party's shares of (A, B, C) with C = A.B (or A*B) exactly in the ring."""

    kind: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    used: bool = field(default=False, repr=False)

    def consume(self):
        if self.used:
            raise TripleExhausted("triple already consumed")
        self.used = True
        return self.a, self.b, self.c


def make_triple_pair(kind: int, m: int, k: int, n: int, rng: np.random.Generator):
    """Dealer-side generation of both parties' triple shares."""
    if kind == TRIPLE_MATMUL:
        a_shape, b_shape = (m, k), (k, n)
    else:
        a_shape = b_shape = (m, n)
    A = random_ring(rng, a_shape)
    B = random_ring(rng, b_shape)
    C = A @ B if kind == TRIPLE_MATMUL else A * B
    A0, B0, C0 = random_ring(rng, A.shape), random_ring(rng, B.shape), random_ring(rng, C.shape)
    return (
        BeaverTriple(kind, A0, B0, C0),
        BeaverTriple(kind, A - A0, B - B0, C - C0),
    )


# ---------------------------------------------------------------- clear backend


class ClearBackend:
    """Plaintext float64 reference. Values are numpy arrays; open is identity."""

    name = "clear"
    party = None

    def sec_add(self, a, b):
        return a + b

    def sec_sub(self, a, b):
        return a - b

    def sec_add_row(self, m, row):
        return m + row

    def sec_transpose(self, a):
        return a.T

    def sec_colsum(self, a):
        return a.sum(axis=0, keepdims=True)

    def sec_mul(self, a, b):
        return a * b

    def sec_matmul(self, a, b):
        if a.shape[1] != b.shape[0]:
            raise DimMismatch(f"cannot multiply {a.shape} by {b.shape}")
        return a @ b

    def sec_relu(self, a):
        return np.maximum(a, 0.0)

    def sec_relu_prime(self, a):
        return (a > 0).astype(np.float64)

    def sec_relu_mask(self, a):
        pos = a > 0
        return np.where(pos, a, 0.0), pos.astype(np.float64)

    def sec_sigmoid(self, a):
        return _sigmoid(a)

    def sec_rsub(self, c: float, a):
        return c - a

    def sec_const(self, shape, value: float):
        return np.full(shape, value, dtype=np.float64)

    def sec_input(self, value, owner, shape):
        return np.asarray(value, dtype=np.float64).reshape(shape)

    def sec_open(self, a, to=OWNER_BOTH):
        return np.asarray(a, dtype=np.float64)

    def holds(self, owner) -> bool:
        return True

    def run_gadget(self, name, x0, x1, params, owner=0, extra=None, site=None):
        from .gadgets import GADGET_BODIES

        X = x0 + x1
        return GADGET_BODIES[name](self, X, params, extra or {}, owner)

    def evaluate(self, op, *xs, **kw):
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        if op == "open":
            return xs[0]
        return _CLEAR_EVAL[op](self, *xs)


_CLEAR_EVAL = {
    "add": ClearBackend.sec_add,
    "mul": ClearBackend.sec_mul,
    "matmul": ClearBackend.sec_matmul,
    "relu": ClearBackend.sec_relu,
    "relu_prime": ClearBackend.sec_relu_prime,
    "sigmoid": ClearBackend.sec_sigmoid,
}

CLEAR = ClearBackend()


# ---------------------------------------------------------------- party backend


class PartyBackend:
    """One party's view of the protocol. Both parties must issue the same
    sequence of calls; every call is a blocking exchange in that order."""

    name = "additive"

    def __init__(
        self,
        party: int,
        peer: Channel,
        dealer: Channel,
        common_seed: int,
        private_seed: int,
        cfg: FixedPointConfig = DEFAULT_FXP,
    ):
        self.party = party
        self.peer = peer
        self.dealer = dealer
        self.cfg = cfg
        self.f = cfg.frac_bits
        # identical stream in both parties: input masks and nonlinear blinding
        self.common = np.random.default_rng(common_seed)
        # private to this party: truncation masks
        self.rng = np.random.default_rng(private_seed)

    def _sm(self, data, frac=None) -> ShareMatrix:
        return ShareMatrix(self.party, np.ascontiguousarray(data, dtype=np.uint64), self.f if frac is None else frac)

    def holds(self, owner) -> bool:
        return owner == OWNER_BOTH or owner == self.party

    # -- local ops

    def sec_add(self, a: ShareMatrix, b: ShareMatrix) -> ShareMatrix:
        if a.shape != b.shape:
            raise DimMismatch(f"cannot add {a.shape} and {b.shape}")
        a, b = self._align(a, b)
        return self._sm(a.data + b.data, a.frac)

    def sec_sub(self, a: ShareMatrix, b: ShareMatrix) -> ShareMatrix:
        if a.shape != b.shape:
            raise DimMismatch(f"cannot subtract {b.shape} from {a.shape}")
        a, b = self._align(a, b)
        return self._sm(a.data - b.data, a.frac)

    def sec_add_row(self, m: ShareMatrix, row: ShareMatrix) -> ShareMatrix:
        if row.rows != 1 or row.cols != m.cols:
            raise DimMismatch(f"row vector {row.shape} does not broadcast over {m.shape}")
        m, row = self._align(m, row)
        return self._sm(m.data + row.data, m.frac)

    def sec_transpose(self, a: ShareMatrix) -> ShareMatrix:
        return self._sm(a.data.T, a.frac)

    def sec_colsum(self, a: ShareMatrix) -> ShareMatrix:
        return self._sm(a.data.sum(axis=0, keepdims=True, dtype=np.uint64), a.frac)

    def sec_const(self, shape, value: float) -> ShareMatrix:
        data = np.zeros(shape, dtype=np.uint64)
        if self.party == 0:
            data[...] = encode_fixed(value, self.cfg)
        return self._sm(data)

    def sec_rsub(self, c: float, a: ShareMatrix) -> ShareMatrix:
        return self.sec_sub(self.sec_const(a.shape, c), a)

    def _align(self, a: ShareMatrix, b: ShareMatrix):
        # lift an integer-scale operand to the other's scale (exact)
        if a.frac == b.frac:
            return a, b
        if a.frac < b.frac:
            return self._sm(a.data << np.uint64(b.frac - a.frac), b.frac), b
        return a, self._sm(b.data << np.uint64(a.frac - b.frac), a.frac)

    # -- input / output

    def sec_input(self, value, owner: int, shape) -> ShareMatrix:
        """Owner-held plaintext to shares; the mask comes from the common
        stream so no bytes move. The non-owner's share is the mask."""
        shape = tuple(shape)
        mask = random_ring(self.common, shape)
        if self.party == owner:
            enc = np.asarray(encode_fixed(np.asarray(value, dtype=np.float64), self.cfg)).reshape(shape)
            return self._sm(enc - mask)
        return self._sm(mask)

    def padded(self, half) -> ShareMatrix:
        """A zero-padded local input is already an additive share of X."""
        return self._sm(np.atleast_2d(encode_fixed(np.asarray(half, dtype=np.float64), self.cfg)))

    def sec_open(self, a: ShareMatrix, to=OWNER_BOTH):
        """Reveal to ``to`` (0, 1 or "both"); others get None."""
        if to == OWNER_BOTH:
            other = self._exchange(MsgType.OPEN_VAL, [a.data])[0]
            return decode_fixed(a.data + other, self.cfg, frac_bits=a.frac)
        if self.party == to:
            msg = self.peer.recv(MsgType.OPEN_VAL)
            (other,) = unpack_matrices(msg.payload, count=1)
            if other.shape != a.shape:
                raise ChannelDesync(f"opened share shape {other.shape} != {a.shape}")
            return decode_fixed(a.data + other, self.cfg, frac_bits=a.frac)
        self.peer.send(MsgType.OPEN_VAL, pack_matrices([a.data]))
        return None

    def _exchange(self, mtype: MsgType, mats):
        # ordered send/recv so large frames cannot deadlock on socket buffers
        payload = pack_matrices(mats)
        if self.party == 0:
            self.peer.send(mtype, payload)
            msg = self.peer.recv(mtype)
        else:
            msg = self.peer.recv(mtype)
            self.peer.send(mtype, payload)
        other = unpack_matrices(msg.payload, count=len(mats))
        for mine, theirs in zip(mats, other):
            if mine.shape != theirs.shape:
                raise ChannelDesync(f"peer share shape {theirs.shape} != {mine.shape}")
        return other

    # -- dealer services

    def _dealer_call(self, req_type: MsgType, payload: bytes, resp_type: MsgType, count: int):
        try:
            self.dealer.send(req_type, payload)
            msg = self.dealer.recv(resp_type)
        except (OSError, ChannelDesync) as e:
            raise DealerUnavailable(f"dealer did not answer: {e}") from e
        return unpack_matrices(msg.payload, count=count)

    def triple(self, kind: int, m: int, k: int, n: int) -> BeaverTriple:
        a, b, c = self._dealer_call(MsgType.TRIPLE, struct.pack(">BIII", kind, m, k, n), MsgType.TRIPLE, 3)
        return BeaverTriple(kind, a, b, c)

    def _nonlin(self, op: int, param: int, data: np.ndarray, count: int):
        return self._dealer_call(
            MsgType.NONLIN_REQ, struct.pack(">BB", op, param) + pack_matrices([data]), MsgType.NONLIN_RESP, count
        )

    def truncate(self, a: ShareMatrix, bits: int) -> ShareMatrix:
        """Drop ``bits`` fractional bits; exact up to one unit in the last place."""
        if bits == 0:
            return a
        if self.party == 0:
            r = self.rng.integers(0, 1 << 63, size=a.shape, dtype=np.uint64)
            masked = a.data + _TRUNC_OFFSET + r
            (t,) = self._nonlin(OP_TRUNC, bits, masked, 1)
            out = t - ((_TRUNC_OFFSET + r) >> np.uint64(bits))
        else:
            (out,) = self._nonlin(OP_TRUNC, bits, a.data, 1)
        return self._sm(out, a.frac - bits)

    # -- multiplication

    def _beaver(self, kind: int, x: ShareMatrix, y: ShareMatrix) -> ShareMatrix:
        if kind == TRIPLE_MATMUL:
            if x.cols != y.rows:
                raise DimMismatch(f"cannot multiply {x.shape} by {y.shape}")
            m, k, n = x.rows, x.cols, y.cols
        else:
            if x.shape != y.shape:
                raise DimMismatch(f"elementwise product of {x.shape} and {y.shape}")
            (m, n), k = x.shape, 0
        a, b, c = self.triple(kind, m, k, n).consume()
        e_mine = x.data - a
        f_mine = y.data - b
        e_other, f_other = self._exchange(MsgType.OPEN_VAL, [e_mine, f_mine])
        e = e_mine + e_other
        f = f_mine + f_other
        if kind == TRIPLE_MATMUL:
            z = c + e @ b + a @ f
            if self.party == 0:
                z = z + e @ f
        else:
            z = c + e * b + a * f
            if self.party == 0:
                z = z + e * f
        out = self._sm(z, x.frac + y.frac)
        excess = out.frac - self.f
        return self.truncate(out, excess) if excess > 0 else out

    def sec_mul(self, x: ShareMatrix, y: ShareMatrix) -> ShareMatrix:
        return self._beaver(TRIPLE_ELEMENTWISE, x, y)

    def sec_matmul(self, x: ShareMatrix, y: ShareMatrix) -> ShareMatrix:
        return self._beaver(TRIPLE_MATMUL, x, y)

    # -- nonlinear gates

    def _blind(self, a: ShareMatrix, scale: bool):
        """Common-stream sign flip, optional positive integer scale, and a
        permutation. Returns the blinded share and the data to undo it."""
        n = a.data.size
        flip = self.common.integers(0, 2, size=n).astype(bool)
        lam = (
            self.common.integers(1, 1 << _RELU_SCALE_BITS, size=n, dtype=np.uint64)
            if scale
            else np.ones(n, dtype=np.uint64)
        )
        perm = self.common.permutation(n)
        v = a.data.reshape(-1) * lam
        v = np.where(flip, np.uint64(0) - v, v)
        return v[perm].reshape(1, n), flip, perm

    @staticmethod
    def _unpermute(v: np.ndarray, perm: np.ndarray, shape) -> np.ndarray:
        out = np.empty(v.size, dtype=np.uint64)
        out[perm] = v.reshape(-1)
        return out.reshape(shape)

    def sec_relu_prime(self, a: ShareMatrix) -> ShareMatrix:
        """Shares of the indicator [a > 0] at integer scale (frac 0)."""
        blinded, flip, perm = self._blind(a, scale=True)
        pos, neg = self._nonlin(OP_SIGN, 0, blinded, 2)
        pos = self._unpermute(pos, perm, a.shape)
        neg = self._unpermute(neg, perm, a.shape)
        ind = np.where(flip.reshape(a.shape), neg, pos)
        return self._sm(ind, 0)

    def sec_relu_mask(self, a: ShareMatrix):
        mask = self.sec_relu_prime(a)
        return self.sec_mul(a, mask), mask

    def sec_relu(self, a: ShareMatrix) -> ShareMatrix:
        return self.sec_relu_mask(a)[0]

    def sec_sigmoid(self, a: ShareMatrix) -> ShareMatrix:
        if a.frac != self.f:
            a = self._align(a, self._sm(np.zeros((1, 1), dtype=np.uint64)))[0]
        blinded, flip, perm = self._blind(a, scale=False)
        (s,) = self._nonlin(OP_SIGMOID, a.frac, blinded, 1)
        s = self._unpermute(s, perm, a.shape)
        # flipped entries hold sigma(-x) = 1 - sigma(x)
        one = np.uint64(encode_fixed(1.0, self.cfg)) if self.party == 0 else np.uint64(0)
        out = np.where(flip.reshape(a.shape), one - s, s)
        return self._sm(out)


# ---------------------------------------------------------------- dealer


class Dealer:
    """Serves one two-party session. Requests from both parties must arrive
    in lock-step and agree on type and public header; otherwise the session
    is desynchronised."""

    def __init__(self, ch0: Channel, ch1: Channel, seed: int, cfg: FixedPointConfig = DEFAULT_FXP):
        self.ch = (ch0, ch1)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.served = Counter()

    @classmethod
    def handshake(cls, a: Channel, b: Channel, seed: int, cfg: FixedPointConfig | None = None) -> "Dealer":
        """Order the two channels by the party id announced in HELLO. The
        fixed-point layout comes from the parties unless given."""
        by_party = {}
        layouts = set()
        for ch in (a, b):
            hello = json.loads(ch.recv(MsgType.HELLO).payload)
            by_party[int(hello["party"])] = ch
            if "frac_bits" in hello:
                layouts.add((int(hello["frac_bits"]), int(hello["int_bits"])))
            ch.send(MsgType.HELLO, json.dumps({"role": "dealer"}).encode())
        if set(by_party) != {0, 1}:
            raise ProtocolError(f"dealer expected parties 0 and 1, got {sorted(by_party)}")
        if len(layouts) > 1:
            raise ProtocolError(f"parties disagree on the fixed-point layout: {sorted(layouts)}")
        if cfg is None:
            cfg = FixedPointConfig(*layouts.pop()) if layouts else DEFAULT_FXP
        return cls(by_party[0], by_party[1], seed, cfg)

    def serve(self) -> None:
        ch0, ch1 = self.ch
        while True:
            m0 = ch0.recv()
            m1 = ch1.recv()
            if m0.msg_type != m1.msg_type:
                raise ChannelDesync(f"dealer got {m0.msg_type.name} from party 0, {m1.msg_type.name} from party 1")
            if m0.msg_type == MsgType.BYE:
                for ch in self.ch:
                    ch.send(MsgType.BYE)
                return
            if m0.msg_type == MsgType.TRIPLE:
                self._serve_triple(m0.payload, m1.payload)
            elif m0.msg_type == MsgType.NONLIN_REQ:
                self._serve_nonlin(m0.payload, m1.payload)
            else:
                raise ProtocolError(f"dealer cannot serve {m0.msg_type.name}")
            self.served[m0.msg_type.name] += 1

    def _serve_triple(self, p0: bytes, p1: bytes) -> None:
        if p0 != p1:
            raise ChannelDesync("parties requested different triples")
        kind, m, k, n = struct.unpack(">BIII", p0)
        t0, t1 = make_triple_pair(kind, m, k, n, self.rng)
        self.ch[0].send(MsgType.TRIPLE, pack_matrices([t0.a, t0.b, t0.c]))
        self.ch[1].send(MsgType.TRIPLE, pack_matrices([t1.a, t1.b, t1.c]))

    def _reshare(self, values: list[np.ndarray]) -> None:
        s0 = [random_ring(self.rng, v.shape) for v in values]
        s1 = [v - r for v, r in zip(values, s0)]
        self.ch[0].send(MsgType.NONLIN_RESP, pack_matrices(s0))
        self.ch[1].send(MsgType.NONLIN_RESP, pack_matrices(s1))

    def _serve_nonlin(self, p0: bytes, p1: bytes) -> None:
        if p0[:2] != p1[:2]:
            raise ChannelDesync("parties requested different nonlinear gates")
        op, param = struct.unpack(">BB", p0[:2])
        (y0,) = unpack_matrices(p0[2:], count=1)
        (y1,) = unpack_matrices(p1[2:], count=1)
        if y0.shape != y1.shape:
            raise ChannelDesync(f"nonlinear operands differ in shape: {y0.shape} vs {y1.shape}")
        y = y0 + y1
        if op == OP_TRUNC:
            # y = z + 2^62 + r lies in [0, 2^64): an unsigned shift is exact
            self._reshare([y >> np.uint64(param)])
        elif op == OP_SIGN:
            signed = y.view(np.int64)
            self._reshare([(signed > 0).astype(np.uint64), (signed < 0).astype(np.uint64)])
        elif op == OP_SIGMOID:
            vals = decode_fixed(y, self.cfg, frac_bits=param)
            self._reshare([np.atleast_2d(encode_fixed(_sigmoid(vals), self.cfg))])
        else:
            raise ProtocolError(f"unknown nonlinear op {op}")


# ---------------------------------------------------------------- control plane


def pack_call(header: dict, mats=(), dtype: str = "<f8") -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode()
    return struct.pack(">I", len(hdr)) + hdr + pack_matrices(list(mats), dtype)


def unpack_call(payload: bytes, dtype: str = "<f8"):
    (n,) = struct.unpack_from(">I", payload)
    header = json.loads(payload[4 : 4 + n])
    return header, unpack_matrices(payload[4 + n :], dtype)


def _stats_delta(after: ChannelStats, before: ChannelStats) -> dict:
    out = {}
    for key in ("bytes_sent", "bytes_received", "frames_sent", "frames_received", "open_rounds"):
        out[key] = getattr(after, key) - getattr(before, key)
    for key in ("sent_by_type", "received_by_type", "per_tag"):
        c = getattr(after, key).copy()
        c.subtract(getattr(before, key))
        out[key] = {k: v for k, v in c.items() if v}
    return out


_PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class PartyEngine:
    """Executes CALL jobs from the driver as party ``party``."""

    def __init__(self, party: int, ctrl: Channel, peer: Channel, dealer: Channel):
        self.party = party
        self.ctrl = ctrl
        self.peer = peer
        self.dealer = dealer
        self.backend: PartyBackend | None = None

    def _handshake(self) -> None:
        hello = json.loads(self.ctrl.recv(MsgType.HELLO).payload)
        cfg = FixedPointConfig(hello["frac_bits"], hello["int_bits"])
        seed = int(hello["engine_seed"])
        me = f"player{self.party}"
        self.ctrl.send(MsgType.HELLO, json.dumps({"role": me}).encode())
        self.dealer.send(
            MsgType.HELLO,
            json.dumps({"role": me, "party": self.party, "frac_bits": cfg.frac_bits, "int_bits": cfg.int_bits}).encode(),
        )
        self.dealer.recv(MsgType.HELLO)
        if self.party == 0:
            common = int(np.random.default_rng([seed, 0]).integers(0, 2**62))
            self.peer.send(MsgType.HELLO, json.dumps({"role": me, "common_seed": common}).encode())
            self.peer.recv(MsgType.HELLO)
        else:
            common = int(json.loads(self.peer.recv(MsgType.HELLO).payload)["common_seed"])
            self.peer.send(MsgType.HELLO, json.dumps({"role": me}).encode())
        self.backend = PartyBackend(self.party, self.peer, self.dealer, common, seed + 1 + self.party, cfg)

    def _stats(self) -> tuple[ChannelStats, ChannelStats]:
        return self.peer.stats_snapshot(), self.dealer.stats_snapshot()

    def serve(self) -> None:
        self._handshake()
        while True:
            msg = self.ctrl.recv(MsgType.CALL, MsgType.BYE)
            if msg.msg_type == MsgType.BYE:
                self._shutdown()
                return
            before = self._stats()
            try:
                header, mats = self._dispatch(msg.payload)
                ok = {"ok": True}
            except PPMarlError as e:
                log.exception("party %d call failed", self.party)
                header, mats, ok = {}, [], {"ok": False, "error": f"{type(e).__name__}: {e}"}
            after = self._stats()
            header.update(ok)
            header["stats"] = {
                "peer": _stats_delta(after[0], before[0]),
                "dealer": _stats_delta(after[1], before[1]),
            }
            enc = header.pop("_dtype", "<f8")
            header["dtype"] = enc
            self.ctrl.send(MsgType.RESULT, pack_call(header, mats, enc))
            if not ok["ok"]:
                # the peer is now out of step; nothing sensible can follow
                return

    def _shutdown(self) -> None:
        self.dealer.send(MsgType.BYE)
        self.peer.send(MsgType.BYE)
        self.peer.recv(MsgType.BYE)
        self.dealer.recv(MsgType.BYE)
        self.ctrl.send(MsgType.BYE)

    def _dispatch(self, payload: bytes):
        (n,) = struct.unpack_from(">I", payload)
        header = json.loads(payload[4 : 4 + n])
        dtype = header.get("dtype", "<f8")
        mats = unpack_matrices(payload[4 + n :], dtype)
        site = header.get("site")
        self.peer.tag = self.dealer.tag = site
        try:
            if header["kind"] == "gadget":
                return self._run_gadget(header, mats)
            if header["kind"] == "eval":
                return self._run_eval(header, mats)
            raise ProtocolError(f"unknown call kind {header['kind']!r}")
        finally:
            self.peer.tag = self.dealer.tag = None

    def _run_gadget(self, header: dict, mats):
        from .gadgets import GADGET_BODIES
        from .nncore import MlpParams

        be = self.backend
        owner = header["owner"]
        mine = be.holds(owner)
        X = be.padded(mats[0])
        rest = list(mats[1:])
        shapes = header["shapes"]
        vals = {}
        for name in _PARAM_NAMES:
            vals[name] = be.sec_input(rest.pop(0) if mine else None, owner, shapes[name])
        params = MlpParams(**vals, f3=header["f3"])
        extra = {}
        for name, shape in header.get("extra", {}).items():
            # owner-held clear inputs; the body decides how to share them
            extra[name] = rest.pop(0).reshape(shape) if mine else None
        extra_shapes = header.get("extra", {})
        outputs = GADGET_BODIES[header["name"]](be, X, params, _ExtraView(extra, extra_shapes), owner)
        names = sorted(outputs)
        opened = [be.sec_open(outputs[k], to=owner) for k in names]
        if mine:
            return {"names": names}, [np.atleast_2d(v) for v in opened]
        return {"names": []}, []

    def _run_eval(self, header: dict, mats):
        be = self.backend
        fracs = header["fracs"]
        xs = [ShareMatrix(self.party, m, fr) for m, fr in zip(mats, fracs)]
        op = header["op"]
        if op == "open":
            to = header.get("recipient", OWNER_BOTH)
            v = be.sec_open(xs[0], to=to)
            return ({"names": ["out"], "_dtype": "<f8"}, [v]) if v is not None else ({"names": []}, [])
        fn = {
            "add": be.sec_add,
            "mul": be.sec_mul,
            "matmul": be.sec_matmul,
            "relu": be.sec_relu,
            "relu_prime": be.sec_relu_prime,
            "sigmoid": be.sec_sigmoid,
        }[op]
        out = fn(*xs)
        return {"names": ["out"], "fracs": [out.frac], "_dtype": "<u8"}, [out.data]


class _ExtraView(dict):
    """Owner-held gadget arguments: values are None at the non-owner, but the
    shape is public so both parties can run the same sharing step."""

    def __init__(self, values: dict, shapes: dict):
        super().__init__(values)
        self.shapes = {k: tuple(v) for k, v in shapes.items()}


# ---------------------------------------------------------------- facade


class AdditiveBackend:
    """Driver-side handle on a running two-engine session."""

    name = "additive"

    def __init__(self, ctrl0: Channel, ctrl1: Channel, cfg: FixedPointConfig = DEFAULT_FXP, engine_seed: int = 0, threads=()):
        self.ctrl = (ctrl0, ctrl1)
        self.cfg = cfg
        self._threads = list(threads)
        self.site_bytes: Counter = Counter()
        self.site_calls: Counter = Counter()
        self.site_stats: dict[str, ChannelStats] = {}
        self.last_stats: list[dict] = [{}, {}]
        self.totals = [ChannelStats(), ChannelStats()]
        self._closed = False
        rng = np.random.default_rng(engine_seed)
        for b, ch in enumerate(self.ctrl):
            hello = {
                "role": "driver",
                "engine_seed": int(rng.integers(0, 2**62)),
                "frac_bits": cfg.frac_bits,
                "int_bits": cfg.int_bits,
            }
            ch.send(MsgType.HELLO, json.dumps(hello).encode())
        for ch in self.ctrl:
            ch.recv(MsgType.HELLO)

    @classmethod
    def spawn_local(
        cls,
        seed: int = 0,
        cfg: FixedPointConfig = DEFAULT_FXP,
        transport: str = "loopback",
        timeout: float = 30.0,
    ) -> "AdditiveBackend":
        """Dealer and both engines as threads joined by loopback or TCP links."""
        make = loopback_pair if transport == "loopback" else tcp_pair
        if transport not in ("loopback", "tcp"):
            raise ValueError(f"unknown transport {transport!r}")
        c0_drv, c0_eng = make("ctrl0", timeout=timeout)
        c1_drv, c1_eng = make("ctrl1", timeout=timeout)
        p0, p1 = make("peer", timeout=timeout)
        d0_eng, d0_dlr = make("dealer0", timeout=timeout)
        d1_eng, d1_dlr = make("dealer1", timeout=timeout)
        dseed = int(np.random.default_rng([seed, 7]).integers(0, 2**62))

        def dealer_main():
            Dealer.handshake(d0_dlr, d1_dlr, dseed).serve()

        threads = [
            threading.Thread(target=dealer_main, name="dealer", daemon=True),
            threading.Thread(target=PartyEngine(0, c0_eng, p0, d0_eng).serve, name="player0", daemon=True),
            threading.Thread(target=PartyEngine(1, c1_eng, p1, d1_eng).serve, name="player1", daemon=True),
        ]
        for t in threads:
            t.start()
        return cls(c0_drv, c1_drv, cfg, engine_seed=seed, threads=threads)

    def holds(self, owner) -> bool:
        return True

    def _call(self, headers, mats_per_party, dtype="<f8"):
        for b in (0, 1):
            h = dict(headers[b])
            h["dtype"] = dtype
            self.ctrl[b].send(MsgType.CALL, pack_call(h, mats_per_party[b], dtype))
        results = []
        for b in (0, 1):
            msg = self.ctrl[b].recv(MsgType.RESULT)
            (n,) = struct.unpack_from(">I", msg.payload)
            header = json.loads(msg.payload[4 : 4 + n])
            mats = unpack_matrices(msg.payload[4 + n :], header.get("dtype", "<f8"))
            results.append((header, mats))
        for b, (header, _) in enumerate(results):
            if not header.get("ok"):
                raise PPMarlError(f"party {b} failed: {header.get('error')}")
        for b, (header, _) in enumerate(results):
            st = header["stats"]
            self.last_stats[b] = st
            for part in ("peer", "dealer"):
                d = st[part]
                tot = self.totals[b]
                tot.bytes_sent += d["bytes_sent"]
                tot.bytes_received += d["bytes_received"]
                tot.frames_sent += d["frames_sent"]
                tot.frames_received += d["frames_received"]
                tot.open_rounds += d["open_rounds"]
                tot.sent_by_type.update(d["sent_by_type"])
                tot.received_by_type.update(d["received_by_type"])
                tot.per_tag.update(d["per_tag"])
        site = headers[0].get("site")
        if site is not None:
            # bytes each party sent; every byte is counted once
            self.site_bytes[site] += sum(
                r[0]["stats"][part]["bytes_sent"] for r in results for part in ("peer", "dealer")
            )
            self.site_calls[site] += 1
            acc = self.site_stats.setdefault(site, ChannelStats())
            for header, _ in results:
                for part in ("peer", "dealer"):
                    d = header["stats"][part]
                    acc.bytes_sent += d["bytes_sent"]
                    acc.bytes_received += d["bytes_received"]
                    acc.frames_sent += d["frames_sent"]
                    acc.frames_received += d["frames_received"]
                    acc.open_rounds += d["open_rounds"]
        return results

    def last_call_bytes(self) -> int:
        return sum(self.last_stats[b][p]["bytes_sent"] for b in (0, 1) for p in ("peer", "dealer"))

    def run_gadget(self, name, x0, x1, params, owner=0, extra=None, site=None):
        extra = extra or {}
        shapes = {k: list(getattr(params, k).shape) for k in _PARAM_NAMES}
        extra_shapes = {k: list(np.shape(v)) for k, v in sorted(extra.items())}
        headers, mats = [], []
        for b, half in ((0, x0), (1, x1)):
            h = {
                "kind": "gadget",
                "name": name,
                "owner": owner,
                "site": site,
                "shapes": shapes,
                "f3": params.f3,
                "extra": extra_shapes,
            }
            m = [np.atleast_2d(np.asarray(half, dtype=np.float64))]
            if owner == OWNER_BOTH or owner == b:
                m += [np.atleast_2d(getattr(params, k)) for k in _PARAM_NAMES]
                m += [np.atleast_2d(np.asarray(extra[k], dtype=np.float64)) for k in sorted(extra)]
            headers.append(h)
            mats.append(m)
        results = self._call(headers, mats)
        header, out = results[0 if owner in (0, OWNER_BOTH) else 1]
        return dict(zip(header["names"], out))

    def evaluate(self, op, *xs, recipient=OWNER_BOTH, rng=None):
        """Share clear matrices, run one contract op in the engines, and
        reconstruct. For ``open`` returns what the recipient learned."""
        rng = rng if rng is not None else np.random.default_rng(0)
        shares = [share_additive(np.atleast_2d(x), self.cfg, rng) for x in xs]
        headers, mats = [], []
        for b in (0, 1):
            headers.append({"kind": "eval", "op": op, "fracs": [s[b].frac for s in shares], "recipient": recipient})
            mats.append([s[b].data for s in shares])
        results = self._call(headers, mats, dtype="<u8")
        if op == "open":
            got = [r[1][0] if r[0]["names"] else None for r in results]
            return got[0] if got[0] is not None else got[1]
        (h0, m0), (h1, m1) = results
        return decode_fixed(m0[0] + m1[0], self.cfg, frac_bits=h0["fracs"][0])

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for ch in self.ctrl:
            ch.send(MsgType.BYE)
        for ch in self.ctrl:
            ch.recv(MsgType.BYE)
        for t in self._threads:
            t.join(timeout=10)
        for ch in self.ctrl:
            ch.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

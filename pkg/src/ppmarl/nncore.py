"""3-layer MLP: forward pass, backprop system, and Adam.

Every function takes a ``backend`` that provides the ``sec_*`` contract from
``additive2pc``. With the default ``CLEAR`` backend the values are float64
arrays; with a ``PartyBackend`` they are ``ShareMatrix`` objects and the very
same code runs the protocol.

Shapes (B = batch, d_in = input width, h = hidden, z = output)::

    W1: h x d_in   b1: 1 x h
    W2: h x h      b2: 1 x h
    W3: z x h      b3: 1 x z
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .additive2pc import CLEAR
from .errors import DimMismatch, NonFinite, ShapeMismatch, TraceMismatch

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
F3_TAGS = {"identity": 0, "sigmoid": 1}


def _shape(v):
    return tuple(v.shape)


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    f3: str = "identity"

    def __post_init__(self):
        if self.f3 not in F3_TAGS:
            raise ValueError(f"unknown output activation {self.f3!r}")
        h, d_in = _shape(self.W1)
        z = _shape(self.W3)[0]
        want = {"b1": (1, h), "W2": (h, h), "b2": (1, h), "W3": (z, h), "b3": (1, z)}
        for name, shp in want.items():
            if _shape(getattr(self, name)) != shp:
                raise ShapeMismatch(f"{name} has shape {_shape(getattr(self, name))}, expected {shp}")

    @property
    def d_in(self) -> int:
        return _shape(self.W1)[1]

    @property
    def hidden(self) -> int:
        return _shape(self.W1)[0]

    @property
    def z(self) -> int:
        return _shape(self.W3)[0]

    def arrays(self) -> list:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "MlpParams":
        return MlpParams(*[np.array(a, dtype=np.float64, copy=True) for a in self.arrays()], f3=self.f3)

    def check_finite(self) -> None:
        for n in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, n))):
                raise NonFinite(f"{n} has non-finite entries")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, hidden: int, z: int, f3: str = "identity") -> "MlpParams":
        """Uniform(+-1/sqrt(fan_in)) weights and biases."""

        def u(fan_in, shape):
            k = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-k, k, size=shape)

        return cls(
            u(d_in, (hidden, d_in)),
            u(d_in, (1, hidden)),
            u(hidden, (hidden, hidden)),
            u(hidden, (1, hidden)),
            u(hidden, (z, hidden)),
            u(hidden, (1, z)),
            f3=f3,
        )

    @classmethod
    def zeros_like(cls, p: "MlpParams") -> "MlpParams":
        return cls(*[np.zeros_like(a) for a in p.arrays()], f3=p.f3)


@dataclass
class ForwardTrace:
    l1_in: object
    l1_out: object
    l1_act: object
    l2_in: object
    l2_out: object
    l2_act: object
    l3_in: object
    l3_out: object
    l3_act: object
    # ReLU derivative masks of layer-1/2 outputs, cached from the forward pass
    mask1: object = None
    mask2: object = None


@dataclass
class GradSet:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    X: np.ndarray | None = None

    def arrays(self) -> list:
        return [getattr(self, n) for n in PARAM_NAMES]

    @classmethod
    def from_dict(cls, d: dict) -> "GradSet":
        return cls(*[np.atleast_2d(d[n]) for n in PARAM_NAMES], X=d.get("X"))


def forward(X, params: MlpParams, backend=CLEAR):
    """f3(f2(f1(X W1^T + b1) W2^T + b2) W3^T + b3), f1 = f2 = ReLU."""
    be = backend
    if _shape(X)[1] != params.d_in:
        raise DimMismatch(f"input width {_shape(X)[1]} but W1 expects {params.d_in}")
    if be is CLEAR and not np.all(np.isfinite(X)):
        raise NonFinite("input has non-finite entries")
    l1_out = be.sec_add_row(be.sec_matmul(X, be.sec_transpose(params.W1)), params.b1)
    l1_act, m1 = be.sec_relu_mask(l1_out)
    l2_out = be.sec_add_row(be.sec_matmul(l1_act, be.sec_transpose(params.W2)), params.b2)
    l2_act, m2 = be.sec_relu_mask(l2_out)
    l3_out = be.sec_add_row(be.sec_matmul(l2_act, be.sec_transpose(params.W3)), params.b3)
    l3_act = be.sec_sigmoid(l3_out) if params.f3 == "sigmoid" else l3_out
    trace = ForwardTrace(X, l1_out, l1_act, l1_act, l2_out, l2_act, l2_act, l3_out, l3_act, m1, m2)
    return l3_act, trace


def get_bias_der(M, backend=CLEAR):
    """Column sums: bias gradients from a layer's delta matrix."""
    return backend.sec_colsum(M)


def _check_trace(trace: ForwardTrace, params: MlpParams) -> None:
    B, d_in = _shape(trace.l1_in)
    want = {
        "l1_out": (B, params.hidden),
        "l2_out": (B, params.hidden),
        "l3_out": (B, params.z),
    }
    if d_in != params.d_in:
        raise TraceMismatch(f"trace input width {d_in} but params expect {params.d_in}")
    for name, shp in want.items():
        if _shape(getattr(trace, name)) != shp:
            raise TraceMismatch(f"trace {name} is {_shape(getattr(trace, name))}, expected {shp}")


def _deltas(trace: ForwardTrace, params: MlpParams, seed, backend):
    """layer3Der, layer2Der, layer1Der for a seed w.r.t. the network output."""
    be = backend
    _check_trace(trace, params)
    B = _shape(trace.l1_in)[0]
    z = params.z
    if seed is None:
        seed = be.sec_const((B, z), 1.0 / (B * z))
    elif _shape(seed) != (B, z):
        raise TraceMismatch(f"seed shape {_shape(seed)} != output shape {(B, z)}")
    if params.f3 == "sigmoid":
        s = trace.l3_act
        d3 = be.sec_mul(seed, be.sec_mul(s, be.sec_rsub(1.0, s)))
    else:
        d3 = seed
    m2 = trace.mask2 if trace.mask2 is not None else be.sec_relu_prime(trace.l2_out)
    m1 = trace.mask1 if trace.mask1 is not None else be.sec_relu_prime(trace.l1_out)
    d2 = be.sec_mul(m2, be.sec_matmul(d3, params.W3))
    d1 = be.sec_mul(m1, be.sec_matmul(d2, params.W2))
    return d3, d2, d1


def backward_wrt_weights(trace: ForwardTrace, params: MlpParams, seed=None, backend=CLEAR) -> GradSet:
    """Gradients of sum(seed * output) w.r.t. all weights and biases.

    The default seed 1/(B z) makes this the gradient of the mean output.
    """
    be = backend
    d3, d2, d1 = _deltas(trace, params, seed, be)
    return GradSet(
        W1=be.sec_matmul(be.sec_transpose(d1), trace.l1_in),
        b1=get_bias_der(d1, be),
        W2=be.sec_matmul(be.sec_transpose(d2), trace.l2_in),
        b2=get_bias_der(d2, be),
        W3=be.sec_matmul(be.sec_transpose(d3), trace.l3_in),
        b3=get_bias_der(d3, be),
    )


def backward_wrt_input(trace: ForwardTrace, params: MlpParams, seed=None, backend=CLEAR):
    be = backend
    _, _, d1 = _deltas(trace, params, seed, be)
    return be.sec_matmul(d1, params.W1)


def mse_loss_grad(output, target) -> np.ndarray:
    """d/d(output) of mean_b sum_z (output - target)^2."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise DimMismatch(f"output {output.shape} vs target {target.shape}")
    return (2.0 / output.shape[0]) * (output - target)


def mse_loss(output, target) -> float:
    output = np.asarray(output, dtype=np.float64)
    return float(np.sum((output - target) ** 2) / output.shape[0])


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float, **kw) -> "AdamState":
        z = [np.zeros_like(a) for a in params.arrays()]
        return cls(lr=lr, m=[a.copy() for a in z], v=[a.copy() for a in z], **kw)


def adam_step(params: MlpParams, grads: GradSet, state: AdamState, ascend: bool = False) -> MlpParams:
    """One bias-corrected Adam update, in place on ``state``; returns new params."""
    ps = params.arrays()
    gs = grads.arrays()
    if len(state.m) != len(ps):
        raise ShapeMismatch("Adam state does not match parameter count")
    for p, g, m in zip(ps, gs, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    sign = 1.0 if ascend else -1.0
    out = []
    for i, (p, g) in enumerate(zip(ps, gs)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        out.append(p + sign * state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return MlpParams(*out, f3=params.f3)


# ---------------------------------------------------------------- checkpoints

# layout: magic(8) | d_in, hidden, z as u32 BE | f3 tag u8 | W1 b1 W2 b2 W3 b3
# row-major float64 little-endian
CKPT_MAGIC = b"PPMLP001"
_CKPT_HDR = struct.Struct(">8sIIIB")


def weights_to_bytes(params: MlpParams) -> bytes:
    head = _CKPT_HDR.pack(CKPT_MAGIC, params.d_in, params.hidden, params.z, F3_TAGS[params.f3])
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())


def weights_from_bytes(buf: bytes) -> MlpParams:
    magic, d_in, h, z, tag = _CKPT_HDR.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise ValueError("not a weight checkpoint")
    f3 = {v: k for k, v in F3_TAGS.items()}[tag]
    shapes = [(h, d_in), (1, h), (h, h), (1, h), (z, h), (1, z)]
    pos = _CKPT_HDR.size
    arrs = []
    for shp in shapes:
        n = shp[0] * shp[1]
        arrs.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shp))
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"checkpoint has {len(buf) - pos} trailing bytes")
    return MlpParams(*arrs, f3=f3)


def save_weights(path, params: MlpParams) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(params))


def load_weights(path) -> MlpParams:
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read())


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in params.arrays()])


def soft_update(target: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    """rho * target + (1 - rho) * online, elementwise."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    for a, b in zip(target.arrays(), online.arrays()):
        if a.shape != b.shape:
            raise ShapeMismatch(f"target {a.shape} vs online {b.shape}")
    return MlpParams(*[rho * a + (1 - rho) * b for a, b in zip(target.arrays(), online.arrays())], f3=target.f3)


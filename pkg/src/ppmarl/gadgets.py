"""Input pre-processing and the forward/backward gadget APIs.

Each gadget takes the two players' zero-padded inputs in the order
``(own, counterparty)``: the first argument's player owns the weights and
is the only one who learns the result. Player 0 always pads on the left.

Gadget bodies (``GADGET_BODIES``) are written once against the backend
contract. ``ClearBackend`` runs them on ``x0 + x1`` directly; the additive
engines run the same bodies on shares.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .additive2pc import CLEAR
from .errors import DimMismatch, NonFinite, SideConflict
from .nncore import (
    PARAM_NAMES,
    GradSet,
    MlpParams,
    backward_wrt_input,
    backward_wrt_weights,
    forward,
    mse_loss_grad,
)

LEFT = "left"
RIGHT = "right"

# call sites tracked by the pre-processing counter
SITE_S = "S"
SITE_V = "V"
SITE_S_NEXT = "S_next"
SITE_V_NEXT = "V_next"
SITE_INFER = "infer"
BATCH_SITES = (SITE_S, SITE_V, SITE_S_NEXT, SITE_V_NEXT)


class PreprocessCounter:
    """Per-player pre-processing invocations, keyed by call site."""

    def __init__(self):
        self.counts: Counter = Counter()

    def bump(self, player: int, site: str | None) -> None:
        self.counts[(player, site)] += 1

    def count(self, player: int, site: str | None = None) -> int:
        if site is None:
            return sum(v for (p, _), v in self.counts.items() if p == player)
        return self.counts[(player, site)]

    def batch_count(self, player: int) -> int:
        return sum(self.counts[(player, s)] for s in BATCH_SITES)

    def snapshot(self) -> dict:
        return {f"{p}:{s}": v for (p, s), v in sorted(self.counts.items(), key=str)}

    def reset(self) -> None:
        self.counts.clear()


@dataclass(frozen=True)
class PaddedInput:
    matrix: np.ndarray
    side: str
    d: int

    @property
    def player(self) -> int:
        return 0 if self.side == LEFT else 1


def preprocess(X_half, side: str, counter: PreprocessCounter | None = None, site: str | None = None) -> PaddedInput:
    """Pad a player's B x d block with a B x d zero block on the other side."""
    X = np.asarray(X_half, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if not np.all(np.isfinite(X)):
        raise NonFinite("pre-processing input has non-finite entries")
    if side not in (LEFT, RIGHT):
        raise ValueError(f"side must be {LEFT!r} or {RIGHT!r}")
    B, d = X.shape
    Z = np.zeros((B, d))
    # + 0.0 folds any -0.0 so padded sums and plain concatenation agree bitwise
    M = np.hstack([X + 0.0, Z] if side == LEFT else [Z, X + 0.0])
    if counter is not None:
        counter.bump(0 if side == LEFT else 1, site)
    return PaddedInput(M, side, d)


def _order(first: PaddedInput, second: PaddedInput, params: MlpParams):
    if first.side == second.side:
        raise SideConflict(f"both inputs are padded on the {first.side}")
    x0, x1 = (first, second) if first.side == LEFT else (second, first)
    if x0.matrix.shape != x1.matrix.shape:
        raise DimMismatch(f"padded inputs differ in shape: {x0.matrix.shape} vs {x1.matrix.shape}")
    if x0.matrix.shape[1] != params.d_in:
        raise DimMismatch(f"padded width {x0.matrix.shape[1]} but network expects {params.d_in}")
    return x0.matrix, x1.matrix, first.player


# ---------------------------------------------------------------- bodies


def _extra_shape(extra, name):
    shapes = getattr(extra, "shapes", None)
    if shapes is not None:
        return shapes.get(name)
    return np.shape(extra[name]) if name in extra else None


def _grads_out(g: GradSet) -> dict:
    return {n: getattr(g, n) for n in PARAM_NAMES}


def body_forward(be, X, params, extra, owner):
    out, _ = forward(X, params, be)
    return {"out": out}


def body_backward_w(be, X, params, extra, owner):
    _, trace = forward(X, params, be)
    seed = None
    shape = _extra_shape(extra, "seed")
    if shape is not None:
        seed = be.sec_input(extra.get("seed"), owner, shape)
    return _grads_out(backward_wrt_weights(trace, params, seed, be))


def body_backward_x(be, X, params, extra, owner):
    _, trace = forward(X, params, be)
    seed = None
    shape = _extra_shape(extra, "seed")
    if shape is not None:
        seed = be.sec_input(extra.get("seed"), owner, shape)
    return {"X": backward_wrt_input(trace, params, seed, be)}


def body_bl_w(be, X, params, extra, owner):
    out, trace = forward(X, params, be)
    out_clear = be.sec_open(out, to=owner)
    # the owner forms the loss gradient from its own output and target
    g_clear = mse_loss_grad(out_clear, extra["target"]) if be.holds(owner) else None
    seed = be.sec_input(g_clear, owner, _extra_shape(extra, "target"))
    res = _grads_out(backward_wrt_weights(trace, params, seed, be))
    return res


GADGET_BODIES = {
    "forward": body_forward,
    "backward_w": body_backward_w,
    "backward_x": body_backward_x,
    "bl_w": body_bl_w,
}


# ---------------------------------------------------------------- public API


def f_secfloat(x_own: PaddedInput, x_other: PaddedInput, params: MlpParams, backend=CLEAR, site="forward"):
    """Forward pass on the joint input; the result goes to ``x_own``'s player."""
    x0, x1, owner = _order(x_own, x_other, params)
    return backend.run_gadget("forward", x0, x1, params, owner, None, site)["out"]


def b_secfloat_w(x_own, x_other, params, backend=CLEAR, seed=None, site="backward_w") -> GradSet:
    """Weight gradients of the network output (mean by default, or seeded)."""
    x0, x1, owner = _order(x_own, x_other, params)
    extra = {} if seed is None else {"seed": np.asarray(seed, dtype=np.float64)}
    return GradSet.from_dict(backend.run_gadget("backward_w", x0, x1, params, owner, extra, site))


def b_secfloat_x(x_own, x_other, params, backend=CLEAR, seed=None, site="backward_x") -> np.ndarray:
    """Gradient of the network output w.r.t. the joint input (B x 2d)."""
    x0, x1, owner = _order(x_own, x_other, params)
    extra = {} if seed is None else {"seed": np.asarray(seed, dtype=np.float64)}
    return np.atleast_2d(backend.run_gadget("backward_x", x0, x1, params, owner, extra, site)["X"])


def bl_secfloat_w(x_own, x_other, params, target, backend=CLEAR, site="bl_w") -> GradSet:
    """Weight gradients of the mean-squared loss against the owner's target."""
    x0, x1, owner = _order(x_own, x_other, params)
    extra = {"target": np.atleast_2d(np.asarray(target, dtype=np.float64))}
    return GradSet.from_dict(backend.run_gadget("bl_w", x0, x1, params, owner, extra, site))

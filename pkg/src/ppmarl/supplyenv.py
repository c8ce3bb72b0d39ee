"""Two-player single-commodity supply chain.

Player 0 buys raw material at unit price P(q0) and sells to player 1 at
price p0; player 1 sells to consumers at price p1. Each player's state is
``[c, mu, x, y_1..y_l]`` (purchase cost, demand forecast, stock, incoming
pipeline) and its action is ``[q, p]`` (order quantity, price).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyHistory, NegativeState, NonFinite, ValidationError


@dataclass(frozen=True)
class GameConfig:
    raw_price: float = 0.5
    demand_intercept: float = 10.0
    demand_slope: float = 2.0
    demand_noise: float = 0.05
    h: tuple = (0.01, 0.01)
    w: tuple = (0.1, 0.1)
    lead_time: int = 2
    p_max: tuple = (10.0, 18.0)
    q_max: tuple = (20.0, 20.0)
    ema_alpha: float = 0.3
    # reset() draws each quantity uniformly from these ranges
    stock_range: tuple = (0.0, 10.0)
    pipeline_range: tuple = (0.0, 5.0)
    mu_range: tuple = (0.0, 10.0)
    c1_range: tuple = (0.5, 5.0)
    # optional P(q0); None means the constant raw_price
    raw_price_fn: Callable[[float], float] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        bad = []
        for name in ("raw_price", "demand_intercept", "demand_slope", "demand_noise", "ema_alpha"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be >= 0")
        for name in ("h", "w", "p_max", "q_max"):
            v = getattr(self, name)
            if len(v) != 2:
                bad.append(f"{name} needs one value per player")
            elif min(v) < 0:
                bad.append(f"{name} must be >= 0")
        if self.lead_time < 1:
            bad.append("lead_time must be >= 1")
        if not 0 < self.ema_alpha <= 1:
            bad.append("ema_alpha must be in (0, 1]")
        for name in ("stock_range", "pipeline_range", "mu_range", "c1_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                bad.append(f"{name} must satisfy 0 <= lo <= hi")
        if bad:
            raise ValidationError(bad)

    @property
    def state_dim(self) -> int:
        return 3 + self.lead_time

    def price_of_raw(self, q0: float) -> float:
        return self.raw_price if self.raw_price_fn is None else float(self.raw_price_fn(q0))

    def with_overrides(self, **kw) -> "GameConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class PlayerState:
    c: float
    mu: float
    x: float
    y: tuple

    def vector(self) -> np.ndarray:
        return np.array([self.c, self.mu, self.x, *self.y], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "PlayerState":
        v = [float(t) for t in v]
        return cls(v[0], v[1], v[2], tuple(v[3:]))


@dataclass(frozen=True)
class PlayerAction:
    q: float
    p: float

    def clipped(self, q_max: float, p_max: float) -> "PlayerAction":
        return PlayerAction(float(np.clip(self.q, 0.0, q_max)), float(np.clip(self.p, 0.0, p_max)))


@dataclass(frozen=True)
class StepOutcome:
    r0: float
    r1: float
    d10: float
    dc1: float
    wastage: float
    Q: float
    raw_price: float
    states: tuple


def consumer_demand(p1: float, eps: float, cfg: GameConfig = GameConfig()) -> float:
    return max(0.0, cfg.demand_intercept - cfg.demand_slope * p1 + cfg.demand_noise * eps)


def realized_demand(D: float, x: float) -> float:
    return min(D, x)


def reward_player0(cfg: GameConfig, q0, p0, d10, x0, q1, raw_price: float | None = None) -> float:
    P = cfg.price_of_raw(q0) if raw_price is None else raw_price
    h0, w0 = cfg.h[0], cfg.w[0]
    return p0 * d10 - P * q0 - h0 * (x0 - d10) - w0 * (q1 - d10)


def reward_player1(cfg: GameConfig, p1, dc1, p0, d10, x1, Qp1) -> float:
    h1, w1 = cfg.h[1], cfg.w[1]
    return p1 * dc1 - p0 * d10 - h1 * (x1 - dc1) - w1 * (Qp1 - dc1)


def forecast_update(history: Sequence[float], alpha: float = 0.3) -> float:
    """Exponential moving average of the ordered-demand history."""
    if len(history) == 0:
        raise EmptyHistory("forecast needs at least one observation")
    mu = float(history[0])
    for d in history[1:]:
        mu = alpha * float(d) + (1 - alpha) * mu
    return mu


def ema_step(mu: float, d: float, alpha: float) -> float:
    return alpha * d + (1 - alpha) * mu


def reset(seed, cfg: GameConfig = GameConfig()) -> tuple[PlayerState, PlayerState]:
    rng = np.random.default_rng(seed)

    def u(rng_pair):
        return float(rng.uniform(*rng_pair)) if rng_pair[1] > rng_pair[0] else float(rng_pair[0])

    l = cfg.lead_time
    s0 = PlayerState(cfg.price_of_raw(0.0), u(cfg.mu_range), u(cfg.stock_range), tuple(u(cfg.pipeline_range) for _ in range(l)))
    s1 = PlayerState(u(cfg.c1_range), u(cfg.mu_range), u(cfg.stock_range), tuple(u(cfg.pipeline_range) for _ in range(l)))
    return s0, s1


def step(states, actions, eps: float, cfg: GameConfig = GameConfig()) -> StepOutcome:
    """Advance one period. ``actions`` must already be clipped to bounds."""
    s0, s1 = states
    a0, a1 = actions
    vals = [s0.x, s1.x, a0.q, a0.p, a1.q, a1.p, eps, *s0.y, *s1.y]
    if not np.all(np.isfinite(vals)):
        raise NonFinite("non-finite state, action or noise")
    q0, p0, q1, p1 = a0.q, a0.p, a1.q, a1.p
    P = cfg.price_of_raw(q0)
    Q = consumer_demand(p1, eps, cfg)
    d10 = realized_demand(q1, s0.x)
    dc1 = realized_demand(Q, s1.x)
    r0 = reward_player0(cfg, q0, p0, d10, s0.x, q1, raw_price=P)
    r1 = reward_player1(cfg, p1, dc1, p0, d10, s1.x, Q)

    # player 0 always receives her full order; player 1 receives what player 0 shipped
    x0n = s0.x - d10 + s0.y[0]
    x1n = s1.x - dc1 + s1.y[0]
    if x0n < 0 or x1n < 0:
        raise NegativeState(f"stock went negative: x0'={x0n}, x1'={x1n}")
    y0n = (*s0.y[1:], q0)
    y1n = (*s1.y[1:], d10)
    n0 = PlayerState(P, ema_step(s0.mu, q1, cfg.ema_alpha), x0n, y0n)
    n1 = PlayerState(p0, ema_step(s1.mu, Q, cfg.ema_alpha), x1n, y1n)
    return StepOutcome(r0, r1, d10, dc1, q0 - dc1, Q, P, (n0, n1))

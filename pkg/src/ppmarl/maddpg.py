"""Two-player MADDPG over the gadget APIs, in three execution modes.

* ``secure2pc``: every network evaluation touching both players' data goes
  through the gadgets on a secure backend; players only exchange index sets.
* ``ede``: players send each other their batch halves in the clear and
  compute on the concatenation.
* ``nds``: no data sharing; the counterparty half is all zeros and no
  channel is ever opened.

The driver holds both players (their networks, buffers and environment
view) and runs the joint loop; what crosses between players is confined to
the data link and the secure backend.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import gadgets
from .additive2pc import CLEAR
from .errors import BufferTooSmall, IndexOutOfRange, ShapeMismatch
from .gadgets import (
    LEFT,
    RIGHT,
    SITE_INFER,
    SITE_S,
    SITE_S_NEXT,
    SITE_V,
    SITE_V_NEXT,
    PreprocessCounter,
    preprocess,
)
from .nncore import AdamState, GradSet, MlpParams, adam_step
from .nncore import soft_update as _soft_update
from .supplyenv import GameConfig, PlayerAction, reset, step
from .transport import Channel, MsgType, loopback_pair, pack_indices, pack_matrices, unpack_indices, unpack_matrices


class Mode(str, enum.Enum):
    SECURE2PC = "secure2pc"
    EDE = "ede"
    NDS = "nds"


SIDES = (LEFT, RIGHT)
ACTION_DIM = 2

# call-site tags for communication accounting
TAG_INFER = "action_inference"
TAG_TARGET = "target_actions"
TAG_CRITIC = "critic_update"
TAG_ACTOR = "actor_update"

_STREAMS = {"init": 1, "reset": 2, "noise": 3, "batch": 4, "demand": 5, "backend": 6}


@dataclass
class TrainConfig:
    hidden: int = 16
    batch: int = 16
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    gamma: float = 0.95
    rho: float = 0.99
    buffer_capacity: int = 100_000
    noise_scale: float = 0.1
    noise_decay: float = 1.0
    noise_min: float = 0.0
    state_scale: float = 10.0
    reward_scale: float = 0.1
    steps_per_epoch: int = 40
    pretrain_epochs: int = 50
    golive_epochs: int = 5
    # optional per-player starting point of the actor output, in normalized units
    actor_out_init: tuple | None = None

    def validate(self) -> list[str]:
        bad = []
        for name in ("hidden", "batch", "buffer_capacity", "steps_per_epoch"):
            if getattr(self, name) < 1:
                bad.append(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "golive_epochs"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be >= 0")
        for name in ("lr_actor", "lr_critic", "state_scale", "reward_scale"):
            if getattr(self, name) <= 0:
                bad.append(f"{name} must be > 0")
        for name in ("noise_scale", "noise_min"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be >= 0")
        if not 0 < self.noise_decay <= 1:
            bad.append("noise_decay must be in (0, 1]")
        if not 0 <= self.gamma <= 1:
            bad.append("gamma must be in [0, 1]")
        if not 0 <= self.rho <= 1:
            bad.append("rho must be in [0, 1]")
        if self.actor_out_init is not None:
            ok = len(self.actor_out_init) == 2 and all(
                len(a) == ACTION_DIM and all(0 < v < 1 for v in a) for a in self.actor_out_init
            )
            if not ok:
                bad.append("actor_out_init needs two pairs of values in (0, 1)")
        if self.buffer_capacity < self.batch:
            bad.append("buffer_capacity must be >= batch")
        return bad


# ---------------------------------------------------------------- replay buffer


class ReplayBuffer:
    """Bounded FIFO of (s, a, r, s') for one player."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros((capacity, 1))
        self.s2 = np.zeros((capacity, state_dim))
        self.insert = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2) -> None:
        k = self.insert
        self.s[k] = s
        self.a[k] = a
        self.r[k] = r
        self.s2[k] = s2
        self.insert = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, k):
        if not 0 <= k < self.size:
            raise IndexOutOfRange(f"index {k} outside filled region [0, {self.size})")
        return self.s[k], self.a[k], self.r[k, 0], self.s2[k]


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    R: np.ndarray
    S2: np.ndarray
    V: np.ndarray


def build_batches(buffer: ReplayBuffer, indices) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(buffer)):
        raise IndexOutOfRange(f"indices must lie in [0, {len(buffer)})")
    S = buffer.s[idx]
    A = buffer.a[idx]
    return Batch(S, A, buffer.r[idx], buffer.s2[idx], np.hstack([S, A]))


def sample_indices(rng: np.random.Generator, buffer_len: int, batch_size: int) -> list[int]:
    if buffer_len < batch_size:
        raise BufferTooSmall(f"buffer holds {buffer_len} transitions, batch needs {batch_size}")
    return rng.integers(0, buffer_len, size=batch_size).tolist()


def exchange_index_set(
    rng: np.random.Generator,
    buffer_len: int,
    batch_size: int,
    sender: Channel | None = None,
    receiver: Channel | None = None,
):
    """Sample with replacement and send the index list in the clear.

    Returns (sender's list, receiver's list); without channels both are the
    sampled list.
    """
    idx = sample_indices(rng, buffer_len, batch_size)
    if sender is None:
        return idx, idx
    sender.send(MsgType.INDEX_SET, pack_indices(idx))
    got = unpack_indices(receiver.recv(MsgType.INDEX_SET).payload)
    return idx, got


def soft_update(target: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    return _soft_update(target, online, rho)


# ---------------------------------------------------------------- agents


@dataclass
class AgentNets:
    actor: MlpParams
    critic: MlpParams
    actor_target: MlpParams
    critic_target: MlpParams
    adam_actor: AdamState
    adam_critic: AdamState

    @classmethod
    def create(cls, rng_actor, rng_critic, state_dim: int, cfg: TrainConfig, player: int = 0) -> "AgentNets":
        actor = MlpParams.init(rng_actor, 2 * state_dim, cfg.hidden, ACTION_DIM, "sigmoid")
        if cfg.actor_out_init is not None:
            a = np.asarray(cfg.actor_out_init[player], dtype=np.float64)
            actor.b3[...] = np.log(a / (1 - a)).reshape(actor.b3.shape)
        critic = MlpParams.init(rng_critic, 2 * (state_dim + ACTION_DIM), cfg.hidden, 1, "identity")
        return cls(
            actor,
            critic,
            actor.copy(),
            critic.copy(),
            AdamState.for_params(actor, cfg.lr_actor),
            AdamState.for_params(critic, cfg.lr_critic),
        )

    def named(self, player: int) -> dict:
        return {
            f"actor{player}": self.actor,
            f"critic{player}": self.critic,
            f"actor{player}_target": self.actor_target,
            f"critic{player}_target": self.critic_target,
        }


def action_columns(player: int, state_dim: int) -> slice:
    start = player * (state_dim + ACTION_DIM) + state_dim
    return slice(start, start + ACTION_DIM)


# ---------------------------------------------------------------- mode plumbing


class Joint:
    """Evaluates one gadget on both players' halves, in the configured mode.

    ``halves`` is always (player 0 block, player 1 block). In NDS mode the
    caller passes zeros for the counterparty block.
    """

    def __init__(self, mode: Mode, backend=CLEAR, counter: PreprocessCounter | None = None):
        self.mode = Mode(mode)
        self.backend = backend
        self.counter = counter if counter is not None else PreprocessCounter()

    def prep(self, halves, site):
        if self.mode == Mode.SECURE2PC:
            return tuple(preprocess(halves[j], SIDES[j], self.counter, site) for j in (0, 1))
        return np.hstack([np.atleast_2d(halves[0]) + 0.0, np.atleast_2d(halves[1]) + 0.0])

    def _secure(self, handle, owner):
        return handle[owner], handle[1 - owner]

    def forward(self, handle, params, owner, tag):
        if self.mode == Mode.SECURE2PC:
            return gadgets.f_secfloat(*self._secure(handle, owner), params, self.backend, site=tag)
        return gadgets.body_forward(CLEAR, handle, params, {}, owner)["out"]

    def bl_w(self, handle, params, target, owner, tag) -> GradSet:
        if self.mode == Mode.SECURE2PC:
            return gadgets.bl_secfloat_w(*self._secure(handle, owner), params, target, self.backend, site=tag)
        extra = {"target": np.atleast_2d(np.asarray(target, dtype=np.float64))}
        return GradSet.from_dict(gadgets.body_bl_w(CLEAR, handle, params, extra, owner))

    def b_x(self, handle, params, owner, tag) -> np.ndarray:
        if self.mode == Mode.SECURE2PC:
            return gadgets.b_secfloat_x(*self._secure(handle, owner), params, self.backend, site=tag)
        return gadgets.body_backward_x(CLEAR, handle, params, {}, owner)["X"]

    def b_w(self, handle, params, seed, owner, tag) -> GradSet:
        if self.mode == Mode.SECURE2PC:
            return gadgets.b_secfloat_w(*self._secure(handle, owner), params, self.backend, seed=seed, site=tag)
        extra = {"seed": np.asarray(seed, dtype=np.float64)}
        return GradSet.from_dict(gadgets.body_backward_w(CLEAR, handle, params, extra, owner))


def select_action(
    player: int,
    s_halves,
    actor: MlpParams,
    noise: np.ndarray,
    joint: Joint,
) -> np.ndarray:
    """Normalized action in [0, 1]^2: clip(actor(joint state) + noise, 0, 1).

    ``s_halves`` is (player 0 state, player 1 state); in NDS mode the
    counterparty entry is ignored and replaced by zeros.
    """
    halves = _isolate(s_halves, player, joint.mode)
    handle = joint.prep(halves, SITE_INFER)
    out = joint.forward(handle, actor, player, TAG_INFER)
    return np.clip(np.asarray(out).reshape(-1) + noise, 0.0, 1.0)


def _isolate(halves, player: int, mode: Mode):
    if Mode(mode) != Mode.NDS:
        return halves
    out = [None, None]
    out[player] = halves[player]
    out[1 - player] = np.zeros_like(np.atleast_2d(halves[1 - player]))
    return tuple(out)


def critic_update(
    i: int,
    nets: list[AgentNets],
    batches: list[Batch],
    gamma: float,
    joint: Joint,
    handles: dict | None = None,
):
    """Bellman target from the target nets, then one Adam step on critic i.

    Returns (new critic params, Q_targ, gradient).
    """
    handles = handles if handles is not None else prepare_handles(i, batches, nets, joint)
    q_next = joint.forward(handles["V_next"], nets[i].critic_target, i, TAG_CRITIC)
    q_targ = batches[i].R + gamma * np.asarray(q_next).reshape(-1, 1)
    grads = joint.bl_w(handles["V"], nets[i].critic, q_targ, i, TAG_CRITIC)
    new = adam_step(nets[i].critic, grads, nets[i].adam_critic, ascend=False)
    return new, q_targ, grads


def policy_gradient(i: int, nets: list[AgentNets], handles: dict, state_dim: int, joint: Joint) -> GradSet:
    """grad_theta of mean Q: the action block of dQ/dV seeds the actor's backward pass."""
    dq_dv = joint.b_x(handles["V"], nets[i].critic, i, TAG_ACTOR)
    dq_da = np.asarray(dq_dv)[:, action_columns(i, state_dim)]
    return joint.b_w(handles["S"], nets[i].actor, dq_da, i, TAG_ACTOR)


def actor_update(i: int, nets: list[AgentNets], handles: dict, state_dim: int, joint: Joint):
    grads = policy_gradient(i, nets, handles, state_dim, joint)
    return adam_step(nets[i].actor, grads, nets[i].adam_actor, ascend=True), grads


def prepare_handles(i: int, batches: list[Batch], nets: list[AgentNets], joint: Joint, link=None) -> dict:
    """Pre-process S, V, S' for both players, estimate next actions, then V'."""
    mode = joint.mode
    S = _isolate((batches[0].S, batches[1].S), i, mode)
    V = _isolate((batches[0].V, batches[1].V), i, mode)
    S2 = _isolate((batches[0].S2, batches[1].S2), i, mode)
    if mode == Mode.EDE and link is not None:
        S, V, S2 = _ede_swap(link, [(S[j], V[j], S2[j]) for j in (0, 1)])
    h = {
        "S": joint.prep(S, SITE_S),
        "V": joint.prep(V, SITE_V),
        "S_next": joint.prep(S2, SITE_S_NEXT),
    }
    a_next = [None, None]
    players = (i,) if mode == Mode.NDS else (0, 1)
    for j in players:
        a_next[j] = np.asarray(joint.forward(h["S_next"], nets[j].actor_target, j, TAG_TARGET))
    if mode == Mode.NDS:
        a_next[1 - i] = np.zeros((batches[i].S.shape[0], ACTION_DIM))
    if mode == Mode.EDE and link is not None:
        a_next = list(_ede_swap(link, [(a_next[0],), (a_next[1],)])[0])
    V2 = [np.hstack([S2[j], a_next[j]]) for j in (0, 1)]
    if mode == Mode.NDS:
        V2[1 - i] = np.zeros_like(V2[1 - i])
    h["V_next"] = joint.prep(V2, SITE_V_NEXT)
    return h


def _ede_swap(link, blocks):
    """Each player sends its blocks to the other; returns per-kind (p0, p1)
    tuples where each player's counterparty block is the one received."""
    end0, end1 = link
    end0.send(MsgType.SHARE_MATRIX, pack_matrices(blocks[0], "<f8"))
    end1.send(MsgType.SHARE_MATRIX, pack_matrices(blocks[1], "<f8"))
    from_p0 = unpack_matrices(end1.recv(MsgType.SHARE_MATRIX).payload, "<f8")
    from_p1 = unpack_matrices(end0.recv(MsgType.SHARE_MATRIX).payload, "<f8")
    return tuple((a, b) for a, b in zip(from_p0, from_p1))


# ---------------------------------------------------------------- experiment driver


@dataclass
class PhaseLog:
    rows: list = field(default_factory=list)


TRAJ_FIELDS = ("iter", "epoch", "step", "r0", "r1", "d10", "dc1", "wastage", "q0", "p0", "q1", "p1")


@dataclass
class ExperimentResult:
    trajectory: list
    pretrain: list
    weights: dict
    counter: PreprocessCounter
    link_stats: list
    mode: Mode


class Trainer:
    def __init__(
        self,
        train: TrainConfig,
        mode: Mode,
        seed: int,
        backend=CLEAR,
        counter: PreprocessCounter | None = None,
        state_dim: int = 5,
    ):
        bad = train.validate()
        if bad:
            from .errors import ValidationError

            raise ValidationError(bad)
        self.cfg = train
        self.mode = Mode(mode)
        self.seed = int(seed)
        self.backend = backend
        self.counter = counter if counter is not None else PreprocessCounter()
        self.state_dim = state_dim
        self.nets = [
            AgentNets.create(self.rng("init", p, 0), self.rng("init", p, 1), state_dim, train, p) for p in (0, 1)
        ]
        self.buffers = [ReplayBuffer(train.buffer_capacity, state_dim) for _ in (0, 1)]
        self.iteration = 0
        self.link = None
        self.updates = 0

    def rng(self, stream: str, *keys) -> np.random.Generator:
        return np.random.default_rng([self.seed, _STREAMS[stream], *[int(k) for k in keys]])

    def open_link(self) -> None:
        if self.mode == Mode.NDS or self.link is not None:
            return
        self.link = loopback_pair("data")
        for end in self.link:
            end.send(MsgType.HELLO)
        for end in self.link:
            end.recv(MsgType.HELLO)

    def close_link(self) -> None:
        if self.link is None:
            return
        for end in self.link:
            end.send(MsgType.BYE)
        for end in self.link:
            end.recv(MsgType.BYE)

    def link_stats(self) -> list:
        if self.link is None:
            return [None, None]
        return [end.stats_snapshot() for end in self.link]

    def joint(self, mode: Mode) -> Joint:
        backend = self.backend if mode == Mode.SECURE2PC else CLEAR
        return Joint(mode, backend, self.counter)

    def noise_std(self) -> float:
        c = self.cfg
        return max(c.noise_min, c.noise_scale * c.noise_decay**self.iteration)

    def to_physical(self, player: int, a_norm, game: GameConfig) -> PlayerAction:
        return PlayerAction(float(a_norm[0]) * game.q_max[player], float(a_norm[1]) * game.p_max[player]).clipped(
            game.q_max[player], game.p_max[player]
        )

    def run_step(self, states, game: GameConfig, mode: Mode, phase: int, epoch: int, t: int):
        c = self.cfg
        joint = self.joint(mode)
        it = self.iteration
        s_norm = [states[j].vector() / c.state_scale for j in (0, 1)]
        halves = tuple(np.atleast_2d(v) for v in s_norm)
        if mode == Mode.EDE and self.link is not None:
            halves = _ede_swap(self.link, [(halves[0],), (halves[1],)])[0]
        sigma = self.noise_std()
        a_norm = []
        for i in (0, 1):
            eps = self.rng("noise", it, i).standard_normal(ACTION_DIM)
            a_norm.append(select_action(i, halves, self.nets[i].actor, sigma * eps, joint))
        actions = [self.to_physical(i, a_norm[i], game) for i in (0, 1)]
        eps_d = float(self.rng("demand", it).standard_normal())
        out = step(states, actions, eps_d, game)
        rewards = (out.r0, out.r1)
        for i in (0, 1):
            s2 = out.states[i].vector() / c.state_scale
            self.buffers[i].add(s_norm[i], a_norm[i], rewards[i] * c.reward_scale, s2)
        if len(self.buffers[0]) >= c.batch:
            for i in (0, 1):
                self.update_phase(i, joint)
            self.updates += 1
        for i in (0, 1):
            n = self.nets[i]
            n.actor_target = soft_update(n.actor_target, n.actor, c.rho)
            n.critic_target = soft_update(n.critic_target, n.critic, c.rho)
        self.iteration += 1
        row = {
            "iter": it,
            "epoch": epoch,
            "step": t,
            "r0": out.r0,
            "r1": out.r1,
            "d10": out.d10,
            "dc1": out.dc1,
            "wastage": out.wastage,
            "q0": actions[0].q,
            "p0": actions[0].p,
            "q1": actions[1].q,
            "p1": actions[1].p,
        }
        return out.states, row

    def update_phase(self, i: int, joint: Joint) -> None:
        c = self.cfg
        rng = self.rng("batch", self.iteration, i)
        n = len(self.buffers[i])
        if joint.mode == Mode.NDS:
            idx, _ = exchange_index_set(rng, n, c.batch)
            other = idx
        else:
            me, them = self.link if i == 0 else self.link[::-1]
            idx, other = exchange_index_set(rng, n, c.batch, me, them)
        batches = [None, None]
        batches[i] = build_batches(self.buffers[i], idx)
        batches[1 - i] = build_batches(self.buffers[1 - i], other)
        handles = prepare_handles(i, batches, self.nets, joint, self.link if joint.mode == Mode.EDE else None)
        new_critic, _, _ = critic_update(i, self.nets, batches, c.gamma, joint, handles)
        new_actor, _ = actor_update(i, self.nets, handles, self.state_dim, joint)
        self.nets[i].critic = new_critic
        self.nets[i].actor = new_actor

    def run_phase(self, game: GameConfig, mode: Mode, epochs: int, phase: int) -> list:
        rows = []
        for epoch in range(epochs):
            seed = int(self.rng("reset", phase, epoch).integers(0, 2**62))
            states = reset(seed, game)
            for t in range(self.cfg.steps_per_epoch):
                states, row = self.run_step(states, game, mode, phase, epoch, t)
                rows.append(row)
        return rows

    def weights(self) -> dict:
        out = {}
        for p in (0, 1):
            out.update(self.nets[p].named(p))
        return out


def pretrain_mode(mode: Mode) -> Mode:
    """Simulated pretraining shares data unless the live mode forbids it."""
    return Mode.NDS if Mode(mode) == Mode.NDS else Mode.EDE


def run_experiment(
    train: TrainConfig,
    mode: Mode,
    seed: int,
    live_game: GameConfig = GameConfig(),
    pretrain_game: GameConfig | None = None,
    backend=CLEAR,
    counter: PreprocessCounter | None = None,
    progress=None,
) -> ExperimentResult:
    """Pretrain on the simulation config, then go live in ``mode``."""
    mode = Mode(mode)
    pretrain_game = pretrain_game if pretrain_game is not None else live_game
    if pretrain_game.lead_time != live_game.lead_time:
        raise ShapeMismatch("pretrain and live games must share the state layout")
    tr = Trainer(train, mode, seed, backend, counter, state_dim=live_game.state_dim)
    tr.open_link()
    try:
        pre = tr.run_phase(pretrain_game, pretrain_mode(mode), train.pretrain_epochs, phase=0)
        if progress:
            progress("pretrain done")
        live = tr.run_phase(live_game, mode, train.golive_epochs, phase=1)
    finally:
        tr.close_link()
    return ExperimentResult(live, pre, tr.weights(), tr.counter, tr.link_stats(), mode)

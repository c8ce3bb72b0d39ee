"""Run one experiment and write its artifacts; read them back for reports.

A run directory holds::

    config.json         effective configuration (sorted, indented JSON)
    trajectory.csv      go-live steps, one row per iteration
    pretrain.csv        pretraining steps, same columns
    weights_<net>.bin   final parameters of all eight networks
    stats.csv           communication and pre-processing tallies
    report.json         per-run summary computed from the files above
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import os

import numpy as np

from ..additive2pc import CLEAR, AdditiveBackend
from ..algebra import FixedPointConfig
from ..maddpg import (
    TAG_ACTOR,
    TAG_CRITIC,
    TAG_INFER,
    TAG_TARGET,
    TRAJ_FIELDS,
    AgentNets,
    Joint,
    Mode,
    ReplayBuffer,
    actor_update,
    build_batches,
    critic_update,
    prepare_handles,
    run_experiment,
    select_action,
)
from ..nncore import load_weights, save_weights
from ..transport import ChannelStats
from .config import ExperimentConfig
from .orchestrate import connect_driver, spawn_processes

log = logging.getLogger(__name__)

NETS = tuple(f"{kind}{p}{suffix}" for p in (0, 1) for kind in ("actor", "critic") for suffix in ("", "_target"))
STATS_FIELDS = ("scope", "name", "calls", "bytes_sent", "bytes_received", "frames_sent", "open_rounds")


def fxp_of(cfg: ExperimentConfig) -> FixedPointConfig:
    return FixedPointConfig(cfg.frac_bits, cfg.int_bits)


@contextlib.contextmanager
def open_backend(cfg: ExperimentConfig, seed: int, log_dir: str | None = None):
    """Secure backend for ``cfg``; closes (and reaps children) on exit."""
    if cfg.backend == "clear":
        yield CLEAR
        return
    fxp = fxp_of(cfg)
    ep = cfg.endpoints
    if "player0" in ep and "player1" in ep:
        be = connect_driver(ep["player0"], ep["player1"], fxp, seed)
    elif cfg.transport == "process":
        be = spawn_processes(seed, fxp, log_dir)
    else:
        be = AdditiveBackend.spawn_local(seed, fxp, transport=cfg.transport)
    ok = False
    try:
        yield be
        ok = True
    finally:
        try:
            be.close()
        except Exception:
            if ok:
                raise
            log.exception("backend shutdown after failure")


# ---------------------------------------------------------------- csv io


def write_rows(path, rows, fields=TRAJ_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("iter", "epoch", "step") else float(v)) for k, v in r.items()})
    return out


def _stat_row(scope, name, calls, st: ChannelStats) -> dict:
    return {
        "scope": scope,
        "name": name,
        "calls": calls,
        "bytes_sent": st.bytes_sent,
        "bytes_received": st.bytes_received,
        "frames_sent": st.frames_sent,
        "open_rounds": st.open_rounds,
    }


def collect_stats(result, backend) -> list[dict]:
    rows = []
    for p, st in enumerate(result.link_stats):
        if st is not None:
            rows.append(_stat_row("link", f"player{p}", 0, st))
    if isinstance(backend, AdditiveBackend):
        for p, st in enumerate(backend.totals):
            rows.append(_stat_row("party", f"player{p}", 0, st))
        for site in sorted(backend.site_stats):
            rows.append(_stat_row("site", site, backend.site_calls[site], backend.site_stats[site]))
    for key, n in result.counter.snapshot().items():
        rows.append(_stat_row("preprocess", key, n, ChannelStats()))
    return rows


def write_stats(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, STATS_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_stats(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k in ("scope", "name") else int(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def read_weights(run_dir) -> dict:
    return {n: load_weights(os.path.join(run_dir, f"weights_{n}.bin")) for n in NETS}


# ---------------------------------------------------------------- runs


def run_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Config as recorded for a single run (``seeds`` collapsed to ``seed``)."""
    return dataclasses.replace(cfg, seeds=[cfg.seed])


def run_one(cfg: ExperimentConfig, out_dir: str, progress=None) -> str:
    """Train one seed in one mode and write the run directory."""
    from .report import write_run_report

    cfg = run_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(cfg.echo())
    mode = Mode(cfg.mode)
    # only secure2pc talks to a backend; other modes never open one
    if mode == Mode.SECURE2PC:
        ctx = open_backend(cfg, cfg.seed, os.path.join(out_dir, "logs"))
    else:
        ctx = contextlib.nullcontext(CLEAR)
    with ctx as be:
        res = run_experiment(cfg.train, mode, cfg.seed, cfg.game, cfg.pretrain_game, be, progress=progress)
        stats = collect_stats(res, be)
    write_rows(os.path.join(out_dir, "trajectory.csv"), res.trajectory)
    write_rows(os.path.join(out_dir, "pretrain.csv"), res.pretrain)
    for name in NETS:
        save_weights(os.path.join(out_dir, f"weights_{name}.bin"), res.weights[name])
    write_stats(os.path.join(out_dir, "stats.csv"), stats)
    write_run_report(out_dir)
    return out_dir


def is_complete(out_dir: str, cfg: ExperimentConfig) -> bool:
    """True if ``out_dir`` already holds a finished run of exactly ``cfg``."""
    need = ["config.json", "trajectory.csv", "stats.csv", "report.json"] + [f"weights_{n}.bin" for n in NETS]
    if not all(os.path.exists(os.path.join(out_dir, f)) for f in need):
        return False
    with open(os.path.join(out_dir, "config.json")) as fh:
        return fh.read() == run_config(cfg).echo()


# ---------------------------------------------------------------- bench


def bench(cfg: ExperimentConfig, seed: int = 0) -> list[dict]:
    """Bytes for one action inference, one critic update and one actor
    update at the configured dims, over the secure backend."""
    tc = cfg.train
    d = cfg.game.state_dim
    rng = np.random.default_rng([seed, 99])
    nets = [AgentNets.create(rng, rng, d, tc, p) for p in (0, 1)]
    B = tc.batch
    batches = []
    for _ in (0, 1):
        buf = ReplayBuffer(B, d)
        for _k in range(B):
            buf.add(rng.uniform(0, 1, d), rng.uniform(0, 1, 2), rng.normal() * 0.1, rng.uniform(0, 1, d))
        batches.append(build_batches(buf, range(B)))
    rows = []
    with open_backend(cfg, seed) as be:
        if not isinstance(be, AdditiveBackend):
            raise ValueError("bench needs the additive backend")
        joint = Joint(Mode.SECURE2PC, be)
        states = (rng.uniform(0, 1, (1, d)), rng.uniform(0, 1, (1, d)))
        select_action(0, states, nets[0].actor, np.zeros(2), joint)
        handles = prepare_handles(0, batches, nets, joint)
        critic_update(0, nets, batches, tc.gamma, joint, handles)
        actor_update(0, nets, handles, d, joint)
        for site in (TAG_INFER, TAG_TARGET, TAG_CRITIC, TAG_ACTOR):
            st = be.site_stats.get(site, ChannelStats())
            rows.append(
                {
                    "site": site,
                    "calls": be.site_calls[site],
                    "batch": 1 if site == TAG_INFER else B,
                    "hidden": tc.hidden,
                    "bytes_sent": st.bytes_sent,
                    "bytes_received": st.bytes_received,
                    "frames_sent": st.frames_sent,
                    "open_rounds": st.open_rounds,
                }
            )
    return rows


BENCH_FIELDS = ("site", "calls", "batch", "hidden", "bytes_sent", "bytes_received", "frames_sent", "open_rounds")


def write_bench(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")

"""Process roles for a secure session: one dealer, two party engines and the
driver that holds both players' training state.

Connection plan (all TCP):

    player0 listens on --peer; player1 connects to it
    both engines connect to the dealer's --listen address
    each engine listens on its own --listen address for the driver
"""

from __future__ import annotations

import logging
import os
import subprocess
import sys
import time

import numpy as np

from ..additive2pc import AdditiveBackend, Dealer, PartyEngine
from ..algebra import FixedPointConfig
from ..errors import PPMarlError
from ..transport import DEFAULT_TIMEOUT, free_port, tcp_accept, tcp_connect, tcp_listen

log = logging.getLogger(__name__)

ROLES = ("player0", "player1", "dealer", "driver")


def dealer_seed(seed: int) -> int:
    return int(np.random.default_rng([seed, 7]).integers(0, 2**62))


def dealer_main(listen: str, seed: int, timeout: float = DEFAULT_TIMEOUT) -> None:
    srv = tcp_listen(listen)
    try:
        a = tcp_accept(srv, "dealer:a", timeout)
        b = tcp_accept(srv, "dealer:b", timeout)
    finally:
        srv.close()
    try:
        dealer = Dealer.handshake(a, b, dealer_seed(seed))
        dealer.serve()
        log.info("dealer served %s", dict(dealer.served))
    finally:
        a.close()
        b.close()


def engine_main(party: int, listen: str, peer: str, dealer: str, timeout: float = DEFAULT_TIMEOUT) -> None:
    ctrl_srv = tcp_listen(listen)
    peer_srv = tcp_listen(peer) if party == 0 else None
    try:
        d = tcp_connect(dealer, f"player{party}:dealer", timeout, retry_for=timeout)
        if party == 0:
            p = tcp_accept(peer_srv, "player0:peer", timeout)
        else:
            p = tcp_connect(peer, "player1:peer", timeout, retry_for=timeout)
        ctrl = tcp_accept(ctrl_srv, f"player{party}:ctrl", timeout)
    finally:
        ctrl_srv.close()
        if peer_srv is not None:
            peer_srv.close()
    try:
        PartyEngine(party, ctrl, p, d).serve()
    finally:
        for ch in (ctrl, p, d):
            ch.close()


def connect_driver(
    ctrl0: str, ctrl1: str, cfg: FixedPointConfig, seed: int, timeout: float = DEFAULT_TIMEOUT
) -> AdditiveBackend:
    c0 = tcp_connect(ctrl0, "driver:ctrl0", timeout, retry_for=timeout)
    c1 = tcp_connect(ctrl1, "driver:ctrl1", timeout, retry_for=timeout)
    return AdditiveBackend(c0, c1, cfg, engine_seed=seed)


class ProcessSession(AdditiveBackend):
    """AdditiveBackend whose dealer and engines are child processes."""

    def __init__(self, procs, *args, **kw):
        self.procs = procs
        super().__init__(*args, **kw)

    def close(self) -> None:
        try:
            super().close()
        finally:
            codes = reap(self.procs)
        bad = {name: rc for name, rc in codes.items() if rc != 0}
        if bad:
            raise PPMarlError(f"child processes exited abnormally: {bad}")


def reap(procs: dict, timeout: float = 15.0) -> dict:
    codes = {}
    deadline = time.monotonic() + timeout
    for name, pr in procs.items():
        try:
            codes[name] = pr.wait(timeout=max(0.1, deadline - time.monotonic()))
        except subprocess.TimeoutExpired:
            pr.kill()
            codes[name] = pr.wait()
    return codes


def spawn_processes(
    seed: int, cfg: FixedPointConfig, log_dir: str | None = None, timeout: float = DEFAULT_TIMEOUT
) -> ProcessSession:
    """Start dealer and engines as ``python -m ppmarl`` children on localhost."""
    host = "127.0.0.1"
    addr = {k: f"{host}:{free_port()}" for k in ("dealer", "peer", "ctrl0", "ctrl1")}
    base = [sys.executable, "-m", "ppmarl", "run", "--seed", str(seed), "--timeout", str(timeout)]
    cmds = {
        "dealer": base + ["--role", "dealer", "--listen", addr["dealer"]],
        "player0": base
        + ["--role", "player0", "--listen", addr["ctrl0"], "--peer", addr["peer"], "--dealer", addr["dealer"]],
        "player1": base
        + ["--role", "player1", "--listen", addr["ctrl1"], "--peer", addr["peer"], "--dealer", addr["dealer"]],
    }
    procs = {}
    logs = []
    try:
        for name, cmd in cmds.items():
            err = None
            if log_dir is not None:
                os.makedirs(log_dir, exist_ok=True)
                err = open(os.path.join(log_dir, f"{name}.log"), "w")
                logs.append(err)
            procs[name] = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=err)
        c0 = tcp_connect(addr["ctrl0"], "driver:ctrl0", timeout, retry_for=timeout)
        c1 = tcp_connect(addr["ctrl1"], "driver:ctrl1", timeout, retry_for=timeout)
        return ProcessSession(procs, c0, c1, cfg, engine_seed=seed)
    except BaseException:
        for pr in procs.values():
            pr.kill()
        reap(procs, timeout=5)
        raise
    finally:
        for fh in logs:
            fh.close()

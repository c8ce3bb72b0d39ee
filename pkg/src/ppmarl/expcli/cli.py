"""Command-line entry point: ``ppmarl {run,compare,serve-dealer,bench}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from ..errors import PPMarlError, ValidationError
from ..transport import DEFAULT_TIMEOUT
from . import orchestrate, report, runner
from .config import BACKENDS, MODES, PRESETS, TRANSPORTS, default_config, parse_config

log = logging.getLogger("ppmarl")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named defaults (desk or paper)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--transport", choices=TRANSPORTS, help="how secure-mode parties are connected")
    p.add_argument("--backend", choices=BACKENDS, help="secure backend for secure2pc")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT, help="socket timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppmarl", description="privacy-preserving two-player MADDPG experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="one mode, one seed; or serve a party role")
    _common(r)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--seed", type=int)
    r.add_argument("--role", choices=orchestrate.ROLES, default="driver")
    r.add_argument("--listen", help="ADDR to listen on (dealer, player0, player1)")
    r.add_argument("--connect", help="driver: player0 and player1 control ADDRs, comma separated")
    r.add_argument("--peer", help="ADDR of the player-to-player link (player0 listens, player1 connects)")
    r.add_argument("--dealer", help="ADDR of the dealer")

    c = sub.add_parser("compare", help="run or load two modes over shared seeds and write report.json")
    _common(c)
    c.add_argument("--modes", required=True, help="two modes, comma separated, e.g. secure2pc,ede")
    c.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
    c.add_argument("--seeds", help="comma separated seeds")
    c.add_argument("--fresh", action="store_true", help="re-run even if a matching run exists")

    d = sub.add_parser("serve-dealer", help="run the correlated-randomness dealer")
    d.add_argument("--listen", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)

    b = sub.add_parser("bench", help="bytes per action inference, critic update and actor update")
    _common(b)
    b.add_argument("--seed", type=int, default=0)
    return ap


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError([f"not a comma separated list of integers: {text!r}"]) from None


def load_config(args):
    over = {}
    for key in ("mode", "seed", "preset", "transport", "backend", "out"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "seeds", None):
        over["seeds"] = _int_list(args.seeds)
    if getattr(args, "connect", None):
        ends = args.connect.split(",")
        if len(ends) != 2:
            raise ValidationError(["--connect needs two addresses: player0,player1"])
        over["endpoints"] = {"player0": ends[0], "player1": ends[1]}
    if args.config:
        return parse_config(args.config, over)
    return default_config(over.pop("preset", "desk"), over)


def _need(args, *names):
    missing = [f"--{n}" for n in names if not getattr(args, n)]
    if missing:
        raise ValidationError([f"role {args.role} needs {' '.join(missing)}"])


def cmd_run(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.role == "dealer":
        _need(args, "listen")
        orchestrate.dealer_main(args.listen, seed, args.timeout)
        return 0
    if args.role in ("player0", "player1"):
        _need(args, "listen", "peer", "dealer")
        orchestrate.engine_main(int(args.role[-1]), args.listen, args.peer, args.dealer, args.timeout)
        return 0
    cfg = load_config(args)
    out = cfg.out
    runner.run_one(cfg, out, progress=lambda msg: log.info("%s", msg))
    rep = report.run_summary(out)
    print(f"{cfg.mode} seed {cfg.seed}: {rep['iterations']} live steps -> {out}")
    for k, v in sorted(rep["averages"].items()):
        print(f"  {k:8s} {v: .4f}")
    return 0


def cmd_compare(args) -> int:
    modes = [m.strip() for m in args.modes.split(",")]
    if len(modes) != 2 or any(m not in MODES for m in modes) or modes[0] == modes[1]:
        raise ValidationError([f"--modes needs two distinct modes from {list(MODES)}, got {args.modes!r}"])
    cfg = load_config(args)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    runs = {m: {} for m in modes}
    for m in modes:
        for s in seeds:
            rc = dataclasses.replace(cfg, mode=m, seed=s)
            d = os.path.join(cfg.out, m, f"seed{s}")
            if args.fresh or not runner.is_complete(d, rc):
                log.info("running %s seed %d", m, s)
                runner.run_one(rc, d)
            runs[m][s] = d
    rep = report.compare_report(runs, modes, seeds, cfg.window)
    path = os.path.join(cfg.out, "report.json")
    with open(path, "w") as fh:
        fh.write(report.render(rep))
    print(f"report -> {path}")
    for net, e in rep["weight_error"]["mean"].items():
        print(f"  weights {net:16s} mae {e['mae']:.3e} rmse {e['rmse']:.3e}")
    for met, e in rep["trajectory_error"]["mean"].items():
        print(f"  ma-traj {met:16s} mae {e['mae']:.3e} rmse {e['rmse']:.3e}")
    if "data_sharing" in rep:
        ds = rep["data_sharing"]
        print(f"  wastage reduction {ds['wastage']['reduction_pct']:.2f}%  revenue gain {ds['revenue']['gain_pct']:.2f}%")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args)
    rows = runner.bench(cfg, args.seed)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "bench.csv")
    runner.write_bench(path, rows)
    for r in rows:
        print(
            f"  {r['site']:18s} calls {r['calls']:3d} sent {r['bytes_sent']:10d}"
            f" received {r['bytes_received']:10d} rounds {r['open_rounds']:5d}"
        )
    print(f"bench -> {path}")
    return 0


def cmd_serve_dealer(args) -> int:
    orchestrate.dealer_main(args.listen, args.seed, args.timeout)
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "bench": cmd_bench, "serve-dealer": cmd_serve_dealer}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except ValidationError as e:
        print(f"ppmarl: invalid configuration: {e}", file=sys.stderr)
        return 2
    except (PPMarlError, OSError) as e:
        print(f"ppmarl: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130

"""Reports built only from run directories on disk.

Nothing here looks at in-memory training state: every number is recomputed
from trajectory.csv, stats.csv and the weight dumps, so re-running a report
over the same directories gives the same bytes.
"""

from __future__ import annotations

import json
import os
from collections import Counter, defaultdict

import numpy as np

from ..nncore import flatten
from .metrics import TRAJ_METRICS, averages, column, mae, moving_average, relative_gain, rmse
from .runner import NETS, dump_json, read_rows, read_stats, read_weights

SHARING_MODES = ("ede", "secure2pc")


def _config(run_dir) -> dict:
    with open(os.path.join(run_dir, "config.json")) as fh:
        return json.load(fh)


def _comm(stats_rows) -> dict:
    out = {}
    for r in stats_rows:
        if r["scope"] == "preprocess":
            continue
        keep = ("calls", "bytes_sent", "bytes_received", "frames_sent", "open_rounds")
        out[f"{r['scope']}:{r['name']}"] = {k: r[k] for k in keep}
    return out


def _preprocess(stats_rows) -> dict:
    return {r["name"]: r["calls"] for r in stats_rows if r["scope"] == "preprocess"}


def run_summary(run_dir) -> dict:
    cfg = _config(run_dir)
    rows = read_rows(os.path.join(run_dir, "trajectory.csv"))
    stats = read_stats(os.path.join(run_dir, "stats.csv"))
    return {
        "mode": cfg["mode"],
        "seed": cfg["seed"],
        "iterations": len(rows),
        "averages": averages(rows, cfg["game"]["raw_price"]),
        "communication": _comm(stats),
        "preprocess": _preprocess(stats),
    }


def write_run_report(run_dir) -> dict:
    rep = run_summary(run_dir)
    dump_json(os.path.join(run_dir, "report.json"), rep)
    return rep


def trajectory_error(ref_dir, cmp_dir, window: int) -> dict:
    """MAE/RMSE between moving-average trajectories of two runs."""
    a = read_rows(os.path.join(ref_dir, "trajectory.csv"))
    b = read_rows(os.path.join(cmp_dir, "trajectory.csv"))
    out = {}
    for m in TRAJ_METRICS:
        ma_a = moving_average(column(a, m), window)
        ma_b = moving_average(column(b, m), window)
        out[m] = {"mae": mae(ma_a, ma_b), "rmse": rmse(ma_a, ma_b)}
    return out


def weight_error(ref_dir, cmp_dir) -> dict:
    wa, wb = read_weights(ref_dir), read_weights(cmp_dir)
    out = {}
    for n in NETS:
        fa, fb = flatten(wa[n]), flatten(wb[n])
        out[n] = {"mae": mae(fa, fb), "rmse": rmse(fa, fb)}
    return out


def _mean_dicts(ds: list[dict]) -> dict:
    keys = ds[0].keys()
    return {k: float(np.mean([d[k] for d in ds])) for k in keys}


def _sum_comm(ds: list[dict]) -> dict:
    acc: dict = defaultdict(lambda: defaultdict(int))
    for d in ds:
        for key, row in d.items():
            for k, v in row.items():
                acc[key][k] += v
    return {k: dict(v) for k, v in sorted(acc.items())}


def data_sharing(share_avg: dict, nds_avg: dict) -> dict:
    """Wastage reduction and revenue gain of a sharing mode over NDS, in
    percent of the NDS value's magnitude."""
    ws, wn = share_avg["wastage"], nds_avg["wastage"]
    rs, rn = share_avg["revenue"], nds_avg["revenue"]
    return {
        "wastage": {"sharing": ws, "nds": wn, "reduction_pct": relative_gain(-ws, -wn)},
        "revenue": {"sharing": rs, "nds": rn, "gain_pct": relative_gain(rs, rn)},
        "less_wastage": bool(ws < wn),
        "more_revenue": bool(rs > rn),
    }


def compare_report(runs: dict, modes, seeds, window: int) -> dict:
    """``runs[mode][seed]`` is a run directory. The second mode is the
    reference for trajectory and weight errors."""
    a, b = modes
    out = {"modes": [a, b], "seeds": list(seeds), "window": window, "reference": b}
    per_mode = {}
    for m in modes:
        sums = [run_summary(runs[m][s]) for s in seeds]
        per_mode[m] = {
            "per_seed": {str(s): x["averages"] for s, x in zip(seeds, sums)},
            "mean": _mean_dicts([x["averages"] for x in sums]),
            "communication": _sum_comm([x["communication"] for x in sums]),
            "preprocess": dict(sorted(sum((Counter(x["preprocess"]) for x in sums), Counter()).items())),
        }
    out["averages"] = {m: {"per_seed": per_mode[m]["per_seed"], "mean": per_mode[m]["mean"]} for m in modes}
    out["communication"] = {m: per_mode[m]["communication"] for m in modes}
    out["preprocess"] = {m: per_mode[m]["preprocess"] for m in modes}
    traj = {str(s): trajectory_error(runs[b][s], runs[a][s], window) for s in seeds}
    out["trajectory_error"] = {"per_seed": traj, "mean": _mean_nested(list(traj.values()))}
    wts = {str(s): weight_error(runs[b][s], runs[a][s]) for s in seeds}
    out["weight_error"] = {"per_seed": wts, "mean": _mean_nested(list(wts.values()))}
    if "nds" in modes and (set(modes) - {"nds"}) & set(SHARING_MODES):
        share = a if b == "nds" else b
        out["data_sharing"] = {"sharing_mode": share, **data_sharing(per_mode[share]["mean"], per_mode["nds"]["mean"])}
    return out


def _mean_nested(ds: list[dict]) -> dict:
    return {k: _mean_dicts([d[k] for d in ds]) for k in ds[0]}


def render(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"

import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppmarl.errors import EmptySeries, LengthMismatch, ParseError, ValidationError
from ppmarl.expcli import cli
from ppmarl.expcli.config import PRESETS, default_config, parse_config, parse_config_text
from ppmarl.expcli.metrics import mae, moving_average, normalized_revenue, rmse
from ppmarl.expcli.report import data_sharing, render
from ppmarl.expcli.runner import NETS, read_rows, read_stats, read_weights
from ppmarl.maddpg import TrainConfig
from ppmarl.nncore import flatten

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "train": {"pretrain_epochs": 1, "golive_epochs": 1, "steps_per_epoch": 16, "batch": 4, "hidden": 6},
    "seeds": [7],
}


def tiny_config(tmp_path, **extra) -> str:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, **extra}, indent=2))
    return str(path)


def digest(run_dir) -> dict:
    out = {}
    for name in sorted(os.listdir(run_dir)):
        p = os.path.join(run_dir, name)
        if os.path.isfile(p):
            out[name] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


# ---------------------------------------------------------------- config


def test_minimal_config_gets_defaults():
    cfg = parse_config_text('{"mode": "nds", "seed": 4}')
    assert cfg.mode == "nds" and cfg.seed == 4
    desk = PRESETS["desk"]["train"]
    assert cfg.train.hidden == desk["hidden"] and cfg.train.batch == desk["batch"]
    assert cfg.train.gamma == TrainConfig().gamma
    assert cfg.game.raw_price == 0.5 and cfg.game.h == (0.01, 0.01)
    assert (cfg.frac_bits, cfg.int_bits) == (24, 20)
    assert cfg.window == 40


def test_negative_h0_rejected():
    with pytest.raises(ValidationError) as e:
        parse_config_text('{"mode": "ede", "game": {"h": [-0.01, 0.01]}}')
    assert any("h" in v for v in e.value.violations)


def test_violations_are_collected():
    with pytest.raises(ValidationError) as e:
        parse_config_text('{"mode": "bogus", "window": 0, "train": {"batch": 0}}')
    assert len(e.value.violations) >= 3


def test_paper_preset_file():
    cfg = parse_config(ROOT / "configs" / "paper.json")
    t = cfg.train
    assert (t.hidden, t.batch, t.lr_actor, t.lr_critic) == (128, 128, 1e-4, 1e-3)
    assert t.pretrain_epochs == 9900 and t.golive_epochs == 20 and t.steps_per_epoch == 40
    assert cfg.window == 200


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_files_match_builtin(name):
    assert parse_config(ROOT / "configs" / f"{name}.json").to_dict() == default_config(name).to_dict()


def test_unknown_key_reports_line():
    text = '{\n  "mode": "ede",\n  "sed": 3\n}'
    with pytest.raises(ParseError, match=r"x\.json:3: unknown key 'sed'"):
        parse_config_text(text, "x.json")
    nested = '{\n  "train": {\n    "hiden": 4\n  }\n}'
    with pytest.raises(ParseError, match=r":3: unknown key train.hiden"):
        parse_config_text(nested)


def test_bad_json_reports_line():
    with pytest.raises(ParseError, match=r"c:2:"):
        parse_config_text('{"mode": "ede",\n oops}', "c")


def test_echo_roundtrip():
    cfg = default_config("desk", {"mode": "secure2pc", "seed": 9, "game": {"h": [0.02, 0.03]}})
    again = parse_config_text(cfg.echo())
    assert again == cfg
    assert again.echo() == cfg.echo()


def test_overrides_win_over_file(tmp_path):
    cfg = parse_config(tiny_config(tmp_path, mode="nds"), {"mode": "ede", "seed": 11})
    assert cfg.mode == "ede" and cfg.seed == 11 and cfg.train.hidden == 6


# ---------------------------------------------------------------- metrics


def test_moving_average_examples():
    assert np.allclose(moving_average([1, 2, 3], 2), [1, 1.5, 2.5])
    assert np.array_equal(moving_average([4.0, 4.0, 4.0, 4.0], 3), [4, 4, 4, 4])
    x = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(moving_average(x, 1), x)
    with pytest.raises(EmptySeries):
        moving_average([], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 80), st.integers(0, 2**31))
def test_moving_average_linear(n, window, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    assert np.allclose(moving_average(a + b, window), moving_average(a, window) + moving_average(b, window), atol=1e-12)


def test_mae_rmse_examples():
    assert mae([1, 2], [1, 2]) == 0 and rmse([1, 2], [1, 2]) == 0
    assert mae([0, 0], [1, 1]) == 1 and rmse([0, 0], [1, 1]) == 1
    assert mae([0, 0], [0, 2]) == 1 and rmse([0, 0], [0, 2]) == pytest.approx(math.sqrt(2))
    with pytest.raises(LengthMismatch):
        mae([1, 2], [1])
    with pytest.raises(LengthMismatch):
        rmse([1], [1, 2, 3])


def test_revenue_and_sharing_against_published_averages():
    # published per-step averages: rewards 2.496 / 0.167, wastage 1.085 with
    # sharing; 6.129 / -2.933, wastage 3.411 without; raw price 0.5
    share = [{"r0": 2.496, "r1": 0.167, "wastage": 1.085}]
    nds = [{"r0": 6.129, "r1": -2.933, "wastage": 3.411}]
    rs, rn = normalized_revenue(share, 0.5), normalized_revenue(nds, 0.5)
    assert rs == pytest.approx(2.1205) and rn == pytest.approx(1.4905)
    ds = data_sharing({"wastage": 1.085, "revenue": rs}, {"wastage": 3.411, "revenue": rn})
    assert round(ds["wastage"]["reduction_pct"], 2) == 68.19
    assert round(ds["revenue"]["gain_pct"], 2) == 42.27
    assert ds["less_wastage"] and ds["more_revenue"]


# ---------------------------------------------------------------- cli


def test_run_twice_identical(tmp_path):
    cfg = tiny_config(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["run", "--mode", "ede", "--seed", "7", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    da, db = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert set(da) >= {"trajectory.csv", "stats.csv", "report.json", "config.json"} | {f"weights_{n}.bin" for n in NETS}
    ca, cb = (json.loads((tmp_path / n / "config.json").read_text()) for n in "ab")
    assert {k for k in ca if ca[k] != cb[k]} == {"out"}
    da.pop("config.json"), db.pop("config.json")
    assert da == db


def test_run_report_from_csv(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["run", "--mode", "ede", "--seed", "2", "--config", tiny_config(tmp_path), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    rows = read_rows(out / "trajectory.csv")
    assert rep["iterations"] == len(rows) == 16
    w = np.mean([r["wastage"] for r in rows])
    tot = np.mean([r["r0"] + r["r1"] for r in rows])
    assert rep["averages"]["wastage"] == pytest.approx(w, rel=1e-12)
    assert rep["averages"]["revenue"] == pytest.approx(tot - 0.5 * w, rel=1e-12)
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["mode"] == "ede" and cfg["seed"] == 2


def test_compare_secure_vs_ede(tmp_path):
    out = tmp_path / "cmp"
    argv = ["compare", "--modes", "secure2pc,ede", "--seed", "7", "--config", tiny_config(tmp_path), "--out", str(out)]
    assert cli.main(argv) == 0
    first = (out / "report.json").read_bytes()
    rep = json.loads(first)
    assert rep["reference"] == "ede"
    we = rep["weight_error"]["per_seed"]["7"]
    assert set(we) == set(NETS)
    # independent recomputation from the dumps
    wa, wb = read_weights(out / "ede" / "seed7"), read_weights(out / "secure2pc" / "seed7")
    for n in NETS:
        d = flatten(wa[n]) - flatten(wb[n])
        assert we[n]["mae"] == pytest.approx(np.mean(np.abs(d)), rel=1e-12, abs=1e-300)
        assert we[n]["mae"] <= 1e-2
    assert set(rep["trajectory_error"]["mean"]) == {"r0", "r1", "d10", "dc1", "wastage"}
    # secure traffic is logged per call site; ede only uses the data link
    sites = {r["name"] for r in read_stats(out / "secure2pc" / "seed7" / "stats.csv") if r["scope"] == "site"}
    assert {"action_inference", "critic_update", "actor_update"} <= sites
    assert "data_sharing" not in rep
    # second invocation reuses the runs and reproduces the report byte for byte
    assert cli.main(argv) == 0
    assert (out / "report.json").read_bytes() == first
    assert render(rep) == first.decode()


def test_compare_ede_vs_nds(tmp_path):
    out = tmp_path / "cmp"
    cfg = tiny_config(tmp_path, seeds=[1, 2])
    assert cli.main(["compare", "--modes", "ede,nds", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    ds = rep["data_sharing"]
    assert ds["sharing_mode"] == "ede"
    mean = rep["averages"]
    assert ds["wastage"]["sharing"] == mean["ede"]["mean"]["wastage"]
    wn, ws = mean["nds"]["mean"]["wastage"], mean["ede"]["mean"]["wastage"]
    assert ds["wastage"]["reduction_pct"] == pytest.approx((wn - ws) / abs(wn) * 100)
    rn, rs = mean["nds"]["mean"]["revenue"], mean["ede"]["mean"]["revenue"]
    assert ds["revenue"]["gain_pct"] == pytest.approx((rs - rn) / abs(rn) * 100)
    # nds never opens a channel
    assert rep["communication"]["nds"] == {}
    assert set(rep["averages"]["nds"]["per_seed"]) == {"1", "2"}


def test_bench_ordering(tmp_path):
    out = tmp_path / "b"
    assert cli.main(["bench", "--config", tiny_config(tmp_path), "--transport", "loopback", "--out", str(out)]) == 0
    lines = (out / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("site,calls")
    rows = {ln.split(",")[0]: int(ln.split(",")[4]) for ln in lines[1:]}
    assert rows["actor_update"] > rows["critic_update"] > rows["action_inference"]


def test_failures_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"mode": "ede",\n "nope": 1}')
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert "bad.json:2" in capsys.readouterr().err
    assert cli.main(["run", "--role", "player0"]) != 0
    assert cli.main(["compare", "--modes", "ede", "--out", str(tmp_path / "o")]) != 0
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) != 0
    with pytest.raises(SystemExit):
        cli.main(["run", "--mode", "fast"])

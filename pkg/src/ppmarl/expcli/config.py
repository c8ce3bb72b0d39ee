"""Experiment configuration: JSON files layered over named presets.

Resolution order is built-in defaults, then the preset, then the file, then
command-line overrides. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass, field, fields

from ..errors import ParseError, ValidationError
from ..maddpg import Mode, TrainConfig
from ..supplyenv import GameConfig

PRESETS = {
    "desk": {
        "train": {
            "hidden": 16,
            "batch": 16,
            "lr_actor": 1e-3,
            "lr_critic": 1e-3,
            "pretrain_epochs": 50,
            "golive_epochs": 5,
            "steps_per_epoch": 40,
            "noise_scale": 0.3,
            "noise_decay": 0.999,
            "noise_min": 0.05,
        },
        # the simulation used for pretraining differs from the live market
        "pretrain_game": {"demand_intercept": 11.0, "demand_noise": 0.1},
        "window": 40,
    },
    "paper": {
        "train": {
            "hidden": 128,
            "batch": 128,
            "lr_actor": 1e-4,
            "lr_critic": 1e-3,
            "pretrain_epochs": 9900,
            "golive_epochs": 20,
            "steps_per_epoch": 40,
            "noise_scale": 0.3,
            "noise_decay": 0.999,
            "noise_min": 0.05,
        },
        "pretrain_game": {"demand_intercept": 11.0, "demand_noise": 0.1},
        "window": 200,
    },
}

MODES = tuple(m.value for m in Mode)
TRANSPORTS = ("process", "tcp", "loopback")
BACKENDS = ("additive", "clear")

_GAME_KEYS = {f.name for f in fields(GameConfig)} - {"raw_price_fn"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_FXP_KEYS = {"frac_bits", "int_bits"}
_ENDPOINT_KEYS = {"dealer", "player0", "player1", "peer"}
_TOP_KEYS = {
    "mode",
    "seed",
    "seeds",
    "preset",
    "game",
    "pretrain_game",
    "train",
    "fxp",
    "transport",
    "backend",
    "endpoints",
    "window",
    "out",
}
_SECTIONS = {
    "game": _GAME_KEYS,
    "pretrain_game": _GAME_KEYS,
    "train": _TRAIN_KEYS,
    "fxp": _FXP_KEYS,
    "endpoints": _ENDPOINT_KEYS,
}


@dataclass
class ExperimentConfig:
    mode: str = "ede"
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    preset: str = "desk"
    game: GameConfig = field(default_factory=GameConfig)
    pretrain_game: GameConfig = field(default_factory=GameConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    frac_bits: int = 24
    int_bits: int = 20
    transport: str = "process"
    backend: str = "additive"
    endpoints: dict = field(default_factory=dict)
    window: int = 40
    out: str = "out"

    def to_dict(self) -> dict:
        game = {k: v for k, v in asdict(self.game).items() if k in _GAME_KEYS}
        pre = {k: v for k, v in asdict(self.pretrain_game).items() if k in _GAME_KEYS}
        return {
            "mode": self.mode,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "preset": self.preset,
            "game": _lists(game),
            "pretrain_game": _lists(pre),
            "train": _lists(asdict(self.train)),
            "fxp": {"frac_bits": self.frac_bits, "int_bits": self.int_bits},
            "transport": self.transport,
            "backend": self.backend,
            "endpoints": dict(self.endpoints),
            "window": self.window,
            "out": self.out,
        }

    def echo(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _lists(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(raw: dict, text: str, source: str) -> None:
    for k, v in raw.items():
        if k not in _TOP_KEYS:
            raise ParseError(f"{source}:{_line_of(text, k)}: unknown key {k!r}")
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ParseError(f"{source}:{_line_of(text, k)}: {k!r} must be an object")
            for sub in v:
                if sub not in _SECTIONS[k]:
                    raise ParseError(f"{source}:{_line_of(text, sub)}: unknown key {k}.{sub}")


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a merged dict (preset already applied) into a config."""
    bad = []
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        bad.append(f"preset must be one of {sorted(PRESETS)}")
        preset = "desk"
    merged = _merge(PRESETS[preset], raw)
    game_raw = _tuplify(merged.get("game", {}))
    game = pre = None
    try:
        game = GameConfig(**game_raw)
    except ValidationError as e:
        bad += [f"game: {v}" for v in e.violations]
    except TypeError as e:
        bad.append(f"game: {e}")
    try:
        # pretrain overrides apply on top of the live game
        pre = GameConfig(**{**game_raw, **_tuplify(merged.get("pretrain_game", {}))})
    except ValidationError as e:
        bad += [f"pretrain_game: {v}" for v in e.violations]
    except TypeError as e:
        bad.append(f"pretrain_game: {e}")
    if game is not None and pre is not None and game.lead_time != pre.lead_time:
        bad.append("pretrain_game.lead_time must equal game.lead_time")
    train_raw = _tuplify(merged.get("train", {}))
    if "actor_out_init" in train_raw and train_raw["actor_out_init"] is not None:
        train_raw["actor_out_init"] = tuple(tuple(a) for a in train_raw["actor_out_init"])
    try:
        train = TrainConfig(**train_raw)
        bad += [f"train: {v}" for v in train.validate()]
    except TypeError as e:
        bad.append(f"train: {e}")
        train = TrainConfig()
    mode = merged.get("mode", "ede")
    if mode not in MODES:
        bad.append(f"mode must be one of {list(MODES)}")
    for name in ("seed",):
        v = merged.get(name, 0)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            bad.append(f"{name} must be a non-negative integer")
    seeds = merged.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        bad.append("seeds must be a non-empty list of non-negative integers")
    fxp = merged.get("fxp", {})
    frac, ibits = fxp.get("frac_bits", 24), fxp.get("int_bits", 20)
    if not (isinstance(frac, int) and isinstance(ibits, int) and frac > 0 and ibits > 0 and frac + ibits < 64):
        bad.append("fxp needs positive frac_bits and int_bits with frac_bits + int_bits < 64")
    transport = merged.get("transport", "process")
    if transport not in TRANSPORTS:
        bad.append(f"transport must be one of {list(TRANSPORTS)}")
    backend = merged.get("backend", "additive")
    if backend not in BACKENDS:
        bad.append(f"backend must be one of {list(BACKENDS)}")
    window = merged.get("window", 40)
    if not isinstance(window, int) or window < 1:
        bad.append("window must be an integer >= 1")
    if bad:
        raise ValidationError(bad)
    return ExperimentConfig(
        mode=mode,
        seed=merged.get("seed", 0),
        seeds=list(seeds),
        preset=preset,
        game=game,
        pretrain_game=pre,
        train=train,
        frac_bits=frac,
        int_bits=ibits,
        transport=transport,
        backend=backend,
        endpoints=dict(merged.get("endpoints", {})),
        window=window,
        out=merged.get("out", "out"),
    )


def parse_config_text(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}:{e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ParseError(f"{source}:1: top level must be an object")
    _check_keys(raw, text, source)
    if overrides:
        raw = _merge(raw, overrides)
    return build_config(raw)


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, str(path), overrides)


def default_config(preset: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    return build_config(_merge({"preset": preset}, overrides or {}))

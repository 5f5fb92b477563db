"""Run configuration: INI-style file, flag overrides, reproducible snapshot."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from typing import Optional

from .data import SPLIT_MODES, SplitSpec
from .model import MODES, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    patch_size: int = 32
    patch_stride: int = 16
    split_mode: str = "by-image"
    train_fraction: float = 0.8
    eval_batch_size: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(seed=self.seed, train_fraction=self.train_fraction, mode=self.split_mode)

    def snapshot(self) -> str:
        """Effective configuration as INI text; parsing it back gives the same RunConfig."""
        cp = configparser.ConfigParser()
        cp["run"] = {
            "seed": str(self.seed),
            "threads": str(self.threads),
            "deterministic": str(self.deterministic).lower(),
            "eval_batch_size": str(self.eval_batch_size),
        }
        cp["patch"] = {"size": str(self.patch_size), "stride": str(self.patch_stride)}
        cp["split"] = {"mode": self.split_mode, "train_fraction": repr(self.train_fraction)}
        t = self.train
        cp["train"] = {
            "lr": repr(t.lr),
            "momentum": repr(t.momentum),
            "weight_decay": repr(t.weight_decay),
            "epochs": str(t.epochs),
            "batch_size": str(t.batch_size),
            "shuffle": str(t.shuffle).lower(),
        }
        m = self.model
        cp["model"] = {
            "channels": str(m.channels),
            "depth": str(m.depth),
            "hidden": str(m.hidden),
            "pool_out": f"{m.pool_out[0]},{m.pool_out[1]}",
            "mode": m.mode,
            "shared_branches": str(m.shared_branches).lower(),
            "bn_momentum": repr(m.bn_momentum),
            "bn_eps": repr(m.bn_eps),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(text: str) -> tuple:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 2:
        raise ValueError(f"expected two integers, got {text!r}")
    return tuple(parts)


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"{text!r} not in {options}")
        return text

    return parse


# (section, key) -> (parser, attribute path)
KEYS = {
    ("run", "seed"): (int, "seed"),
    ("run", "threads"): (int, "threads"),
    ("run", "deterministic"): (_bool, "deterministic"),
    ("run", "eval_batch_size"): (int, "eval_batch_size"),
    ("patch", "size"): (int, "patch_size"),
    ("patch", "stride"): (int, "patch_stride"),
    ("split", "mode"): (_choice(SPLIT_MODES), "split_mode"),
    ("split", "train_fraction"): (float, "train_fraction"),
    ("train", "lr"): (float, "train.lr"),
    ("train", "momentum"): (float, "train.momentum"),
    ("train", "weight_decay"): (float, "train.weight_decay"),
    ("train", "epochs"): (int, "train.epochs"),
    ("train", "batch_size"): (int, "train.batch_size"),
    ("train", "shuffle"): (_bool, "train.shuffle"),
    ("model", "channels"): (int, "model.channels"),
    ("model", "depth"): (int, "model.depth"),
    ("model", "hidden"): (int, "model.hidden"),
    ("model", "pool_out"): (_pair, "model.pool_out"),
    ("model", "mode"): (_choice(MODES), "model.mode"),
    ("model", "shared_branches"): (_bool, "model.shared_branches"),
    ("model", "bn_momentum"): (float, "model.bn_momentum"),
    ("model", "bn_eps"): (float, "model.bn_eps"),
}


def build_config(file_text: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the INI text, then ``{"section.key": "value"}`` overrides."""
    values: dict = {}
    if file_text:
        cp = configparser.ConfigParser()
        try:
            cp.read_string(file_text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        for section in cp.sections():
            for key, text in cp.items(section):
                values[(section, key)] = text
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        values[(section, key)] = str(text)

    flat: dict = {}
    for (section, key), text in values.items():
        if (section, key) not in KEYS:
            raise ConfigError(f"unknown config key [{section}] {key}")
        parse, attr = KEYS[(section, key)]
        try:
            flat[attr] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def pick(prefix: str, cls):
        names = {f.name for f in fields(cls)}
        return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix) and k[len(prefix):] in names}

    try:
        run = RunConfig(
            **{k: v for k, v in flat.items() if "." not in k},
            train=TrainConfig(**pick("train.", TrainConfig)),
            model=ModelConfig(**pick("model.", ModelConfig), patch_size=flat.get("patch_size", 32)),
        )
        run.train.seed = run.seed
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < run.train_fraction <= 1.0:
        raise ConfigError("train_fraction must lie in (0, 1]")
    if run.patch_stride < 1 or run.threads < 1:
        raise ConfigError("patch stride and threads must be positive")
    return run

"""Declarative experiment configuration (TOML) with fail-fast validation."""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ..augment import AugmentMode, default_augmentations
from ..bench import GridWorldConfig
from ..imitation import BCConfig, GAILConfig
from ..repl import RepLAlgorithmSpec, build_named_algorithm

REGIMES = ("pretrain", "joint", "control")
OUTPUT_ROOT_ENV = "REPIL_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass(frozen=True)
class DataConfig:
    """Where demonstrations come from: generated by the scripted expert or read from disk."""

    n_demos: int = 25
    demo_seed: int = 0
    demos_path: str = ""
    # extra non-demonstration data for RepL only (uniformly random rollouts)
    extra_random_rollouts: int = 0
    extra_path: str = ""


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    splits: tuple = ("train", "test")

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError("eval.n_episodes must be >= 1")
        bad = set(self.splits) - {"train", "test"}
        if bad or not self.splits:
            raise ConfigError(f"eval.splits must be a non-empty subset of train/test, got {self.splits}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: GridWorldConfig = field(default_factory=GridWorldConfig)
    task_name: str = "gridworld"
    data: DataConfig = field(default_factory=DataConfig)
    repl: Optional[RepLAlgorithmSpec] = None
    il: str = "bc"
    bc: Optional[BCConfig] = None
    gail: Optional[GAILConfig] = None
    regime: str = "control"
    aux_weight: float = 1.0
    # "sum": one optimiser step on bc + aux_weight * repl; "alternate": a BC step then a RepL step
    joint_mode: str = "sum"
    seed: int = 0
    output_dir: str = ""
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.il not in ("bc", "gail"):
            raise ConfigError("il must be 'bc' or 'gail'")
        if self.il == "bc" and self.bc is None:
            object.__setattr__(self, "bc", BCConfig())
        if self.il == "gail" and self.gail is None:
            object.__setattr__(self, "gail", GAILConfig())
        if self.regime in ("pretrain", "joint") and self.repl is None:
            raise ConfigError(f"regime {self.regime!r} needs a [repl] section")
        if self.regime == "control" and self.repl is not None:
            raise ConfigError("control runs must not configure RepL")
        if self.regime == "joint" and self.il != "bc":
            raise ConfigError("joint training is only defined for BC")
        if self.joint_mode not in ("sum", "alternate"):
            raise ConfigError("joint_mode must be 'sum' or 'alternate'")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be non-negative")

    @property
    def run_dir(self) -> Path:
        base = Path(self.output_dir) if self.output_dir else Path(self.name)
        return base if base.is_absolute() else output_root() / base

    def with_seed(self, seed: int, output_dir: Optional[str] = None) -> "ExperimentConfig":
        return replace(self, seed=seed, output_dir=output_dir if output_dir is not None else self.output_dir)

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        """Fully resolved configuration (every default spelled out)."""
        d = {"name": self.name, "task_name": self.task_name, "regime": self.regime, "il": self.il,
             "seed": self.seed, "aux_weight": self.aux_weight, "joint_mode": self.joint_mode,
             "output_dir": self.output_dir,
             "task": asdict(self.task), "data": asdict(self.data),
             "eval": {"n_episodes": self.eval.n_episodes, "splits": list(self.eval.splits)}}
        if self.repl is not None:
            d["repl"] = self.repl.to_config()
        if self.il == "bc":
            d["bc"] = self.bc.to_config()
        else:
            d["gail"] = self.gail.to_config()
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_toml())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        allowed = {"name", "task_name", "regime", "il", "seed", "aux_weight", "joint_mode",
                   "output_dir", "task", "data", "eval", "repl", "bc", "gail"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "name" not in d:
            raise ConfigError("config needs a name")
        try:
            scalars = ("name", "task_name", "regime", "seed", "aux_weight", "joint_mode", "output_dir")
            kw = {k: d[k] for k in scalars if k in d}
            kw["task"] = _strict(GridWorldConfig, d.get("task", {}), "task")
            kw["data"] = _strict(DataConfig, d.get("data", {}), "data")
            ev = dict(d.get("eval", {}))
            if "splits" in ev:
                ev["splits"] = tuple(ev["splits"])
            kw["eval"] = _strict(EvalConfig, ev, "eval")
            if "repl" in d:
                kw["repl"] = parse_repl(d["repl"])
            if "bc" in d and "gail" in d:
                raise ConfigError("configure either [bc] or [gail], not both")
            kw["il"] = d.get("il", "gail" if "gail" in d else "bc")
            if "bc" in d:
                kw["bc"] = BCConfig.from_config(_parse_augmentation_field(d["bc"], "augmentation"))
            if "gail" in d:
                kw["gail"] = GAILConfig.from_config(_parse_augmentation_field(d["gail"],
                                                                              "disc_augmentation"))
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(tomllib.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_toml(Path(path).read_text())


def _strict(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**d)


def _parse_augmentation_field(d: dict, key: str) -> dict:
    """Accept ``"default"``, ``"none"`` or a list of ``{op, params}`` tables."""
    d = dict(d)
    v = d.get(key)
    if v == "default":
        d[key] = default_augmentations(AugmentMode.BOTH).to_config()
    elif v == "none":
        d[key] = []
    return d


def parse_repl(d: dict) -> RepLAlgorithmSpec:
    """``algorithm = "<registered name>"`` plus optional overrides of any spec field."""
    d = dict(d)
    name = d.pop("algorithm", None)
    if name is None:
        return RepLAlgorithmSpec.from_config(d)
    base = build_named_algorithm(name).to_config()
    if "augmentation" in d:
        aug = d.pop("augmentation")
        if isinstance(aug, str):
            mode = AugmentMode(aug) if aug in {m.value for m in AugmentMode} else None
            if mode is None:
                raise ConfigError(f"unknown augmentation mode {aug!r}")
            base["augmentation"] = {"mode": mode.value,
                                    "ops": [] if mode == AugmentMode.NONE
                                    else default_augmentations().to_config()}
        else:
            base["augmentation"] = aug
    if "projection" in d:
        base["projection"] = {**base["projection"], **d.pop("projection")}
    base.update(d)
    return RepLAlgorithmSpec.from_config(base)

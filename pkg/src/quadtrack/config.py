"""Run configuration: one JSON document with a section per module.

Every section starts from the module defaults; a config file only lists what
it overrides.  Unknown keys are rejected at every level.  Paths may be
overridden from the environment with QUADTRACK_DATASET_DIR,
QUADTRACK_CHECKPOINT_DIR and QUADTRACK_LOG_DIR.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import DEFAULT_DEDUP_THRESHOLD
from .generator import CommandVocab, GenConfig
from .kinematics import Morphology, packaged_defaults
from .ppo import PpoError, PpoHyper
from .retarget import RetargetWeights, SolverOptions
from .simenv import SimEnvConfig
from .trainer import JointTrainConfig, TrainingError

PATH_ENV = {
    "dataset_dir": "QUADTRACK_DATASET_DIR",
    "checkpoint_dir": "QUADTRACK_CHECKPOINT_DIR",
    "log_dir": "QUADTRACK_LOG_DIR",
}


class ConfigError(ValueError):
    pass


@dataclass
class RetargetSection:
    foot_weight: float = 5.0
    other_weight: float = 1.0
    w_reg: float = 0.1
    contact_height: float = 0.02
    scale: float = 1.0  # keypoint CSV units to metres
    q_init: list = field(default_factory=lambda: [0.0] * 12)  # q_prev for the first frame
    solver: dict = field(default_factory=lambda: asdict(SolverOptions()))

    def __post_init__(self):
        if len(self.q_init) != 12:
            raise ValueError("q_init must have 12 entries")

    def weights(self) -> RetargetWeights:
        return RetargetWeights.default(self.foot_weight, self.other_weight, self.w_reg)

    def solver_options(self) -> SolverOptions:
        d = dict(self.solver)
        d["restart_seeds"] = tuple(tuple(s) for s in d["restart_seeds"])
        return SolverOptions(**d)


@dataclass
class DedupSection:
    threshold: float = DEFAULT_DEDUP_THRESHOLD
    window: int = 100


@dataclass
class TrackerSection:
    n_iter: int = 500
    stop_r_track: float | None = None
    stop_window: int = 20


@dataclass
class EvalSection:
    max_steps: int | None = None


@dataclass
class PathsSection:
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    log_dir: str = "runs"


SECTIONS = {
    "retarget": RetargetSection,
    "simenv": SimEnvConfig,
    "ppo": PpoHyper,
    "generator": GenConfig,
    "trainer": JointTrainConfig,
    "tracker": TrackerSection,
    "dedup": DedupSection,
    "eval": EvalSection,
    "paths": PathsSection,
}
TOP_LEVEL = {"master_seed", "num_threads", "morphology", "commands", "command_seed", *SECTIONS}


def _merge(base: dict, over: dict, where: str) -> dict:
    """Overlay ``over`` on ``base``; nested dicts merge, everything else replaces."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"{where}: unknown key {k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _section_defaults(cls) -> dict:
    return _listify(asdict(cls()))


def _listify(x):
    """Tuples become lists at any depth, so defaults look exactly like parsed JSON."""
    if isinstance(x, dict):
        return {k: _listify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    return x


def _type_ok(default, v) -> bool:
    if v is None or default is None:
        return True
    if isinstance(default, bool):
        return isinstance(v, bool)
    if isinstance(default, int):
        return isinstance(v, int) and not isinstance(v, bool)
    if isinstance(default, float):
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    for t in (str, dict, (list, tuple)):
        if isinstance(default, t):
            return isinstance(v, t)
    return True


def _build(cls, d: dict, name: str):
    kw = dict(d)
    proto = cls()
    for f in dataclasses.fields(cls):
        default = getattr(proto, f.name)
        if not _type_ok(default, kw.get(f.name)):
            raise ConfigError(f"{name}.{f.name}: expected {type(default).__name__}, got {type(kw[f.name]).__name__}")
        if isinstance(default, tuple) and isinstance(kw.get(f.name), list):
            kw[f.name] = tuple(kw[f.name])
    try:
        return cls(**kw)
    except (TypeError, ValueError, PpoError, TrainingError) as e:
        raise ConfigError(f"{name}: {e}") from None


@dataclass
class RunConfig:
    master_seed: int
    num_threads: int
    morphology: Morphology
    commands: list
    command_seed: int
    retarget: RetargetSection
    simenv: SimEnvConfig
    ppo: PpoHyper
    generator: GenConfig
    trainer: JointTrainConfig
    tracker: TrackerSection
    dedup: DedupSection
    eval: EvalSection
    paths: PathsSection
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def defaults_dict(cls) -> dict:
        pk = packaged_defaults()
        d = {"master_seed": 0, "num_threads": 1, "morphology": pk["morphology"], "commands": pk["commands"],
             "command_seed": 0}
        for name, sec in SECTIONS.items():
            d[name] = _section_defaults(sec)
        return d

    @classmethod
    def from_dict(cls, over: dict | None = None, env: dict | None = None) -> "RunConfig":
        over = over or {}
        if not isinstance(over, dict):
            raise ConfigError("config root must be a JSON object")
        base = cls.defaults_dict()
        unknown = set(over) - TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        d = copy.deepcopy(base)
        for k, v in over.items():
            if k in SECTIONS or k == "morphology":
                if not isinstance(v, dict):
                    raise ConfigError(f"{k}: section must be an object")
                d[k] = _merge(base[k], v, k)
            else:
                d[k] = copy.deepcopy(v)
        env = os.environ if env is None else env
        for key, var in PATH_ENV.items():
            if env.get(var):
                d["paths"][key] = env[var]
        return cls._from_full(d)

    @classmethod
    def _from_full(cls, d: dict) -> "RunConfig":
        if not isinstance(d["master_seed"], int) or d["master_seed"] < 0:
            raise ConfigError("master_seed must be a non-negative integer")
        if not isinstance(d["num_threads"], int) or d["num_threads"] < 1:
            raise ConfigError("num_threads must be a positive integer")
        cmds = d["commands"]
        if not isinstance(cmds, list) or not all(isinstance(c, dict) and "id" in c and set(c) <= {"id", "text"}
                                                 for c in cmds):
            raise ConfigError("commands must be a list of {id, text} objects")
        try:
            morph = Morphology.from_dict(d["morphology"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"morphology: {e}") from None
        secs = {name: _build(sec, d[name], name) for name, sec in SECTIONS.items()}
        try:
            secs["retarget"].weights()
            secs["retarget"].solver_options()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"retarget: {e}") from None
        return cls(d["master_seed"], d["num_threads"], morph, cmds, d["command_seed"], raw=d, **secs)

    def to_dict(self) -> dict:
        """Fully resolved config; feeding it back to from_dict reproduces this object."""
        return copy.deepcopy(self.raw)

    def vocab(self) -> CommandVocab:
        try:
            return CommandVocab.from_entries(self.commands, self.simenv.command_dim, self.command_seed)
        except ValueError as e:
            raise ConfigError(f"commands: {e}") from None

    def path(self, key: str) -> Path:
        return Path(getattr(self.paths, key))


def load_config(path) -> tuple[RunConfig, dict | None]:
    """Read a config file or a run manifest.  Returns (config, manifest or None)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if isinstance(doc, dict) and doc.get("kind") == "quadtrack-manifest":
        if not isinstance(doc.get("config"), dict):
            raise ConfigError(f"{path}: manifest has no config object")
        return RunConfig.from_dict(doc["config"]), doc
    return RunConfig.from_dict(doc), None

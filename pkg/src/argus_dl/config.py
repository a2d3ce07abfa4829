"""Run configuration: sectioned key=value text that round-trips exactly."""
from __future__ import annotations

import configparser
import dataclasses
import math
import typing
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "synthetic"       # synthetic | idx
    n_classes: int = 10
    height: int = 16
    width: int = 16
    n_per_class: int = 150
    noise_std: float = 0.3
    test_fraction: float = 0.2
    images_path: str = ""
    labels_path: str = ""
    alpha: float = math.inf         # Dirichlet concentration; inf = IID
    arch: str = "conv1"
    channels: int = 8
    hidden: int = 128


@dataclass
class TopologyConfig:
    family: str = "regular"         # regular | er | complete | edges
    n: int = 16
    degree: int = 3
    p_edge: float = 0.3
    edge_list: str = ""


@dataclass
class AttackConfig:
    m: int = 2
    attacker_ids: list = field(default_factory=list)   # empty = seeded placement
    trigger_shape: str = "square"
    trigger_size: int = 3
    trigger_position: str = "bottom_right"
    trigger_value: float = 0.5
    target_label: int = 7
    p_poison: float = 0.3


@dataclass
class DefenseSection:
    kind: str = "argus"   # argus | none | oracle | local_only | multi_krum | p2pcd | badfl
    gamma: float = 0.5
    refine_steps: int = 5
    eta_mask: float = 0.2
    mask_budget: int = 0  # 0 = same as k
    mask_smoothing: int = 1
    k: int = 0            # 0 = 5 % of pixels
    window: int = 0       # 0 = odd integer nearest H / 3
    xi: typing.Optional[float] = None   # None = calibrate at startup
    kappa: int = 1
    k1: int = 2
    k2: int = 1
    k3: int = 3
    strict_target: bool = False
    calib_sigma: float = 2.0
    calib_samples: int = 10_000
    calib_quantile: float = 0.99
    krum_r: typing.Optional[int] = None
    c_neigh: float = 0.1
    c_local: float = 1.0
    agreement_rounds: int = 10
    badfl_alpha: float = 0.08
    badfl_q: float = 0.1
    badfl_gamma: typing.Optional[float] = None


@dataclass
class ScheduleConfig:
    rounds: int = 150
    local_steps: int = 2
    batch_size: int = 16
    lr: float = 0.1
    eval_every: int = 10
    silence_stop: typing.Optional[int] = None
    silence_resume: typing.Optional[int] = None


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseSection = field(default_factory=DefenseSection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        d, tp, a, df, s = self.dataset, self.topology, self.attack, self.defense, self.schedule
        if d.source not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.source must be synthetic or idx, got {d.source!r}")
        if d.source == "idx" and not (d.images_path and d.labels_path):
            raise ConfigError("dataset.images_path and dataset.labels_path are required for idx")
        if not d.alpha > 0:
            raise ConfigError("dataset.alpha must be positive")
        if tp.family not in ("regular", "er", "complete", "edges"):
            raise ConfigError(f"unknown topology.family {tp.family!r}")
        if tp.n < 2:
            raise ConfigError("topology.n must be at least 2")
        if not 0 <= a.m < tp.n:
            raise ConfigError("attack.m must be in [0, n)")
        if a.attacker_ids and len(a.attacker_ids) != a.m:
            raise ConfigError("attack.attacker_ids must list exactly m ids")
        if not 0 < a.p_poison <= 1:
            raise ConfigError("attack.p_poison must be in (0, 1]")
        kinds = ("argus", "none", "oracle", "local_only", "multi_krum", "p2pcd", "badfl")
        if df.kind not in kinds:
            raise ConfigError(f"defense.kind must be one of {', '.join(kinds)}")
        if df.kappa < 1:
            raise ConfigError("defense.kappa must be at least 1")
        if s.rounds < 1 or s.local_steps < 0 or s.batch_size < 1 or s.lr < 0:
            raise ConfigError("schedule needs rounds >= 1, local_steps >= 0, batch_size >= 1, lr >= 0")
        if s.eval_every < 1:
            raise ConfigError("schedule.eval_every must be at least 1")
        if (s.silence_stop is None) != (s.silence_resume is None):
            raise ConfigError("schedule.silence_stop and silence_resume go together")
        if s.silence_stop is not None and not 0 <= s.silence_stop <= s.silence_resume <= s.rounds:
            raise ConfigError("silence window must satisfy 0 <= stop <= resume <= rounds")
        return self


SECTIONS = ("dataset", "topology", "attack", "defense", "schedule")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if value == math.inf else repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(raw: str, tp, where: str):
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
        if raw.strip() == "":
            return None
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is list:
            return [int(v) for v in raw.split(",") if v.strip()]
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def emit(cfg: RunConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for name in SECTIONS:
        sect = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(sect):
            lines.append(f"{f.name} = {_fmt(getattr(sect, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse(text: str, require_all: bool = True) -> RunConfig:
    """Parse config text; unknown keys and (when required) missing sections are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    hints = typing.get_type_hints(RunConfig)
    cfg = RunConfig()
    for name in SECTIONS:
        if name not in cp:
            if require_all:
                raise ConfigError(f"missing [{name}] section")
            continue
        cls = hints[name]
        types = typing.get_type_hints(cls)
        values = {}
        for key, raw in cp[name].items():
            if key not in types:
                raise ConfigError(f"unknown key {name}.{key}")
            values[key] = _convert(raw, types[key], f"{name}.{key}")
        setattr(cfg, name, cls(**values))
    extra = set(cp.sections()) - set(SECTIONS) - {"run"}
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    if "run" in cp:
        for key, raw in cp["run"].items():
            if key != "seed":
                raise ConfigError(f"unknown key run.{key}")
            cfg.seed = _convert(raw, int, "run.seed")
    return cfg.validate()


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Copy with dotted-key overrides such as ``{"dataset.alpha": 0.5, "seed": 2}``."""
    out = dataclasses.replace(cfg, **{n: dataclasses.replace(getattr(cfg, n)) for n in SECTIONS})
    for key, value in overrides.items():
        if key == "seed":
            out.seed = int(value)
            continue
        sect, _, attr = key.partition(".")
        if sect not in SECTIONS or not hasattr(getattr(out, sect), attr):
            raise ConfigError(f"unknown override {key}")
        target = getattr(out, sect)
        tp = typing.get_type_hints(type(target))[attr]
        if isinstance(value, str):
            value = _convert(value, tp, key)
        setattr(target, attr, value)
    return out.validate()

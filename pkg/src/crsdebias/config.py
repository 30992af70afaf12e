"""Experiment configuration: a JSON document mapped onto nested dataclasses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import SyntheticParams
from .policy import PolicyTrainConfig, RewardConfig
from .recommender import PalConfig
from .simulator import SessionConfig

POLICY_KINDS = ("maxent", "single-rl", "dual-rl")
REC_MODES = ("bpr", "pal", "none")
STAGES = ("PAL", "CSM", "DPL")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str | None = None  # catalog directory; None means synthetic
    format: str = "tsv"
    min_interactions: int = 0
    ratios: tuple = (0.7, 0.2, 0.1)
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)


@dataclass
class CsmConfig:
    enabled: bool = True
    lam: float = 1e-4
    epochs: int = 500
    learning_rate: float = 0.1


@dataclass
class PolicyConfig:
    kind: str = "dual-rl"
    # agent used wherever dual-policy learning is switched off
    base: str = "single-rl"
    rec_threshold: int = 10
    train: PolicyTrainConfig = field(default_factory=PolicyTrainConfig)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    recommender: PalConfig = field(default_factory=PalConfig)
    rec_mode: str = "pal"
    csm: CsmConfig = field(default_factory=CsmConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    output_dir: str = "runs"
    name: str = "run"
    seed: int = 0
    parallelism: int = 1

    # ------------------------------------------------------------ (de)serialisation

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["ratios"] = list(self.dataset.ratios)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            ds = dict(d.pop("dataset", {}))
            if "synthetic" in ds:
                ds["synthetic"] = _build(SyntheticParams, ds["synthetic"], "dataset.synthetic")
            if "ratios" in ds:
                ds["ratios"] = tuple(ds["ratios"])
            pol = dict(d.pop("policy", {}))
            if "train" in pol:
                tr = dict(pol["train"])
                if "reward" in tr:
                    tr["reward"] = _build(RewardConfig, tr["reward"], "policy.train.reward")
                pol["train"] = _build(PolicyTrainConfig, tr, "policy.train")
            cfg = cls(
                dataset=_build(DatasetConfig, ds, "dataset"),
                session=_build(SessionConfig, d.pop("session", {}), "session"),
                recommender=_build(PalConfig, d.pop("recommender", {}), "recommender"),
                csm=_build(CsmConfig, d.pop("csm", {}), "csm"),
                policy=_build(PolicyConfig, pol, "policy"),
                **_known(cls, d, ""),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    # ------------------------------------------------------------ checks

    @property
    def stages(self) -> tuple:
        """Enabled debiasing stages, always in execution order."""
        on = {"PAL": self.rec_mode == "pal", "CSM": self.csm.enabled, "DPL": self.policy.kind == "dual-rl"}
        return tuple(s for s in STAGES if on[s])

    def validate(self) -> "ExperimentConfig":
        if self.rec_mode not in REC_MODES:
            raise ConfigError(f"rec_mode must be one of {REC_MODES}, got {self.rec_mode!r}")
        if self.policy.kind not in POLICY_KINDS:
            raise ConfigError(f"policy.kind must be one of {POLICY_KINDS}, got {self.policy.kind!r}")
        if self.policy.base not in ("maxent", "single-rl"):
            raise ConfigError(f"policy.base must be maxent or single-rl, got {self.policy.base!r}")
        if self.csm.enabled and self.rec_mode == "none":
            raise ConfigError("CSM requires trained model")
        if self.policy.kind != "maxent" and self.rec_mode == "none":
            raise ConfigError("policy training requires trained model")
        if self.dataset.path is not None and not Path(self.dataset.path).exists():
            raise ConfigError(f"dataset path {self.dataset.path} does not exist")
        if abs(sum(self.dataset.ratios) - 1.0) > 1e-9 or len(self.dataset.ratios) != 3:
            raise ConfigError("dataset.ratios must be three numbers summing to 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        return self


def _known(cls, d: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    return d


def _build(cls, d, where: str):
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    return cls(**_known(cls, dict(d), where))


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value`` to a config dict; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value
    return data

"""Pipeline configuration: one JSON file with nested sections, validated on load.

Relative paths resolve against the config file's directory. Unknown keys are
rejected so that a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import Hyperparams


@dataclass
class EncoderConfig:
    kind: str = "deterministic-test"
    dim: int = 64
    seed: int = 0
    endpoint: str | None = None
    credential_env: str = "PROTOKG_EMBED_KEY"
    model_name: str | None = None


@dataclass
class ClientConfig:
    # mock: recorded transcripts only; live: chat endpoint, recorded as it goes;
    # rules: offline pattern extractor; disabled: no client at all
    mode: str = "mock"
    transcripts: str = "transcripts"
    endpoint: str | None = None
    model: str | None = None
    credential_env: str = "PROTOKG_API_KEY"
    max_retries: int = 3
    rate_limit: float = 60.0
    workers: int = 1


@dataclass
class TrainConfig:
    delta: float = 0.85
    theta: float = 0.05
    tau: float = 0.1
    lam: float = 0.5
    beta_init: float = 0.0
    lr: float = 3e-3
    epochs: int = 25
    batch_size: int = 32
    seed: int = 0
    retrieval_heads: int = 4
    patient_heads: int = 2
    activation: str = "elu"
    prototype_mode: str = "knowledge"
    genders: list = field(default_factory=lambda: ["female", "male"])
    clinical_fields: list = field(default_factory=list)


@dataclass
class PathsConfig:
    corpus: str = "corpus.jsonl"
    train: str = "train.jsonl"
    valid: str = "valid.jsonl"
    test: str = "test.jsonl"
    triplets: str = "artifacts/triplets.jsonl"
    definitions: str = "artifacts/definitions.jsonl"
    graph: str = "artifacts/graph.json"
    stats: str = "artifacts/keyword_stats.json"
    checkpoint: str = "artifacts/model.npz"
    loss_trace: str = "artifacts/loss_trace.tsv"
    reports: str = "reports"


@dataclass
class ExperimentConfig:
    target_category: str | None = None
    values: list | None = None


@dataclass
class ExplainConfig:
    top_n: int = 5


@dataclass
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    base_dir: str = "."

    def __post_init__(self):
        validate(self)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def hyperparams(self) -> Hyperparams:
        t = self.train
        return Hyperparams(dim=self.encoder.dim, tau=t.tau, lam=t.lam, lr=t.lr, epochs=t.epochs,
                           batch_size=t.batch_size, seed=t.seed, theta=t.theta, beta_init=t.beta_init,
                           retrieval_heads=t.retrieval_heads, patient_heads=t.patient_heads,
                           activation=t.activation, prototype_mode=t.prototype_mode,
                           genders=tuple(t.genders), clinical_fields=tuple(t.clinical_fields))

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


SECTIONS = {"encoder": EncoderConfig, "client": ClientConfig, "train": TrainConfig,
            "paths": PathsConfig, "experiment": ExperimentConfig, "explain": ExplainConfig}
CLIENT_MODES = ("mock", "live", "rules", "disabled")


def validate(cfg: PipelineConfig) -> None:
    t = cfg.train
    if not 0.0 < t.delta <= 1.0:
        raise ConfigError(f"train.delta must lie in (0, 1], got {t.delta}")
    if t.tau <= 0:
        raise ConfigError(f"train.tau must be positive, got {t.tau}")
    if t.lam < 0:
        raise ConfigError(f"train.lam must be non-negative, got {t.lam}")
    if t.theta < 0:
        raise ConfigError(f"train.theta must be non-negative, got {t.theta}")
    if t.lr <= 0 or t.epochs < 1 or t.batch_size < 1:
        raise ConfigError("train.lr, train.epochs and train.batch_size must be positive")
    if t.prototype_mode not in ("knowledge", "random"):
        raise ConfigError(f"train.prototype_mode must be knowledge or random, got {t.prototype_mode!r}")
    if cfg.encoder.dim < 1 or cfg.encoder.dim % t.retrieval_heads or cfg.encoder.dim % t.patient_heads:
        raise ConfigError("encoder.dim must be positive and divisible by both head counts")
    if cfg.client.mode not in CLIENT_MODES:
        raise ConfigError(f"client.mode must be one of {CLIENT_MODES}, got {cfg.client.mode!r}")
    if cfg.explain.top_n < 1:
        raise ConfigError("explain.top_n must be at least 1")


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    return cls(**raw)


def config_from_dict(raw: dict, base_dir: str | os.PathLike = ".") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    try:
        parts = {name: _section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig(**parts, base_dir=os.fspath(base_dir))


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    """Defaults when ``path`` is None (paths relative to the working directory)."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw, path.parent)

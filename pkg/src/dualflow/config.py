"""JSON run configuration with strict validation."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .distill import DYADIC, DistillConfig
from .model import ModelConfig
from .synthdata import COND_DIM, Regime
from .trainer import MUTUAL_EMA, PRETRAIN_EMA, StreamSource, TrainConfig, TrainRegime

RUN_ROOT_ENV = "DUALFLOW_RUN_ROOT"
REQUIRED = ("run_dir", "seed")
# fields that may change between an interrupted run and its resumption
HASH_EXCLUDED = ("run_dir", "init", "teacher", "train.steps", "train.checkpoint_every")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    regime: str = "gaussian"
    tokens_per_chunk: int = 4
    d_a: int = 2
    d_b: int = 3
    duration: float = 1.0


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 3
    heads: int = 4
    ffn_mult: int = 2
    time_freqs: int = 4


@dataclass
class TrainSection:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    fake_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.02
    clip_norm: float = 0.5
    K: int = 4
    R_max: int = 6
    rollout_steps: int = 4
    cond_dropout: float = 0.1
    checkpoint_every: int = 100


@dataclass
class PretrainSection:
    branch_steps: int = 100
    joint_steps: int = 300


@dataclass
class DistillSection:
    lam: float = 1 / 3
    w: float = 5.0
    delta: float = 1 / 32
    intervals: list = field(default_factory=lambda: list(DYADIC))
    n_fake: int = 5


@dataclass
class EmaSection:
    pretrain: float = PRETRAIN_EMA
    mutual: float = MUTUAL_EMA


@dataclass
class SamplerSection:
    few_steps: int = 4
    multi_steps: int = 32
    cfg_scale: float = 1.0


@dataclass
class EvalSection:
    num_chunks: int = 24
    streams: int = 64
    reference_streams: int = 256
    fractions: list = field(default_factory=lambda: [0.2, 0.4, 0.4])
    seed: int = 1


SECTIONS = {
    "data": DataSection, "model": ModelSection, "train": TrainSection, "pretrain": PretrainSection,
    "distill": DistillSection, "ema": EmaSection, "sampler": SamplerSection, "eval": EvalSection,
}


@dataclass
class RunConfig:
    run_dir: str
    seed: int
    regime: str = "mutual"
    init: str | None = None
    teacher: str | None = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    ema: EmaSection = field(default_factory=EmaSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- construction ----------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        for k in REQUIRED:
            if k not in raw:
                raise ConfigError(f"missing required key '{k}'")
        top = {f.name for f in fields(cls)}
        for k in raw:
            if k not in top:
                raise ConfigError(f"unknown key '{k}'")
        kw: dict[str, Any] = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            if f.name in SECTIONS:
                kw[f.name] = _section(SECTIONS[f.name], v, f.name)
            else:
                kw[f.name] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if not isinstance(self.run_dir, str) or not self.run_dir:
            raise ConfigError("'run_dir' must be a non-empty string")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("'seed' must be a non-negative integer")
        try:
            TrainRegime(self.regime)
        except ValueError:
            raise ConfigError(f"'regime' must be one of {[r.value for r in TrainRegime]}") from None
        try:
            Regime.parse(self.data.regime)
            self.model_config().validate()
            self.train_config()
            self.source()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        for name in ("branch_steps", "joint_steps"):
            if getattr(self.pretrain, name) < 0:
                raise ConfigError(f"'pretrain.{name}' must be >= 0")
        if self.train.steps < 0 or self.train.checkpoint_every < 1:
            raise ConfigError("'train.steps' must be >= 0 and 'train.checkpoint_every' >= 1")
        if not 1 <= self.sampler.few_steps <= 8 or self.sampler.multi_steps < 1:
            raise ConfigError("'sampler.few_steps' must be in 1..8 and 'sampler.multi_steps' >= 1")
        for name in ("pretrain", "mutual"):
            if not 0 <= getattr(self.ema, name) < 1:
                raise ConfigError(f"'ema.{name}' must lie in [0, 1)")
        e = self.eval
        if e.num_chunks < 2 or e.streams < 1 or e.reference_streams < 1:
            raise ConfigError("'eval' sizes must be positive (num_chunks >= 2)")
        if abs(sum(e.fractions) - 1) > 1e-9 or any(x <= 0 for x in e.fractions):
            raise ConfigError("'eval.fractions' must be positive and sum to 1")

    # -- views -------------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        m, d = self.model, self.data
        return ModelConfig(d_a=d.d_a, d_b=d.d_b, d_c=COND_DIM, tokens_per_chunk=d.tokens_per_chunk,
                           hidden=m.hidden, layers=m.layers, heads=m.heads, ffn_mult=m.ffn_mult,
                           time_freqs=m.time_freqs)

    def distill_config(self) -> DistillConfig:
        d = self.distill
        return DistillConfig(lam=d.lam, w=d.w, delta=d.delta, intervals=tuple(d.intervals), n_fake=d.n_fake)

    def train_config(self, regime: str | None = None, ema_decay: float | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            regime=TrainRegime(regime or self.regime), batch_size=t.batch_size, lr=t.lr, fake_lr=t.fake_lr,
            beta1=t.beta1, beta2=t.beta2, weight_decay=t.weight_decay, clip_norm=t.clip_norm,
            ema_decay=self.ema.mutual if ema_decay is None else ema_decay, K=t.K, R_max=t.R_max,
            rollout_steps=t.rollout_steps, cond_dropout=t.cond_dropout, distill=self.distill_config(),
            seed=self.seed,
        )

    def source(self) -> StreamSource:
        d = self.data
        return StreamSource(Regime.parse(d.regime), d.tokens_per_chunk, d.d_a, d.d_b, d.duration)

    def run_path(self) -> Path:
        return resolve(self.run_dir)

    def hash(self) -> str:
        d = self.to_dict()
        for key in HASH_EXCLUDED:
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                node = node[p]
            node.pop(parts[-1], None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def resolve(path: str | Path) -> Path:
    """Relative paths live under the run-root environment variable when it is set."""
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be an object")
    allowed = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"unknown key '{name}.{k}'")
    kw = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, bool) or isinstance(v, bool):
            ok = isinstance(default, bool) and isinstance(v, bool)
        elif isinstance(default, int):
            ok = isinstance(v, int)
        elif isinstance(default, float):
            ok = isinstance(v, (int, float))
            v = float(v) if ok else v
        elif isinstance(default, str):
            ok = isinstance(v, str)
        elif isinstance(default, list):
            ok = isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
        else:  # optional float
            ok = v is None or (isinstance(v, (int, float)) and not isinstance(v, bool))
        if not ok:
            raise ConfigError(f"'{name}.{k}' has the wrong type ({type(v).__name__})")
        kw[k] = v
    return cls(**kw)

"""Experiment configuration: JSON in, dataclasses out.

Defaults follow the published setup where it states one (lambda = 0.5,
w_d/w_t/w_r = 0.5/0.3/0.2, 50 rounds, lr 2e-5, batch 32, RoBERTa-base
shape).  Those are far beyond numpy desk scale, so runnable configs start
from the ``toy`` preset, selected explicitly with ``"preset": "toy"``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .nn_core import ModelSpec

METHODS = ("fedbe", "full_ft", "head_only", "fedbe_static", "fedbe_uniform_pos")
SCORE_MODES = ("verbatim", "prose-affinity")
D_NORM_MODES = ("verbatim", "minmax")


@dataclass
class TaskConfig:
    m: int = 4
    p: float = 0.3
    n_general: int = 5000
    n_downstream: int = 5000
    n_proxy: int = 256
    noise_pool: str = "complement"


@dataclass
class ExpansionConfig:
    k: int | None = 3
    delta_p_max: float | None = None
    delta_flops_max: float | None = None
    lam: float = 0.5
    zero_init_policy: str = "output-proj"
    expand_input: str = "branch"
    proxy_steps: int = 20
    proxy_lr: float | None = None
    proxy_batch_size: int = 32


@dataclass
class ScoringConfig:
    w_d: float = 0.5
    w_t: float = 0.3
    w_r: float = 0.2
    score_mode: str = "verbatim"
    d_norm_mode: str = "minmax"


@dataclass
class DeviceProfile:
    modes: list[float]
    bandwidth: float = 1e7
    R: float | None = None

    @property
    def resource_score(self) -> float:
        return self.R if self.R is not None else max(self.modes)


@dataclass
class PretrainConfig:
    target: float = 0.9
    max_steps: int = 3000
    lr: float | None = None
    batch_size: int = 32
    eval_every: int = 50


def _jetson_like(scale: float = 1.0, bandwidth: float = 1e7) -> list[DeviceProfile]:
    # three device families in a 3:4:1 mix; fastest mode of the top family is
    # 100x the slowest mode of the bottom one
    tx2 = DeviceProfile([scale * r for r in (1.33e12, 1.0e12, 0.665e12, 0.3325e12)], bandwidth)
    nx = DeviceProfile([scale * 21e12 / 2 ** (i / 2.333) for i in range(8)], bandwidth)
    agx = DeviceProfile([scale * 33.25e12 / 2 ** (i / 2.333) for i in range(8)], bandwidth)
    return [tx2, tx2, tx2, nx, nx, nx, nx, agx]


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=lambda: ModelSpec(
        L=12, d=768, heads=12, d_ff=3072, V=50265, T_max=256, K=4))
    tasks: TaskConfig = field(default_factory=TaskConfig)
    clients: int = 10
    alpha: float | list[float] = 1.0
    rounds: int = 50
    method: str = "fedbe"
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    tau: float | None = None
    lr: float = 2e-5
    epochs: int = 1
    batch_size: int = 32
    participation: float = 1.0
    devices: list[DeviceProfile] = field(default_factory=_jetson_like)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    target_accuracy: float = 0.9
    compare: list[str] = field(default_factory=lambda: ["full_ft", "head_only", "fedbe"])
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = self.scoring
        if abs(s.w_d + s.w_t + s.w_r - 1.0) > 1e-12:
            raise ConfigurationError(f"w_d + w_t + w_r must equal 1, got {s.w_d + s.w_t + s.w_r}")
        if min(s.w_d, s.w_t, s.w_r) < 0:
            raise ConfigurationError("scoring weights must be non-negative")
        if s.score_mode not in SCORE_MODES:
            raise ConfigurationError(f"unknown score_mode {s.score_mode!r}")
        if s.d_norm_mode not in D_NORM_MODES:
            raise ConfigurationError(f"unknown d_norm_mode {s.d_norm_mode!r}")
        for m in [self.method, *self.compare]:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.clients < 1:
            raise ConfigurationError("need at least one client")
        alphas = self.alpha if isinstance(self.alpha, list) else [self.alpha]
        if isinstance(self.alpha, list) and len(self.alpha) != self.clients:
            raise ConfigurationError("per-client alpha list must have one entry per client")
        if any(a <= 0 for a in alphas):
            raise ConfigurationError("alpha must be positive")
        if not self.devices:
            raise ConfigurationError("at least one device profile is required")
        for dev in self.devices:
            if not dev.modes or any(r <= 0 for r in dev.modes) or dev.bandwidth <= 0:
                raise ConfigurationError("device modes and bandwidth must be positive")
        if not (0 < self.participation <= 1):
            raise ConfigurationError("participation must lie in (0, 1]")
        e = self.expansion
        if not (0 <= e.lam <= 1):
            raise ConfigurationError("lambda must lie in [0, 1]")
        if e.k is None and e.delta_p_max is None and e.delta_flops_max is None:
            raise ConfigurationError("expansion needs either k or a budget")
        if e.k is not None and not (1 <= e.k <= self.model.L):
            raise ConfigurationError(f"expansion k must lie in [1, {self.model.L}]")
        if self.tau is not None and self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("need lr > 0, epochs >= 0, batch_size >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if 2 * self.model.K * self.tasks.m >= self.model.V:
            raise ConfigurationError("vocabulary too small for two disjoint marker tasks")

    def client_alphas(self) -> list[float]:
        return list(self.alpha) if isinstance(self.alpha, list) else [self.alpha] * self.clients

    def device_for(self, client_id: int) -> DeviceProfile:
        return self.devices[client_id % len(self.devices)]

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        preset = raw.pop("preset", None)
        if preset is None:
            base = _defaults_dict()
        elif preset in PRESETS:
            base = PRESETS[preset]().to_dict()
        else:
            raise ConfigurationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        return _build(_merge(base, raw, "config"))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _defaults_dict() -> dict:
    return ExperimentConfig().to_dict()


def _merge(base: Any, override: Any, where: str) -> Any:
    if isinstance(base, dict) and isinstance(override, dict):
        unknown = set(override) - set(base)
        if unknown:
            raise ConfigurationError(f"unknown field(s) in {where}: {sorted(unknown)}")
        return {k: _merge(base[k], override[k], f"{where}.{k}") if k in override else base[k]
                for k in base}
    return override


def _build(d: dict) -> ExperimentConfig:
    try:
        devices = [DeviceProfile(**dev) for dev in d["devices"]]
        return ExperimentConfig(
            model=ModelSpec(**d["model"]),
            tasks=TaskConfig(**d["tasks"]),
            clients=d["clients"],
            alpha=d["alpha"],
            rounds=d["rounds"],
            method=d["method"],
            expansion=ExpansionConfig(**d["expansion"]),
            scoring=ScoringConfig(**d["scoring"]),
            tau=d["tau"],
            lr=d["lr"],
            epochs=d["epochs"],
            batch_size=d["batch_size"],
            participation=d["participation"],
            devices=devices,
            pretrain=PretrainConfig(**d["pretrain"]),
            target_accuracy=d["target_accuracy"],
            compare=list(d["compare"]),
            seed=d["seed"],
        )
    except TypeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc


def toy() -> ExperimentConfig:
    """Desk-scale preset: 4-block d=32 model, lr 0.05, 8 clients, 30 rounds."""
    return ExperimentConfig(
        model=ModelSpec(L=4, d=32, heads=4, d_ff=128, V=64, T_max=16, K=4),
        tasks=TaskConfig(m=4, p=0.3, n_general=2000, n_downstream=2000, n_proxy=256),
        clients=8,
        alpha=0.1,
        rounds=30,
        expansion=ExpansionConfig(k=2, proxy_steps=20),
        lr=0.05,
        devices=[DeviceProfile([1e9], 1e6), DeviceProfile([1e8], 1e6)],
        pretrain=PretrainConfig(target=0.9, max_steps=3000, eval_every=50),
    )


def full() -> ExperimentConfig:
    """The published full-scale setup; far too large for numpy."""
    return ExperimentConfig()


PRESETS = {"toy": toy, "full": full}

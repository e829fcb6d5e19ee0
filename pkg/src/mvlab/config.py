"""Experiment configuration: one JSON document per run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigParseError, ContractViolation

ARTIFACT_VERSION = "mvlab-0.1.0"


@dataclass
class ExperimentConfig:
    model: dict
    seed: int
    x0: list = field(default_factory=lambda: [1.0])
    horizon: float = 1.0
    steps: int = 1000
    particles: int = 1024
    replicas: int = 4096
    epsilon: float | None = None
    epsilon_ladder: list | None = None
    alpha: float | None = None
    p: float = 2.0
    event: dict | None = None
    output_dir: str = "out"
    # subcommand-specific knobs
    mean_mode: str = "analytic"
    reference: str = "euler"
    monitoring: str = "bridge"
    radius: float | None = None
    side: str = "two_sided"
    delta: float | None = None
    target: str | None = None
    shift: str = "optimal"
    bootstrap: int = 400
    check_samples: int = 10000

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigParseError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ContractViolation(f"unknown config keys: {unknown}")
        if "seed" not in raw:
            raise ContractViolation("seed is mandatory")
        if "model" not in raw:
            raise ContractViolation("model is mandatory")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def validate(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ContractViolation("seed must be a nonnegative integer")
        if not isinstance(self.model, dict) or "kind" not in self.model:
            raise ContractViolation("model must be an object with a 'kind'")
        for name in ("steps", "particles", "replicas"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ContractViolation(f"{name} must be an integer >= 1")
        if not self.horizon > 0:
            raise ContractViolation("horizon must be positive")
        if isinstance(self.x0, (int, float)):
            self.x0 = [float(self.x0)]
        if self.alpha is not None and not 0.0 < self.alpha < 0.5:
            raise ContractViolation(
                f"alpha={self.alpha} outside (0, 1/2): lambda(eps) = eps^-alpha must satisfy "
                "lambda -> inf and sqrt(eps) lambda -> 0")
        if self.epsilon is not None and self.epsilon < 0:
            raise ContractViolation("epsilon must be nonnegative")
        if self.epsilon_ladder is not None:
            lad = self.epsilon_ladder
            if not lad or any(e <= 0 for e in lad) or any(b >= a for a, b in zip(lad, lad[1:])):
                raise ContractViolation("epsilon_ladder must be strictly decreasing and positive")
        if self.p < 2:
            raise ContractViolation("p must be >= 2")
        for name, allowed in (("mean_mode", ("analytic", "sample")), ("reference", ("euler", "rk4")),
                              ("monitoring", ("grid", "bridge")), ("side", ("one_sided", "two_sided")),
                              ("shift", ("optimal", "zero"))):
            if getattr(self, name) not in allowed:
                raise ContractViolation(f"{name} must be one of {allowed}")

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ContractViolation(f"this subcommand needs config keys {missing}")

    def provenance(self) -> dict:
        """Everything that determines the numbers; excludes where they are written."""
        resolved = asdict(self)
        resolved.pop("output_dir")
        return {"artifact_version": ARTIFACT_VERSION, "seed": self.seed, "config": resolved}

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .dmin import ALPHAS
from .lipn import BETAS


@dataclass
class RunConfig:
    """Every tunable of a run. Serialized verbatim into run artifacts."""

    q: int = 512
    hidden: int = 256
    degree: int = 12
    tau: float = 0.7
    gamma: float = 0.5
    r: float = 0.6
    k_clu: int = 8
    alphas: tuple = ALPHAS
    betas: tuple = BETAS
    p: float = 0.5
    lam: float = 0.2
    lr_sd: float = 3e-4
    lr_ad: float = 1e-5
    lr_lipn: float = 1e-5
    epochs_sd: int = 50
    patience_sd: int = 10
    epochs_ad: int = 20
    seed: int = 7

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.betas = tuple(float(b) for b in self.betas)
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")
        if self.epochs_sd < 0 or self.epochs_ad < 0:
            raise ValueError("epoch counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        d["betas"] = list(self.betas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)

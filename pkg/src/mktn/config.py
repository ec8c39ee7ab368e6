"""Model and training configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .errors import InvalidConfig

SCHEDULE_MODES = ("half_cosine", "literal")
THETA_MODES = ("fixed_half", "margin_ratio")
ACTIVITY_QUERY_MODES = ("learned", "sentences")
SELECTION_SIMILARITIES = ("cosine", "dot")


@dataclass(frozen=True)
class Ablations:
    """Module switches; ``False`` removes the module's loss contribution."""

    csm: bool = True
    opm: bool = True
    apa: bool = True
    avm: bool = True


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    C: int = 4
    N_a: int = 3
    N_p: int = 3
    attention_heads: int = 4
    video_layers: int = 1
    max_frames: int = 128
    activity_queries: int = 4
    activity_query_mode: str = "learned"

    phi_initial: float = 0.1
    phi_final: float = 0.5
    schedule_mode: str = "half_cosine"
    theta_mode: str = "fixed_half"
    # hinge margin of the contrastive loss; None reuses the threshold phi
    cl_margin: Optional[float] = None
    selection_similarity: str = "cosine"

    tau: float = 0.5
    alpha: float = 1.0
    learnable_rince: bool = False
    mask_same_video: bool = True

    lam: float = 1.0
    gamma: float = 1.0
    mu: float = 1.0
    lam_csm: float = 0.5

    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        for name in ("d", "C", "N_a", "N_p", "attention_heads", "video_layers",
                     "max_frames", "activity_queries"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.d % self.attention_heads:
            raise InvalidConfig("d must be divisible by attention_heads")
        if self.d % 2:
            raise InvalidConfig("d must be even (bidirectional recurrence uses d/2 per direction)")
        if not self.phi_final > self.phi_initial:
            raise InvalidConfig("phi_final must exceed phi_initial")
        for name in ("tau", "alpha"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1]")
        for name in ("lam", "gamma", "mu", "lam_csm"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be nonnegative")
        _check_choice("schedule_mode", self.schedule_mode, SCHEDULE_MODES)
        _check_choice("theta_mode", self.theta_mode, THETA_MODES)
        _check_choice("activity_query_mode", self.activity_query_mode, ACTIVITY_QUERY_MODES)
        _check_choice("selection_similarity", self.selection_similarity, SELECTION_SIMILARITIES)
        if isinstance(self.ablations, dict):
            object.__setattr__(self, "ablations", Ablations(**self.ablations))

    def with_ablation(self, **flags: bool) -> "ModelConfig":
        return replace(self, ablations=replace(self.ablations, **flags))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "ablations" in data and isinstance(data["ablations"], dict):
            data["ablations"] = Ablations(**data["ablations"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _check_choice(name: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise InvalidConfig(f"{name} must be one of {choices}, got {value!r}")

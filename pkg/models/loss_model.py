from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from utils.errors import InvalidParameterError

CHANNELS = ("chm", "pai", "fhd")


@dataclass(frozen=True)
class TeacherLossConfig:
    """Stage-one weights: Smooth L1 per channel plus a CHM gradient term."""
    huber_delta: float = 1.0
    lambda_grad: float = 0.1
    channel_reduction: str = "sum"

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise InvalidParameterError("huber_delta", f"must be > 0, got {self.huber_delta}")
        if not self.lambda_grad >= 0:
            raise InvalidParameterError("lambda_grad", f"must be >= 0, got {self.lambda_grad}")
        if self.channel_reduction not in ("sum", "mean"):
            raise InvalidParameterError("channel_reduction", "must be 'sum' or 'mean'")

    def to_dict(self) -> Dict:
        return {
            "huber_delta": self.huber_delta,
            "lambda_grad": self.lambda_grad,
            "channel_reduction": self.channel_reduction,
        }


@dataclass(frozen=True)
class StudentLossConfig:
    """Stage-two distillation weights."""
    w_sup: float = 1.0
    w_kd: float = 0.5
    w_feat: float = 0.1
    w_vert: float = 0.1
    warmup_epochs: int = 5
    huber_delta: float = 1.0
    channel_reduction: str = "sum"

    def __post_init__(self):
        if not self.w_sup > 0:
            raise InvalidParameterError("w_sup", f"must be > 0, got {self.w_sup}")
        for name in ("w_kd", "w_feat", "w_vert"):
            if not getattr(self, name) >= 0:
                raise InvalidParameterError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.warmup_epochs < 0:
            raise InvalidParameterError("warmup_epochs", f"must be >= 0, got {self.warmup_epochs}")
        if not self.huber_delta > 0:
            raise InvalidParameterError("huber_delta", f"must be > 0, got {self.huber_delta}")
        if self.channel_reduction not in ("sum", "mean"):
            raise InvalidParameterError("channel_reduction", "must be 'sum' or 'mean'")

    def effective_w_kd(self, epoch: int) -> float:
        """KD weight after warm-up gating."""
        return 0.0 if epoch < self.warmup_epochs else self.w_kd

    def to_dict(self) -> Dict:
        return {
            "w_sup": self.w_sup,
            "w_kd": self.w_kd,
            "w_feat": self.w_feat,
            "w_vert": self.w_vert,
            "warmup_epochs": self.warmup_epochs,
            "huber_delta": self.huber_delta,
            "channel_reduction": self.channel_reduction,
        }


@dataclass
class LossResult:
    """Scalar loss with its per-term breakdown and gradients of ``total``."""
    total: float
    terms: Dict[str, float] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def grad(self, name: str) -> Optional[np.ndarray]:
        return self.grads.get(name)


@dataclass
class StudentLossInputs:
    """Arrays consumed by the student objective.

    ``teacher_vert_feat`` lives at the teacher fusion scale, i.e. the student
    features pooled by ``down_factor``.
    """
    student: Dict[str, np.ndarray]
    teacher: Dict[str, np.ndarray]
    targets: Dict[str, np.ndarray]
    mask: np.ndarray
    student_feat: Optional[np.ndarray] = None
    teacher_feat: Optional[np.ndarray] = None
    proj: Optional[np.ndarray] = None
    teacher_vert_feat: Optional[np.ndarray] = None
    down_factor: int = 1

"""Curriculum-scheduled loss weights and the total training objective.

    total = cls + w_vic * vic + w_gram * gram + w_mi_c * mi_c
                + w_mi_d * mi_d + w_sparse * sparse

Weights are keyed by term name, never by coefficient index. The defaults
follow the reported training recipe: the domain-MI weight is 0.5 in the
first epoch and 5.0 afterwards; the sparsity weight stays at 0.005 for the
first two epochs and then ramps linearly to 0.1 at the final epoch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

from hcd.diffcore import NumericError, Tensor

TERMS = ("vic", "gram", "mi_c", "mi_d", "sparse")
COMPONENTS = ("cls",) + TERMS
RAMPS = ("step", "linear")


class UnknownTermError(KeyError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term {term!r} is non-finite ({value!r})")
        self.term = term


@dataclass(frozen=True)
class TermSchedule:
    """``initial`` before ``activation_epoch``; afterwards ``target`` (step)
    or a linear climb that reaches ``target`` at the final epoch."""

    initial: float
    target: float
    activation_epoch: int = 0
    ramp: str = "step"

    def __post_init__(self):
        if self.ramp not in RAMPS:
            raise ValueError(f"ramp must be one of {RAMPS}, got {self.ramp!r}")
        if self.initial < 0 or self.target < self.initial:
            raise ValueError("schedule must be nonnegative and nondecreasing")
        if self.activation_epoch < 0:
            raise ValueError("activation_epoch must be >= 0")

    def at(self, t: int, epochs_total: int) -> float:
        if t < self.activation_epoch:
            return self.initial
        if self.ramp == "step":
            return self.target
        span = epochs_total - self.activation_epoch
        if span <= 0:
            return self.target
        frac = (t - self.activation_epoch + 1) / span
        return self.initial + (self.target - self.initial) * min(frac, 1.0)


def constant(value: float) -> TermSchedule:
    return TermSchedule(value, value, 0, "step")


def _default_terms() -> dict:
    return {
        "vic": constant(1.0),
        "gram": constant(1.0),
        "mi_c": constant(1.0),
        "mi_d": TermSchedule(0.5, 5.0, 1, "step"),
        "sparse": TermSchedule(0.005, 0.1, 2, "linear"),
    }


@dataclass(frozen=True)
class CurriculumSchedule:
    epochs_total: int = 20
    terms: Mapping[str, TermSchedule] = field(default_factory=_default_terms)

    def __post_init__(self):
        if self.epochs_total < 1:
            raise ValueError("epochs_total must be >= 1")
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise UnknownTermError(f"unknown schedule terms: {sorted(unknown)}")

    def weight_at(self, term: str, t: int) -> float:
        return weight_at(self, term, t)

    def weights_at(self, t: int) -> dict:
        return {term: weight_at(self, term, t) for term in TERMS}

    def zeroed(self) -> "CurriculumSchedule":
        """Same horizon, every auxiliary weight 0 (plain classifier)."""
        return CurriculumSchedule(self.epochs_total, {t: constant(0.0) for t in TERMS})

    def to_dict(self) -> dict:
        return {"epochs_total": self.epochs_total,
                "terms": {name: asdict(s) for name, s in sorted(self.terms.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CurriculumSchedule":
        terms = {name: TermSchedule(**spec) for name, spec in d["terms"].items()}
        return cls(int(d["epochs_total"]), terms)


def weight_at(schedule: CurriculumSchedule, term: str, t: int) -> float:
    """Weight of ``term`` at epoch ``t`` (0-based). Unscheduled terms get 0."""
    if term not in TERMS:
        raise UnknownTermError(f"unknown loss term {term!r}")
    if not 0 <= t < schedule.epochs_total:
        raise ValueError(f"epoch {t} outside [0, {schedule.epochs_total})")
    spec = schedule.terms.get(term)
    return 0.0 if spec is None else spec.at(t, schedule.epochs_total)


@dataclass
class LossBundle:
    components: dict
    weights: dict
    total: Tensor

    def values(self) -> dict:
        out = {name: (None if t is None else float(t.data)) for name, t in self.components.items()}
        out["total"] = float(self.total.data)
        return out

    def recompute(self) -> float:
        """Scalar recombination of the stored values, for validation."""
        acc = float(self.components["cls"].data)
        for term in TERMS:
            comp = self.components.get(term)
            if comp is not None and self.weights.get(term, 0.0) != 0.0:
                acc += self.weights[term] * float(comp.data)
        return acc


def total_loss(components: Mapping[str, Optional[Tensor]], weights: Mapping[str, float]) -> LossBundle:
    """Weighted sum on the tape. Terms that are ``None`` or weighted 0 are
    left out of the graph, so ``cls`` alone reproduces plain training."""
    if components.get("cls") is None:
        raise ValueError("the classification term is required")
    unknown = (set(components) - set(COMPONENTS)) | (set(weights) - set(TERMS))
    if unknown:
        raise UnknownTermError(f"unknown loss terms: {sorted(unknown)}")
    for name, comp in components.items():
        if comp is not None and not math.isfinite(float(comp.data)):
            raise NonFiniteLossError(name, float(comp.data))
    total = components["cls"]
    for term in TERMS:
        comp = components.get(term)
        w = float(weights.get(term, 0.0))
        if comp is None or w == 0.0:
            continue
        total = total + comp * w
    return LossBundle(dict(components), {t: float(weights.get(t, 0.0)) for t in TERMS}, total)

"""Epoch-indexed augmentation strength and clean/adversarial loss weights.

Strength follows a block-wise linear decay: it starts at 1 and drops by
``K/T`` every ``K`` epochs. The reweighting coefficient grows as strength
falls, ``w = lam * (1 - s)``, shifting loss mass from the clean term to the
adversarial term while keeping the total weight at 2.

Arithmetic is done in exact rationals and rounded once, so table values such
as ``s(999) == 0.05`` for ``T=1000, K=50`` hold with ``==``.
"""
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class SchedulePlan:
    total_epochs: int = 1000
    decay_period: int = 50
    reweighting_rate: float = 2 / 3
    # narrative variant: last block jumps to s=0 instead of K/T
    floor_to_zero_final_block: bool = False
    # constant-strength ablation row; overrides the decay when set
    constant_strength: Optional[float] = None
    # experimental: hold s at this value once the decay reaches it
    strength_floor: Optional[float] = None

    def __post_init__(self):
        if int(self.total_epochs) != self.total_epochs or self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be a positive integer, got {self.total_epochs!r}")
        if int(self.decay_period) != self.decay_period or not 1 <= self.decay_period <= self.total_epochs:
            raise ConfigError(
                f"decay_period must be an integer in [1, {self.total_epochs}], got {self.decay_period!r}")
        if not 0.0 <= self.reweighting_rate <= 1.0:
            raise ConfigError(f"reweighting_rate must lie in [0, 1], got {self.reweighting_rate!r}")
        for name in ("constant_strength", "strength_floor"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")

    @classmethod
    def acl(cls, total_epochs: int) -> "SchedulePlan":
        """Static-strength, unweighted plan (s = 1, lam = 0)."""
        return cls(total_epochs=total_epochs, decay_period=total_epochs, reweighting_rate=0.0,
                   constant_strength=1.0)


def _rational(x) -> Fraction:
    # config values such as 2/3 arrive as binary floats; read them as the ratio meant
    return Fraction(x).limit_denominator(10 ** 9)


def _check_epoch(plan: SchedulePlan, t: int) -> None:
    if int(t) != t or not 0 <= t <= plan.total_epochs - 1:
        raise ContractError(f"epoch index {t!r} outside [0, {plan.total_epochs - 1}]")


def _strength_exact(plan: SchedulePlan, t: int) -> Fraction:
    _check_epoch(plan, t)
    if plan.constant_strength is not None:
        return _rational(plan.constant_strength)
    T, K = plan.total_epochs, plan.decay_period
    block = t // K
    if plan.floor_to_zero_final_block and block == (T - 1) // K:
        s = Fraction(0)
    else:
        s = Fraction(T - block * K, T)
    if plan.strength_floor is not None:
        s = max(s, _rational(plan.strength_floor))
    return s


def strength_at(plan: SchedulePlan, t: int) -> float:
    """Augmentation strength for epoch ``t`` (0-based)."""
    return float(_strength_exact(plan, t))


def weight_at(plan: SchedulePlan, t: int) -> float:
    """Reweighting coefficient ``lam * (1 - s(t))``."""
    return float(_weight_exact(plan, t))


def _weight_exact(plan: SchedulePlan, t: int) -> Fraction:
    return _rational(plan.reweighting_rate) * (1 - _strength_exact(plan, t))


def loss_coefficients(plan: SchedulePlan, t: int) -> tuple[float, float]:
    """``(clean_coef, adv_coef) = (1 - w, 1 + w)``, each rounded once from the exact value.

    The float pair sums to 2 within one ulp of 2.
    """
    w = _weight_exact(plan, t)
    return float(1 - w), float(1 + w)

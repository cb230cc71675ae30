import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .errors import ContractViolation, DegenerateInputError

SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL


def norm_score(score: float, random_score: float, expert_score: float) -> float:
    """(score - random) / (expert - random); unbounded on both sides"""
    if expert_score == random_score:
        raise DegenerateInputError(
            f"expert and random reference scores are both {expert_score}; normalization is undefined"
        )
    return (score - random_score) / (expert_score - random_score)


def welch_t_test(samples_a: Sequence[float], samples_b: Sequence[float]) -> WelchResult:
    """Two-sided heteroscedastic t-test with Welch-Satterthwaite degrees of freedom"""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractViolation("each sample needs at least two values")

    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    if var_a == 0.0 and var_b == 0.0:
        raise DegenerateInputError("both samples have zero variance")

    se_a, se_b = var_a / a.size, var_b / b.size
    t = float((a.mean() - b.mean()) / math.sqrt(se_a + se_b))
    dof = float((se_a + se_b) ** 2 / (se_a ** 2 / (a.size - 1) + se_b ** 2 / (b.size - 1)))
    # two-sided p from the regularized incomplete beta function
    p_value = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return WelchResult(t=t, dof=dof, p_value=min(1.0, p_value))

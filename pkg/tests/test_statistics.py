import json
from pathlib import Path

import numpy as np
import pytest

from services.errors import ContractViolation, DegenerateInputError
from services.statistics import norm_score, welch_t_test

GOLDEN = Path(__file__).resolve().parent.parent / "test_data" / "golden" / "welch_case.json"


def test_welch_matches_hand_evaluated_case():
    case = json.loads(GOLDEN.read_text())
    result = welch_t_test(case["samples_a"], case["samples_b"])
    assert result.t == pytest.approx(case["t"], abs=1e-9)
    assert result.dof == pytest.approx(case["dof"], abs=1e-9)
    assert result.p_value == pytest.approx(case["p_value_numerator"] / case["p_value_denominator"], abs=1e-6)
    assert not result.significant


def test_welch_is_antisymmetric():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=12), rng.normal(0.5, 2.0, size=7)
    ab, ba = welch_t_test(a, b), welch_t_test(b, a)
    assert ab.t == pytest.approx(-ba.t)
    assert ab.dof == pytest.approx(ba.dof)
    assert ab.p_value == pytest.approx(ba.p_value)


def test_clearly_different_samples_are_significant():
    result = welch_t_test([1.0, 1.1, 0.9, 1.0, 1.05], [0.0, 0.1, -0.1, 0.05, 0.0])
    assert result.significant
    assert 0.0 <= result.p_value < 0.001


def test_identical_samples_give_p_of_one():
    result = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert result.t == 0.0
    assert result.p_value == pytest.approx(1.0)


def test_degenerate_inputs_are_rejected():
    with pytest.raises(ContractViolation):
        welch_t_test([1.0], [1.0, 2.0])
    with pytest.raises(DegenerateInputError):
        welch_t_test([1.0, 1.0], [2.0, 2.0])


def test_norm_score():
    assert norm_score(0.5, 0.0, 1.0) == 0.5
    assert norm_score(1.5, 0.0, 1.0) == 1.5
    assert norm_score(-0.5, 0.5, 1.0) == -2.0
    with pytest.raises(DegenerateInputError):
        norm_score(0.3, 1.0, 1.0)

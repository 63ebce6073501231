"""Tests for the finite-difference gradient checker."""

import numpy as np
import pytest

from cmkd.gradcheck import (
    CHECKS,
    TOLERANCE,
    check,
    numeric_gradient,
    relative_error,
    run_gradcheck,
)
from cmkd.tensor import Tensor, backward, matmul, sum


class TestGradcheck:
    """Tests for check and run_gradcheck"""

    def test_check_names(self):
        """Test the six registered checks."""
        assert list(CHECKS) == [
            "loss_sim",
            "loss_unc",
            "loss_kd",
            "loss_ce",
            "loss_ccc",
            "loss_total",
        ]

    @pytest.mark.parametrize("name", list(CHECKS))
    def test_each_check_passes(self, name):
        """Test that analytic gradients match central differences."""
        result = check(name, instances=4, seed=3)
        assert result.passed, f"{name}: {result.max_rel_error:.3e}"
        assert result.max_rel_error <= TOLERANCE

    def test_kd_check_covers_both_forms(self, rng):
        """Test that every loss_kd instance carries a DEC and a CER output."""
        for i in range(4):
            _, params = CHECKS["loss_kd"](rng, i)
            assert [p.shape[1] for p in params] == [3, 1]

    def test_corrupted_gradient_fails(self):
        """Test that a perturbed analytic gradient is caught by name."""
        results = run_gradcheck(instances=2, seed=0, corrupt="loss_ce")
        failed = [r.name for r in results if not r.passed]
        assert failed == ["loss_ce"]

    def test_matmul_against_finite_differences(self, rng):
        """Test a 3×4 · 4×2 product through the numeric helper."""
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)))

        def fn() -> Tensor:
            out = matmul(a, b)
            return sum(out * out)

        backward(fn())
        assert relative_error(a.grad, numeric_gradient(fn, a)) <= 1e-6

    def test_relative_error_floor(self):
        """Test that two zero gradients compare equal."""
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

"""Acceptance gate: every criterion at its stated tolerance, one printed
pass/fail line each. Run with ``pytest tests/test_acceptance.py -v -s`` or
through ``dsblo verify --level full``."""

import pytest

from dsblo import verify


def _report(number: int, result) -> None:
    status = "PASS" if result.passed else "FAIL"
    print(f"[acceptance] criterion {number} {result.name}: {status} "
          f"({result.seconds:.1f}s) — {result.detail}")
    assert result.passed, f"criterion {number} ({result.name}): {result.detail}"


def test_c01_ll_bruteforce_equivalence():
    _report(1, verify.check_ll_bruteforce(n_instances=100))


def test_c02_kkt_certification():
    _report(2, verify.check_kkt_certification())


def test_c03_implicit_gradient_fd():
    _report(3, verify.check_implicit_fd(n_instances=10, n_points=10))


def test_c04_strict_complementarity_sampling():
    _report(4, verify.check_strict_complementarity(n_draws=1000))


def test_c05_perturbation_error_bound():
    _report(5, verify.check_perturbation_error(n_instances=3, n_points=5,
                                               n_samples=1000))


def test_c06_schedule_formulas():
    _report(6, verify.check_schedule_formulas(n_tuples=20))


def test_c07_window_invariants():
    _report(7, verify.check_window_invariant())


def test_c08_sampled_gradient_unbiasedness():
    _report(8, verify.check_option2_unbiasedness(n_points=20))


def test_c09a_benchmark_d10():
    _report(9, verify.check_benchmark(10))


def test_c09b_benchmark_d50():
    _report(9, verify.check_benchmark(50))


def test_c10_determinism():
    _report(10, verify.check_determinism())

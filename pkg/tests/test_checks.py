import numpy as np
import pytest

from tsar.checks import (
    THRESHOLDS,
    CheckResult,
    check_primitives,
    check_quadratic,
    check_tsar_meta,
    inject_fault,
    primitive_case,
    run_all,
)
from tsar.tensor import nn
from tsar.tensor.tape import grad_check


def test_every_primitive_within_tolerance_on_50_instances():
    results = check_primitives(instances=50)
    assert {r.name for r in results} == set(nn.PRIMITIVES)
    for r in results:
        assert r.passed and r.error <= 1e-4, r.line()


@pytest.mark.parametrize("kind", sorted(nn.PRIMITIVES))
def test_fault_is_caught_and_named(kind):
    with inject_fault(kind):
        (res,) = check_primitives(instances=3, kinds=[kind])
    assert not res.passed and res.name == kind
    # and the patch is undone
    (clean,) = check_primitives(instances=3, kinds=[kind])
    assert clean.passed


def test_quadratic_meta_checks():
    results = check_quadratic()
    assert [r.name for r in results] == [
        "meta second-order K=1",
        "meta first-order gap K=1",
        "meta second-order K=2",
        "meta first-order gap K=2",
        "meta second-order K=3",
        "meta first-order gap K=3",
    ]
    assert all(r.passed for r in results)


def test_tsar_unrolled_meta_gradient_matches_finite_differences():
    (res,) = check_tsar_meta()
    assert res.passed, res.line()


def test_fp32_primitives_pass_relaxed_table():
    for r in check_primitives(instances=10, dtype="float32"):
        assert r.threshold == THRESHOLDS["float32"]["tol"]
        assert r.passed, r.line()


def test_fp32_error_exceeds_fp64_error():
    rng = np.random.default_rng(0)
    fn, params = primitive_case("instance_norm", rng)
    e64 = grad_check(fn, params, eps=THRESHOLDS["float64"]["step"])
    e32 = grad_check(fn, params, eps=THRESHOLDS["float32"]["step"], dtype="float32")
    assert e64 < e32 < THRESHOLDS["float32"]["tol"]


def test_non_finite_error_fails():
    assert not CheckResult("x", float("nan"), 1.0).passed
    assert CheckResult("x", 0.5, 1.0).line().startswith("PASS")


def test_run_all_with_fault_reports_failure():
    names = [r.name for r in run_all(instances=2, fault="sigmoid") if not r.passed]
    assert "sigmoid" in names


def test_unknown_primitive_case():
    with pytest.raises(ValueError):
        primitive_case("attention", np.random.default_rng(0))

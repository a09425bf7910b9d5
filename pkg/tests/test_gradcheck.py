import pytest

from mdsgnn.config import GradCheckSettings
from mdsgnn.gradcheck import CHECKS, SuiteResult, require_passing, run_suite
from mdsgnn.numerics import NumericalError


def test_full_suite_passes():
    result = run_suite()

    assert list(result.errors) == list(CHECKS)
    assert result.passed, result.errors
    assert result.seconds > 0


@pytest.mark.parametrize("seed", [1, 2])
def test_suite_passes_for_other_seeds(seed):
    result = run_suite(GradCheckSettings(seed=seed), ["gat_layer", "ntxent", "combined"])

    assert result.passed, result.errors


def test_suite_runs_requested_components_in_order():
    result = run_suite(components=["projection", "classifier"])

    assert list(result.errors) == ["projection", "classifier"]


def test_unknown_component():
    with pytest.raises(ValueError, match="unknown gradient check components: attention"):
        run_suite(components=["classifier", "attention"])


def test_require_passing_names_first_failure():
    result = SuiteResult(tolerance=1e-4, errors={"gae": 1e-6, "ntxent": 0.5, "combined": 0.2})

    assert result.failed == ["ntxent", "combined"]
    with pytest.raises(NumericalError, match="ntxent") as info:
        require_passing(result)
    assert info.value.component == "ntxent"


def test_error_at_tolerance_fails():
    assert not SuiteResult(tolerance=1e-4, errors={"gae": 1e-4}).passed


def test_require_passing_accepts_clean_result():
    require_passing(SuiteResult(tolerance=1e-4, errors={"gae": 1e-7}))

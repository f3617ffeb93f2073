import pytest

from gradsuite import CASES, TOL, run_case


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    err = run_case(name)
    assert err < TOL, f"{name}: relative error {err:.2e}"

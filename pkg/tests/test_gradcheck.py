import numpy as np
import pytest

from talkit import tensor as tc
from talkit.gradcheck import check_gradients, relative_error, relu_margin
from talkit.gradsuite import MODULE_CHECKS, build_away_from_kinks, run_module_checks
from talkit.params import ParamStore
from talkit.tensor import Tensor


def store_with(**arrays):
    store = ParamStore()
    for name, value in arrays.items():
        store.add(name, Tensor(np.array(value, dtype=float), requires_grad=True))
    return store


class TestCheckGradients:
    def test_linear_function_is_exact(self):
        store = store_with(w=[0.3, -1.2, 2.0])
        coef = np.array([1.5, -2.0, 0.25])
        report = check_gradients(lambda: tc.tsum(tc.mul(store["w"], coef)), store)
        assert report.passed
        assert report.max_rel_error < 1e-8
        assert report.checked == 3

    def test_cube_has_eps_squared_error(self):
        store = store_with(x=2.0)
        eps = 1e-3
        f = lambda: tc.mul(tc.mul(store["x"], store["x"]), store["x"])
        report = check_gradients(f, store, eps=eps)
        # central difference of x^3 is 3x^2 + eps^2 exactly
        assert report.max_rel_error == pytest.approx(eps ** 2 / 12.0, rel=1e-3)

    def test_wrong_gradient_is_reported(self):
        store = store_with(x=[1.0, 2.0])
        x = store["x"]

        def broken():
            # forward is x^2 but backward claims 3x
            out = tc._make(x.data ** 2, (x,), lambda g: (3 * x.data * g,), "broken")
            return tc.tsum(out)

        report = check_gradients(broken, store)
        assert not report.passed
        assert len(report.failures) == 2
        assert "FAIL" in report.summary()

    def test_parameters_restored(self):
        store = store_with(w=[0.5, 0.7])
        before = store["w"].data.copy()
        check_gradients(lambda: tc.tsum(tc.exp(store["w"])), store)
        np.testing.assert_array_equal(store["w"].data, before)

    def test_relative_error_floor(self):
        assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)
        assert relative_error(2.0, 1.0) == 0.5


class TestReluMargin:
    def test_reports_smallest_input(self):
        x = Tensor(np.array([-0.5, 0.02, 3.0]), requires_grad=True)
        out = tc.tsum(tc.relu(tc.mul(x, 2.0)))
        assert relu_margin(out) == pytest.approx(0.04)

    def test_no_relu(self):
        assert relu_margin(tc.exp(Tensor(1.0, requires_grad=True))) == np.inf


class TestModuleSuite:
    def test_every_module_covered(self):
        assert set(MODULE_CHECKS) == {"tensorcore", "lgte_stack", "tbr", "mdcm", "cascade", "brm_oic", "mmd"}

    @pytest.mark.parametrize("name", sorted(MODULE_CHECKS))
    def test_draw_clears_kinks(self, name):
        f, store = build_away_from_kinks(MODULE_CHECKS[name], 5)
        assert relu_margin(f()) >= 1e-3
        assert len(store) > 0

    def test_draws_are_deterministic(self):
        f1, s1 = build_away_from_kinks(MODULE_CHECKS["mdcm"], 2)
        f2, s2 = build_away_from_kinks(MODULE_CHECKS["mdcm"], 2)
        assert f1().item() == f2().item()

    def test_suite_on_small_budget(self):
        reports = run_module_checks(seed=7, max_coords=4)
        for name, report in reports.items():
            assert report.passed, f"{name}: {report.summary()}"

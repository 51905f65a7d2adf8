import numpy as np
import pytest

from deform3d import checks
from deform3d.gradcheck import GradCheckReport, check_gradients, numeric_grad


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float((x**2).sum()), x, range(3))
    assert np.allclose(g, 2 * x, rtol=0, atol=1e-9)
    assert np.array_equal(x, [1.0, -2.0, 3.0])  # perturbations undone


def test_wrong_gradient_fails():
    x = np.array([1.0, 2.0])
    rep = check_gradients(lambda: float((x**3).sum()), {"x": x}, {"x": 2 * x}, 1e-6)
    assert not rep.passed and rep.max_rel > 0.1


def test_empty_parameter_set_passes_trivially():
    rep = check_gradients(lambda: 0.0, {}, {}, 1e-6)
    assert rep.passed and rep.groups == []


def test_requires_double_precision():
    x = np.ones(2, np.float32)
    with pytest.raises(TypeError):
        check_gradients(lambda: float(x.sum()), {"x": x}, {"x": np.ones(2, np.float32)}, 1e-6)


def test_subsampled_entries():
    x = np.arange(100.0)
    rep = check_gradients(lambda: float((x**2).sum() / 2), {"x": x}, {"x": x.copy()}, 1e-6, max_entries=5, rng=0)
    assert rep.passed and rep.groups[0].checked == 5


def test_report_merge_and_table():
    a = checks.check_relu(0)
    rep = GradCheckReport(1e-6)
    rep.merge(a, prefix="relu.")
    assert rep.groups[0].name == "relu.x"
    assert "PASS" in rep.table()


def test_tensor_core_module_runs_every_primitive():
    rep = checks.run("tensor-core", 0)
    names = {g.name.split(".")[0] for g in rep.groups}
    assert names == set(checks.PRIMITIVES)

import numpy as np
import pytest

from normlab.attacks import AttackSpec, FunctionModel, default_suite, linear_model
from normlab.evaluation import (EvalReport, GradTrace, InfeasibleExampleError, accuracy, accuracy_matrix,
                                attack_dataset, export_image_grid, gradient_norm_trace, grid_size, grid_tiles,
                                read_pgm, robust_accuracy)
from normlab.geometry import Budget, Norm
from normlab.models import ModelSpec, Network, init_params
from normlab import tensor as T


def toy_net():
    spec = ModelSpec(conv_channels=(2, 2), kernel=3, hidden=(4,), input_shape=(1, 28, 28))
    return Network(spec, init_params(spec, 0))


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(6, 1, 28, 28)), rng.integers(0, 10, size=6)


def test_report_roundtrip_and_layout(tmp_path):
    rep = EvalReport(["Natural", "PGD-L2"], ["a", "b"], [[1.0, 0.5], [0.25, 0.0]], {"examples": 4})
    assert rep.cell("PGD-L2", "a") == 0.25
    assert EvalReport.from_json(rep.to_json()) == rep
    assert rep.to_csv().splitlines() == ["attack,a,b", "Natural,1.0,0.5", "PGD-L2,0.25,0.0"]
    csv_path, json_path = rep.write(tmp_path)
    assert csv_path.read_text() == rep.to_csv() and json_path.read_text() == rep.to_json()


def test_report_rejects_bad_cells():
    with pytest.raises(ValueError):
        EvalReport(["Natural"], ["a"], [[1.5]])
    with pytest.raises(ValueError):
        EvalReport(["Natural", "PGD-L2"], ["a"], [[1.0]])


def test_trace_csv():
    assert GradTrace([2.0, 1.5]).to_csv() == "iteration,mean_grad_l2\n0,2.0\n1,1.5\n"


def test_linear_model_trace_is_constant():
    spec = AttackSpec("PGD-L2", "pgd", Budget(Norm.L2, 0.5, 0.05, 6))
    x = np.full((3, 4), 0.5)
    trace = gradient_norm_trace(linear_model([1.0, 2.0, 2.0, 4.0]), spec, x, None)
    assert len(trace.values) == 7
    np.testing.assert_allclose(trace.values, 5.0)
    assert len(trace.to_csv().splitlines()) == 8


def test_zero_budget_attack_keeps_natural_accuracy(batch):
    net, (x, y) = toy_net(), batch
    spec = AttackSpec("PGD-Linf", "pgd", Budget(Norm.LINF, 0.0, 0.01, 3))
    assert robust_accuracy(net, spec, x, y) == accuracy(net, x, y)


def test_matrix_shape_and_jobs_independence(batch):
    net, (x, y) = toy_net(), batch
    suite = default_suite(steps=2)
    a = accuracy_matrix({"m": net}, suite, x, y, batch_size=2)
    b = accuracy_matrix({"m": net}, suite, x, y, batch_size=2, jobs=2)
    assert a.rows == [s.name for s in suite] and a.columns == ["m"]
    assert a.to_json() == b.to_json()


def test_infeasible_attack_is_reported(monkeypatch, batch):
    import normlab.evaluation as ev
    from normlab.attacks import AttackOutcome

    def cheat(model, x, y, spec, indices):
        return AttackOutcome(x + 0.5, [], np.ones(len(x), bool), spec.name)

    monkeypatch.setattr(ev, "_attack_chunk", lambda args: cheat(*args))
    with pytest.raises(InfeasibleExampleError):
        attack_dataset(toy_net(), AttackSpec("PGD-L2", "pgd", Budget(Norm.L2, 0.1, 0.01, 1)), *batch)


def test_accuracy_of_empty_set():
    with pytest.raises(ValueError):
        accuracy(FunctionModel(lambda x: T.tsum(x, axis=1)), np.zeros((0, 2)), np.zeros(0))


def test_image_grid_roundtrip(tmp_path, batch):
    x, _ = batch
    adv = np.clip(x + 0.1, 0, 1)
    path = export_image_grid(x, adv, [3, 1, 4, 1, 5, 9], tmp_path / "grid.pgm")
    canvas = read_pgm(path)
    assert canvas.shape == grid_size(6) == (62, 182)
    np.testing.assert_allclose(grid_tiles(canvas, 6, 0), x[:, 0], atol=0.5 / 255 + 1e-12)
    np.testing.assert_allclose(grid_tiles(canvas, 6, 1), adv[:, 0], atol=0.5 / 255 + 1e-12)
    assert path.with_suffix(".txt").read_text().split() == ["3", "1", "4", "1", "5", "9"]


def test_image_grid_count_mismatch(tmp_path, batch):
    with pytest.raises(ValueError):
        export_image_grid(batch[0], batch[0][:2], [0] * 6, tmp_path / "g.pgm")

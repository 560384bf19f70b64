import numpy as np
import pytest

from conftest import binary_spec
from mrlong.trajectory import (ContractError, Dataset, DatasetError, ProblemSpec, RegimeSpec, Trajectory,
                               load_dataset, pi_star, pi_star_batch, save_dataset, y_under_regime)


def dropout_spec():
    return binary_spec(2, regime=RegimeSpec.static([1, 1]))


def test_dropout_regime_indicator():
    spec = dropout_spec()
    assert pi_star(Trajectory([0.1, 0.2, 1.0], [1, 1]), spec, 1, 2) == 1.0
    assert pi_star(Trajectory([0.1, 0.2, 1.0], [1, 0]), spec, 1, 2) == 0.0


def test_uniform_stochastic_regime_product():
    spec = binary_spec(2, regime=RegimeSpec.stochastic([{0: "0.5", 1: "0.5"}] * 2))
    assert pi_star(Trajectory([0.0, 0.0, 0.0], [0, 1]), spec, 1, 2) == pytest.approx(0.25)


def test_pi_star_empty_product_and_range_errors():
    spec = dropout_spec()
    t = Trajectory([0.0, 0.0, 0.0], [1, 1])
    assert pi_star(t, spec, 2, 1) == 1.0
    with pytest.raises(ContractError):
        pi_star(t, spec, 1, 3)
    with pytest.raises(ContractError):
        pi_star(t, spec, 0, 1)


def test_y_under_regime_examples():
    spec = binary_spec(1)
    eta = lambda L, A: np.where(A[:, 0] == 1, 0.8, 0.2)
    t = Trajectory([0.3, 0.0], [0])
    assert y_under_regime(eta, t, spec, 1) == pytest.approx(0.8)
    uniform = binary_spec(1, regime=RegimeSpec.stochastic([{0: "0.5", 1: "0.5"}]))
    assert y_under_regime(eta, t, uniform, 1) == pytest.approx(0.5)
    const = lambda L, A: np.full(A.shape[0], 3.0)
    assert y_under_regime(const, t, uniform, 1) == pytest.approx(3.0)


def test_y_under_regime_requires_reachable_history():
    spec = dropout_spec()
    with pytest.raises(ContractError):
        y_under_regime(lambda L, A: np.ones(A.shape[0]), Trajectory([0.0, 0.0, 0.0], [0, 0]), spec, 2)


def test_dynamic_regime_from_expression():
    spec = binary_spec(1, regime=RegimeSpec.dynamic(["L1 > 0.5"]))
    assert pi_star(Trajectory([0.9, 0.0], [1]), spec, 1, 1) == 1.0
    assert pi_star(Trajectory([0.1, 0.0], [1]), spec, 1, 1) == 0.0


def test_stochastic_regime_must_be_a_density():
    spec = binary_spec(1, regime=RegimeSpec.stochastic([{0: "0.5", 1: "0.6"}]))
    with pytest.raises(ContractError):
        pi_star(Trajectory([0.0, 0.0], [1]), spec, 1, 1)


def test_problem_spec_contracts_and_round_trip():
    with pytest.raises(ContractError):
        ProblemSpec(0, [], [1], "L1", RegimeSpec.static([]))
    with pytest.raises(ContractError):
        ProblemSpec(1, [[0, 1]], [1, 1], "L2 + A1", RegimeSpec.static([1]))
    regime = RegimeSpec.mixed([RegimeSpec.static([1]), RegimeSpec.dynamic(["L2 > 0"]),
                               RegimeSpec.stochastic([{0: "0.3", 1: "0.7"}])])
    spec = ProblemSpec(3, [[0, 1]] * 3, [1, 1, 1, 2], "L4_1 + L4_2", regime)
    again = ProblemSpec.from_config(spec.to_config())
    assert again.to_config() == spec.to_config()


def test_trajectory_contracts():
    spec = binary_spec(1)
    with pytest.raises(ContractError):
        Trajectory([0.0], [1])
    with pytest.raises(ContractError):
        Trajectory([0.0, 0.0], [2]).check(spec)
    with pytest.raises(ContractError):
        Trajectory([[0.0, 1.0], 0.0], [1]).check(spec)


def test_dataset_validation():
    spec = binary_spec(1)
    with pytest.raises(DatasetError):
        Dataset([np.zeros((2, 1)), np.zeros((2, 1))], np.array([[0], [2]]), spec)
    with pytest.raises(DatasetError):
        Dataset([np.zeros((2, 1))], np.array([[0], [1]]), spec)
    ds = Dataset([np.zeros((2, 1)), np.array([[1.0], [3.0]])], np.array([[0], [1]]), spec, weights=[1, 3])
    assert ds.mean(ds.L[1][:, 0]) == pytest.approx(2.5)
    assert ds.subset([1]).n == 1


def test_pi_star_batch_telescopes():
    rng = np.random.default_rng(0)
    regime = RegimeSpec.stochastic([{0: "0.3", 1: "0.7"}, {0: "expit(L2)", 1: "1 - expit(L2)"},
                                    {0: "0.5", 1: "0.5"}])
    spec = binary_spec(3, regime=regime)
    ds = Dataset([rng.normal(size=(20, 1)) for _ in range(4)], rng.integers(0, 2, (20, 3)), spec)
    for j, k, m in [(1, 1, 3), (1, 2, 3), (2, 2, 3)]:
        np.testing.assert_allclose(pi_star_batch(ds, j, k) * pi_star_batch(ds, k + 1, m),
                                   pi_star_batch(ds, j, m), atol=1e-12)


def _write(path, text):
    path.write_text(text)
    return path


def test_load_dataset_examples(tmp_path):
    spec = dropout_spec()
    good = _write(tmp_path / "ok.csv", "L1_1,A1,L2_1,A2,L3_1\n0.1,1,0.2,1,1\n0.3,1,0.5,0,0\n0.2,0,,0,\n")
    ds = load_dataset(good, spec)
    assert ds.n == 3 and ds.L[1][2, 0] == 0.0
    bad = _write(tmp_path / "bad.csv", "L1_1,A1,L2_1,A2,L3_1\n0.1,1,0.2,1,1\n0.1,2,0.2,1,1\n")
    with pytest.raises(DatasetError, match="row 3, column A1"):
        load_dataset(bad, spec)
    with pytest.raises(DatasetError, match="n >= 1"):
        load_dataset(_write(tmp_path / "empty.csv", ""), spec)
    with pytest.raises(DatasetError, match="missing column"):
        load_dataset(_write(tmp_path / "miss.csv", "L1_1,A1\n0,1\n"), spec)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    spec = dropout_spec()
    ds = Dataset([rng.normal(size=(5, 1)) for _ in range(3)], rng.integers(0, 2, (5, 2)), spec)
    save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv", spec)
    for a, b in zip(ds.L, back.L):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ds.A, back.A)

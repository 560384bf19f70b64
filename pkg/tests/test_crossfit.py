import numpy as np
import pytest

from conftest import binary_spec
from mrlong.crossfit import (ConstantLearner, LeakageError, LeakageLog, NestedSplitPlan, Nuisance, OracleLearner,
                             SeriesLearnerConfig, algorithm6, average_nuisances, drift_diagnostic, make_splits,
                             multi_layer, series_learner, split_nuisances, two_layer)
from mrlong.discrete_law import sample, true_nuisances
from mrlong.report import EstimatorError
from mrlong.simulation import smooth_k2_law
from mrlong.trajectory import ContractError, Dataset


@pytest.fixture(scope="module")
def smooth():
    law, spec = smooth_k2_law()
    return law, spec, sample(law, spec, 600, seed=0)


def test_split_examples():
    plan = make_splits(10, 5, seed=1)
    assert plan.sizes().tolist() == [2] * 5
    assert sorted(np.concatenate([plan.rows(u) for u in range(5)]).tolist()) == list(range(10))
    assert sorted(make_splits(11, 5, seed=1).sizes().tolist()) == [2, 2, 2, 2, 3]
    np.testing.assert_array_equal(make_splits(50, 3, seed=7).assignment, make_splits(50, 3, seed=7).assignment)
    with pytest.raises(ValueError, match="U >= 2"):
        make_splits(10, 1)
    with pytest.raises(ValueError):
        make_splits(3, 5)


def test_nested_plan_partitions_each_complement():
    tree = NestedSplitPlan(40, [4, 3], seed=2)
    np.testing.assert_array_equal(tree.rows((1,)), make_splits(40, 4, 2).rows(1))
    for u in range(4):
        comp = tree.complement((u,))
        kids = np.sort(np.concatenate([tree.rows((u, v)) for v in range(3)]))
        np.testing.assert_array_equal(kids, comp)
        assert not np.intersect1d(comp, tree.rows((u,))).size


def test_leakage_log_raises_on_overlap():
    log = LeakageLog()
    nu = Nuisance(lambda L, A: 0, np.array([0, 1, 2]), "eta1")
    log.check([nu, None], np.array([3, 4]), "split 0")
    assert log.checks == 1
    with pytest.raises(LeakageError, match="split 1: eta1 evaluated on 1 of its training rows"):
        log.check([nu], np.array([2, 5]), "split 1")


def test_averaged_constant_nuisances_are_constant():
    parts = [Nuisance(lambda L, A: np.full(A.shape[0], 0.3), np.array([i])) for i in range(4)]
    avg = average_nuisances(parts)
    np.testing.assert_allclose(avg([], np.zeros((5, 1))), 0.3)
    assert avg.rows.tolist() == [0, 1, 2, 3]


def test_split_mean_identity_and_leakage_bookkeeping(smooth):
    law, spec, ds = smooth
    reps = algorithm6(ds, spec, series_learner(), series_learner(), U=3, seed=4)
    assert set(reps) == {"dr_cf", "dr_cf_bang", "dr_cf_reg", "mr_cf", "mr_cf_bang", "mr_cf_reg"}
    for rep in reps.values():
        assert rep.estimate == np.mean(rep.per_split)
        assert len(rep.per_split) == 3
        assert rep.diagnostics["leakage_checks"] == 3 * 3 * spec.K
        assert rep.diagnostics["leakage_violations"] == 0


def test_extensions_flag_leaves_plain_estimates_unchanged(smooth):
    law, spec, ds = smooth
    full = algorithm6(ds, spec, ConstantLearner(0.4), ConstantLearner(), U=2, seed=1)
    plain = algorithm6(ds, spec, ConstantLearner(0.4), ConstantLearner(), U=2, seed=1, extensions=False)
    assert set(plain) == {"dr_cf", "mr_cf"}
    assert plain["mr_cf"].estimate == full["mr_cf"].estimate


def test_oracle_learner_gives_mean_of_true_q(smooth):
    law, spec, ds = smooth
    reps = algorithm6(ds, spec, OracleLearner(law, spec), OracleLearner(law, spec), U=3, seed=0,
                      extensions=False)
    from mrlong.mr import q_batch
    q = q_batch(ds, true_nuisances(law, spec), 1, truncate=True)
    plan = make_splits(ds.n, 3, 0)
    expected = np.mean([q[plan.rows(u)].mean() for u in range(3)])
    assert reps["mr_cf"].estimate == pytest.approx(expected, abs=1e-12)
    assert reps["dr_cf"].estimate == pytest.approx(expected, abs=1e-12)
    table = drift_diagnostic(law, spec, split_nuisances(reps, "MR"), "MR")
    assert abs(table.total) < 1e-12 and len(table.terms) == 2


def test_learner_failures_name_the_split(smooth):
    law, spec, ds = smooth

    class Broken(ConstantLearner):
        def fit_conditional_mean(self, ds, outcome, k, weights):
            raise RuntimeError("boom")

    with pytest.raises(EstimatorError, match="split 0"):
        algorithm6(ds, spec, Broken(), ConstantLearner(), U=2)


def k1_sample(n=300, seed=0):
    rng = np.random.default_rng(seed)
    L1 = rng.uniform(size=(n, 1))
    A = rng.binomial(1, 0.3 + 0.4 * L1[:, 0])[:, None]
    L2 = (L1 + A + rng.normal(scale=0.2, size=(n, 1)))
    return Dataset([L1, L2], A, binary_spec(1))


def test_single_timepoint_layers_reduce_to_plain_cross_fit():
    ds = k1_sample()
    spec = ds.spec
    plain = algorithm6(ds, spec, series_learner(), series_learner(), U=3, seed=5, extensions=False)["mr_cf"]
    two = two_layer(ds, spec, series_learner(), series_learner(), U=3, seed=5)
    multi = multi_layer(ds, spec, series_learner(), series_learner(), U=3, seed=5)
    assert two.per_split == pytest.approx(plain.per_split, abs=1e-12)
    assert multi.per_split == pytest.approx(plain.per_split, abs=1e-12)


def test_layered_estimators_are_deterministic_and_leak_free(smooth):
    law, spec, ds = smooth
    a = two_layer(ds, spec, series_learner(), series_learner(), U=3, seed=2)
    b = two_layer(ds, spec, series_learner(), series_learner(), U=3, seed=2)
    assert a.estimate == b.estimate and a.diagnostics["leakage_violations"] == 0
    m = multi_layer(ds, spec, ConstantLearner(0.25), ConstantLearner(), U=2, seed=2)
    # constant learner: every averaged nuisance is the same constant
    eta = m.details["averaged"]((0,), 2, "eta")
    np.testing.assert_allclose(eta(ds.hist_L(2), ds.hist_A(2)), 0.25)
    assert m.estimate == np.mean(m.per_split)


def test_multi_layer_caps():
    ds = k1_sample(40)
    with pytest.raises(ValueError, match="7 leaves"):
        multi_layer(ds, ds.spec, ConstantLearner(), ConstantLearner(), U=7)


def test_series_config_validation():
    with pytest.raises(ContractError):
        SeriesLearnerConfig(family="wavelet")
    with pytest.raises(ContractError):
        SeriesLearnerConfig(sizes=())
    with pytest.raises(ContractError):
        SeriesLearnerConfig(folds=1)
    cfg = SeriesLearnerConfig("spline", (3, 1, 3), 4, 9)
    assert cfg.sizes == (1, 3) and SeriesLearnerConfig.from_config(cfg.to_config()) == cfg


def test_series_mean_recovers_a_quadratic_and_cv_prefers_enough_terms():
    rng = np.random.default_rng(3)
    n = 400
    L1 = rng.uniform(size=(n, 1))
    y = 1 + 2 * L1[:, 0] - 3 * L1[:, 0] ** 2
    ds = Dataset([L1, y[:, None]], np.ones((n, 1), dtype=int), binary_spec(1))
    fit = series_learner(SeriesLearnerConfig(sizes=(1, 2, 3))).fit_conditional_mean(ds, y, 1, np.ones(n))
    assert fit.basis.m == 2
    np.testing.assert_allclose(fit(ds.L, ds.A), y, atol=1e-10)


@pytest.mark.parametrize("family", ["polynomial", "histogram", "spline"])
def test_series_density_tracks_treatment_probabilities(family):
    ds = k1_sample(4000, seed=6)
    dens = series_learner(SeriesLearnerConfig(family, (1, 2, 4))).fit_conditional_density(ds, 1)
    P = dens(ds.L, ds.A[:, :0])
    truth = 0.3 + 0.4 * ds.L[0][:, 0]
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert np.max(np.abs(P[:, 1] - truth)) < 0.12


def test_series_learner_unseen_cell_uses_pooled_fit():
    ds = k1_sample(200, seed=8)
    w = (ds.A[:, 0] == 1).astype(float)
    fit = series_learner().fit_conditional_mean(ds, ds.L[1][:, 0], 1, w)
    A0 = np.zeros((3, 1), dtype=int)
    assert fit.unseen(A0).all()
    np.testing.assert_allclose(fit([b[:3] for b in ds.L], A0), fit([b[:3] for b in ds.L], np.ones((3, 1), int)))

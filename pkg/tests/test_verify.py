import numpy as np
import pytest

from mrlong.discrete_law import DiscreteLaw, load_fixture
from mrlong.verify import (Check, all_passed, default_models, fixture_is_dropout, full_positivity,
                           run_fixture_suite)


@pytest.mark.parametrize("fixture", ["k1_basic", "k2_dropout", "k3_general"])
def test_fixture_suite_passes(fixture):
    checks = run_fixture_suite(fixture, seeds=10, expansion_seeds=2)
    assert checks
    assert all_passed(checks), [c.row() for c in checks if not c.passed]


def test_dropout_fixture_skips_expansions_only():
    checks = run_fixture_suite("k2_dropout", seeds=2, expansion_seeds=1)
    skipped = [c for c in checks if c.status == "skip"]
    assert [c.name for c in skipped] == ["linear-smoother expansions"]
    assert any(c.name.startswith("dropout equation chain") for c in checks)


def test_check_status_and_row():
    assert Check("a", 1e-12, 1e-10).status == "pass"
    assert Check("a", 1e-9, 1e-10).status == "FAIL"
    assert Check("a", float("nan"), 1e-10).status == "FAIL"
    skip = Check("a", float("nan"), 1e-10, 0, skipped="why")
    assert skip.passed and skip.status == "skip"
    assert skip.row() == {"check": "a", "max_error": skip.error, "tol": 1e-10, "runs": 0,
                          "status": "skip", "note": "why"}
    assert not all_passed([Check("a", 0.0, 1.0), Check("b", 2.0, 1.0)])


def test_fixture_shape_predicates():
    law2, spec2 = load_fixture("k2_dropout")
    law3, spec3 = load_fixture("k3_general")
    assert fixture_is_dropout(law2, spec2) and not full_positivity(law2)
    assert not fixture_is_dropout(law3, spec3) and full_positivity(law3)


def test_default_models_are_nested():
    _, spec = load_fixture("k3_general")
    models, pmodel = default_models(spec)
    assert models.nesting_problem() in (None, "")
    assert len(models.bases) == spec.K == len(pmodel.bases)


def test_law_file_path_accepted(tmp_path):
    import json
    from mrlong.discrete_law import FIXTURE_DIR
    p = tmp_path / "law.json"
    p.write_text((FIXTURE_DIR / "k1_basic.json").read_text())
    checks = run_fixture_suite(str(p), seeds=3, expansion_seeds=1)
    assert all_passed(checks)
    assert json.loads(p.read_text())["problem"]["K"] == 1
    assert isinstance(load_fixture(str(p))[0], DiscreteLaw)
    assert np.isfinite(max(c.error for c in checks))

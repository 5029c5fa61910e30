import math

import numpy as np
import pytest

from fvclust.data import (ColumnSchema, LongitudinalDataset, SimulationSpec, SimulationTruth, SubjectRecord,
                          alpha_function, default_schema, load_csv, simulate_dataset, true_alpha_catalog,
                          write_csv)
from fvclust.errors import SchemaError, ValidationError


def _write(path, text):
    path.write_text(text)
    return path


def test_minimal_csv(tmp_path):
    f = _write(tmp_path / "d.csv", "id,t,y,w\n1,0.1,0,2.0\n1,0.5,1,3.0\n")
    ds = load_csv(f, {"subject": "id", "time": "t", "response": "y", "W": ["w"]})
    assert ds.N == 1 and ds.subjects[0].n == 2
    assert ds.dims == (1, 0, 0)


def test_non_binary_response(tmp_path):
    f = _write(tmp_path / "d.csv", "id,t,y\n1,0.1,2\n")
    with pytest.raises(ValidationError):
        load_csv(f, {"subject": "id", "time": "t", "response": "y", "W": ["1"]})


def test_missing_column(tmp_path):
    f = _write(tmp_path / "d.csv", "id,t,y\n1,0.1,1\n")
    with pytest.raises(SchemaError):
        load_csv(f, {"subject": "id", "time": "t", "response": "y", "W": ["w"]})


def test_empty_file(tmp_path):
    f = _write(tmp_path / "d.csv", "id,t,y\n")
    with pytest.raises(ValidationError):
        load_csv(f, {"subject": "id", "time": "t", "response": "y", "W": ["1"]})


def test_schema_missing_role():
    with pytest.raises(SchemaError):
        ColumnSchema.from_dict({"subject": "id", "time": "t"})


def test_panel_shaped_file(tmp_path):
    # an application-style panel: intercept + one dynamic covariate, three fixed effects, random intercept
    rng = np.random.default_rng(0)
    lines = ["pid,age,hsat_low,kids,married,hsat,handicap"]
    for i in range(893):
        for j in range(rng.integers(1, 5)):
            lines.append(f"{i},{rng.uniform(20, 60):.3f},{rng.integers(0, 2)},{rng.integers(0, 2)},"
                         f"{rng.integers(0, 2)},{rng.normal():.3f},{rng.integers(0, 2)}")
    f = _write(tmp_path / "panel.csv", "\n".join(lines) + "\n")
    schema = {"subject": "pid", "time": "age", "response": "hsat_low", "W": ["1", "kids"],
              "X": ["married", "hsat", "handicap"], "Z": ["1"]}
    ds = load_csv(f, schema)
    assert ds.N == 893 and ds.dims == (2, 3, 1)


def test_csv_groups_and_sorts(tmp_path):
    f = _write(tmp_path / "d.csv", "id,t,y\nb,0.9,1\na,0.5,0\nb,0.1,0\na,0.2,1\n")
    ds = load_csv(f, {"subject": "id", "time": "t", "response": "y", "W": ["1"]})
    assert [s.subject_id for s in ds.subjects] == ["b", "a"]
    np.testing.assert_array_equal(ds.subjects[0].times, [0.1, 0.9])
    np.testing.assert_array_equal(ds.subjects[0].y, [0, 1])


def test_csv_round_trip(tmp_path):
    spec = SimulationSpec(cluster_sizes=(5, 4), alpha=(("a11", "a12"), ("a21", "a22")))
    ds, _ = simulate_dataset(spec, 3)
    schema = default_schema(ds.dims)
    write_csv(ds, tmp_path / "x.csv", schema)
    back = load_csv(tmp_path / "x.csv", schema, ds.time_range)
    for a, b in zip(ds.subjects, back.subjects):
        for name in ("times", "y", "W", "X", "Z"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_subject_validation():
    with pytest.raises(ValidationError):
        SubjectRecord("s", np.array([0.1, 0.2]), np.array([0, 1]), np.ones((1, 1)), np.zeros((2, 0)), np.zeros((2, 0)))
    with pytest.raises(ValidationError):
        LongitudinalDataset.from_subjects([])


def test_catalog_values():
    cat = true_alpha_catalog()
    assert cat["a32"](0.7) == 0
    assert cat["a22"](0.5) == pytest.approx(1.0)
    assert cat["a12"](1.0) == pytest.approx(0.0, abs=1e-12)
    assert cat["a31"](0.25) == pytest.approx(-0.5)
    assert cat["a11"](0.2) == pytest.approx(2 + math.exp(-1.6))


def test_alpha_function_specs():
    assert alpha_function({"poly": [1, 2]})(0.5) == pytest.approx(2.0)
    assert alpha_function({"sine": {"amp": 2, "freq": math.pi, "phase": 0, "power": 1}})(0.5) == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        alpha_function("nope")


def test_simulation_default_design():
    ds, truth = simulate_dataset(SimulationSpec(), 1)
    assert ds.N == 1200 and ds.dims == (2, 2, 2)
    assert np.bincount(truth.cluster_of).tolist() == [400, 400, 400]


def test_simulation_unbalanced():
    ds, truth = simulate_dataset(SimulationSpec(cluster_sizes=(600, 400, 200)), 2)
    assert ds.N == 1200
    assert np.bincount(truth.cluster_of).tolist() == [600, 400, 200]


def test_simulation_null_model_half_ones():
    spec = SimulationSpec(cluster_sizes=(300,), alpha=(({"poly": [0]}, {"poly": [0]}),), beta=(0.0, 0.0))
    ds, _ = simulate_dataset(spec, 4)
    y = ds.stacked["y"]
    se = math.sqrt(0.25 / y.size)  # independent-observation SE; random effects keep the mean at 1/2
    # subjects share b_i, which inflates the variance; use the subject-level design effect
    n_bar = y.size / ds.N
    deff = 1 + (n_bar - 1) * 0.25
    assert abs(y.mean() - 0.5) < 3 * se * math.sqrt(deff)


def test_simulation_rejects_bad_psi():
    with pytest.raises(ValidationError):
        SimulationSpec(psi=((1.0, 2.0), (2.0, 1.0)))


def test_simulation_rejects_no_clusters():
    with pytest.raises(ValidationError):
        SimulationSpec(cluster_sizes=(), alpha=())


def test_simulation_reproducible():
    spec = SimulationSpec(cluster_sizes=(10, 10, 10))
    a, ta = simulate_dataset(spec, 11)
    b, tb = simulate_dataset(spec, 11)
    for s, t in zip(a.subjects, b.subjects):
        np.testing.assert_array_equal(s.W, t.W)
        np.testing.assert_array_equal(s.y, t.y)
    np.testing.assert_array_equal(ta.b_true, tb.b_true)
    c, _ = simulate_dataset(spec, 12)
    assert not np.array_equal(a.stacked["y"], c.stacked["y"])


def test_simulation_latent_consistent():
    ds, truth = simulate_dataset(SimulationSpec(cluster_sizes=(20, 20, 20)), 5)
    np.testing.assert_array_equal(truth.L_true > 0, ds.stacked["y"].astype(bool))
    st = ds.stacked
    assert np.all(st["W"][:, 0] == 1) and np.all(st["Z"][:, 0] == 1)


def test_truth_round_trip():
    _, truth = simulate_dataset(SimulationSpec(cluster_sizes=(3, 3, 3)), 6)
    back = SimulationTruth.from_dict(truth.to_dict())
    np.testing.assert_array_equal(back.cluster_of, truth.cluster_of)
    np.testing.assert_allclose(back.alpha(1, 1, [0.5]), [1.0])


def test_spec_round_trip():
    spec = SimulationSpec(cluster_sizes=(7, 8, 9))
    assert SimulationSpec.from_dict(spec.to_dict()) == spec

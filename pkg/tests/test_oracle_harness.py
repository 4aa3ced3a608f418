import json

import numpy as np
import pytest

from sdfilter import oracle_harness as oh
from sdfilter.errors import ExperimentAborted, InvalidInputError, NumericalFailureError
from sdfilter.estimation import FitConfig, fit
from sdfilter.models import design, simulate_ssm

SMALL = dict(models=["gaussian_scale"], replications=2, n=400, particles=200,
             trajectories=20, band_draws=100, fit={"n_starts": 1})


@pytest.fixture(scope="module")
def small_report():
    return oh.run_experiment(oh.ExperimentConfig(**SMALL))


@pytest.mark.parametrize("bad", [
    dict(n=401), dict(replications=0), dict(particles=50), dict(models=["garch"]),
    dict(oracle_params="nais"), dict(normalization="scaled"), dict(levels=[1.2]),
])
def test_config_validation(bad):
    with pytest.raises(InvalidInputError):
        oh.ExperimentConfig(**dict(SMALL, **bad))


def test_report_structure(small_report):
    rep = small_report
    mse = rep.mse["gaussian_scale"]
    assert set(mse) == {f"{m}:{t}" for m in ("sd", "oracle", "oracle_true")
                        for t in oh.TARGETS}
    assert all(v >= 0 for v in mse.values())
    assert rep.replications["gaussian_scale"] == {"completed": 2, "failed": 0}
    assert set(rep.parameters["gaussian_scale"]) == {"c", "phi", "q"}
    assert "0.95:combined:predictive" in rep.coverage["gaussian_scale"]
    assert "0.95:parameter:predictive" in rep.coverage["gaussian_scale"]
    rows = rep.table3_csv().splitlines()
    assert rows[0] == "method,target,gaussian_scale"
    assert len(rows) == 1 + 3 * 3
    assert json.loads(rep.to_json())["oracle"].startswith("bootstrap particle filter")
    assert "timing" not in rep.to_json()


def test_report_reproducible(small_report, tmp_path):
    again = oh.run_experiment(oh.ExperimentConfig(**SMALL))
    assert again.to_json(include_raw=True) == small_report.to_json(include_raw=True)
    assert again.table4_csv() == small_report.table4_csv()
    paths = again.write(str(tmp_path))
    assert sorted(p.split("/")[-1] for p in paths) == ["report.json", "table3.csv",
                                                       "table4.csv", "timing.json"]


def test_replication_seeds_independent_of_order():
    cfg = oh.ExperimentConfig(**dict(SMALL, coverage=False, oracle_true_reference=False))
    a = oh.run_replication(cfg, "gaussian_scale", 1)
    oh.run_replication(cfg, "gaussian_scale", 0)
    b = oh.run_replication(cfg, "gaussian_scale", 1)
    assert a["mse"] == b["mse"]


def _fake(cfg, model_name, rep):
    if rep in _fake.failing:
        raise NumericalFailureError("synthetic failure", step=3)
    mse = {m: {t: 1.0 for t in oh.TARGETS} for m in ("sd", "oracle")}
    return {"model": model_name, "rep": rep, "mse": mse, "coverage": {},
            "params": {"c": 0.0}, "timing": {"sd": 0.0, "oracle": 0.0}}


def test_failures_recorded_and_skipped(monkeypatch):
    monkeypatch.setattr(oh, "run_replication", _fake)
    _fake.failing = {4}
    cfg = oh.ExperimentConfig(**dict(SMALL, replications=20))
    rep = oh.run_experiment(cfg)
    assert rep.replications["gaussian_scale"] == {"completed": 19, "failed": 1}
    assert rep.failures[0]["rep"] == 4 and "synthetic" in rep.failures[0]["error"]


def test_too_many_failures_abort(monkeypatch):
    monkeypatch.setattr(oh, "run_replication", _fake)
    _fake.failing = {1, 5, 9}
    with pytest.raises(ExperimentAborted) as info:
        oh.run_experiment(oh.ExperimentConfig(**dict(SMALL, replications=20)))
    assert len(info.value.failures) == 3


@pytest.mark.parametrize("which", ["true", "pf_fit"])
def test_oracle_parameter_choices(which):
    cfg = oh.ExperimentConfig(**dict(SMALL, replications=1, oracle_params=which,
                                     coverage=False, pf_fit_particles=100))
    out = oh.run_replication(cfg, "gaussian_scale", 0)
    assert out["mse"]["oracle"]["smoothed"] < out["mse"]["oracle"]["predictive"]
    if which == "pf_fit":
        assert set(out["params_oracle"]) == {"c", "phi", "q"}


def test_particle_likelihood_fit_close_to_sd_fit():
    model, trans = design("gaussian_scale")
    y = simulate_ssm(model, trans, 400, seed=8).observations
    cfg = FitConfig(n_starts=1)
    pf = oh.fit_particle_likelihood("gaussian_scale", y, 200, seed=1, config=cfg)
    sd = fit("gaussian_scale", y, cfg)
    assert pf.theta.in_domain(pf.theta.values)
    assert abs(pf.params["phi"] - sd.theta.as_dict()["phi"]) < 5 * sd.std_errors[1]
    again = oh.fit_particle_likelihood("gaussian_scale", y, 200, seed=1, config=cfg)
    assert again.params == pf.params


def test_timing_comparison_keys():
    model, trans = design("gaussian_scale")
    y = simulate_ssm(model, trans, 300, seed=2).observations
    t = oh.timing_comparison("gaussian_scale", y, 100, config=FitConfig(n_starts=1))
    assert t["sd_seconds"] > 0 and t["pf_seconds"] > 0
    assert t["ratio"] == pytest.approx(t["pf_seconds"] / t["sd_seconds"])


def test_error_scaling_gap_decreases():
    out = oh.error_scaling(n=300, N=2000, seed=1)
    assert out["gap"][0] > out["gap"][1] > out["gap"][2]
    assert out["mean_p"][0] > out["mean_p"][1] > out["mean_p"][2]

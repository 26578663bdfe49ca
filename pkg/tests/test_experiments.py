import csv
import json

import numpy as np
import pytest

from bayeskalman.errors import ConfigError
from bayeskalman.experiments import (
    SWEEP_HEADER,
    ExperimentConfig,
    build_data,
    evaluate_filters,
    run_bench,
    run_single,
    run_sweep,
    strip_timing,
)
from bayeskalman.knet import KGNetwork

TINY = dict(snr_db=[0.0], n_train=6, n_test=3, T=8, J=3, latency_repetitions=10,
            train=dict(epochs=1, batch_size=3, mc_samples=2, val_members=2))


def tiny(**kw):
    return ExperimentConfig.from_dict({**TINY, **kw})


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_defaults_follow_the_documented_splits():
    cfg = ExperimentConfig()
    assert (cfg.n_train, cfg.n_val, cfg.n_test) == (300, None, 100)
    cv = ExperimentConfig(scenario="cv", mismatch={"kind": "evolution_model"})
    assert (cv.n_train, cv.n_val, cv.n_test) == (85, 5, 10)


@pytest.mark.parametrize("bad", [
    {"scenario": "lorenz"},
    {"filters": []},
    {"filters": ["ekf", "ekf"]},
    {"filters": ["kalman"]},
    {"snr_db": []},
    {"n_test": 0},
    {"name": "a/b"},
    {"mismatch": {"kind": "evolution_model"}},
    {"mismatch": {"kind": "process_noise", "factor": -1}},
    {"mismatch": {"kind": "none", "scale": 2}},
    {"train": {"epochs": 1, "lr": -1}},
    {"bkn_mode": "threads"},
    {"colour": "red"},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_pendulum_gain_covariance_rejected_before_any_work():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"scenario": "pendulum", "filters": ["knet_kg"], "knet_covariance": True})
    cfg = ExperimentConfig.from_dict({"scenario": "pendulum", "filters": ["knet_kg"]})
    assert cfg.knet_covariance is False


def test_config_roundtrip_through_json():
    cfg = tiny(scenario="cv", mismatch={"kind": "process_noise", "factor": 100})
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_data_pools_training_over_the_grid():
    cfg = tiny(snr_db=[-5, 5, 15], n_train=7)
    data = build_data(cfg)
    assert len(data.train) == 7 and len(data.tests) == 3
    assert [float(R[0, 0]) for R in data.R_train] == pytest.approx([10 ** 0.5] * 3 + [10 ** -0.5] * 2
                                                                    + [10 ** -1.5] * 2)
    assert not np.array_equal(data.tests[0].observations, data.tests[1].observations)


def test_model_mismatch_projects_states_to_filter_dimension():
    data = build_data(tiny(scenario="cv", mismatch={"kind": "evolution_model"}, n_val=2))
    assert data.train.m == 4 and data.tests[0].m == 4 and data.val.m == 4
    assert data.model.m == 4


def test_seed_changes_data_and_is_otherwise_stable():
    a, b = build_data(tiny()), build_data(tiny())
    np.testing.assert_array_equal(a.train.states, b.train.states)
    c = build_data(tiny(seed=1))
    assert not np.array_equal(a.train.states, c.train.states)


def test_failing_filter_becomes_error_row():
    cfg = tiny(filters=["ekf", "knet_kg"], measure_latency=False, snr_db=[0.0])
    bad = KGNetwork(2, 2, rng=np.random.default_rng(0))
    bad.fc_out.dense.bias.data[:] = np.nan
    result = evaluate_filters(cfg, build_data(cfg), {"knet_kg": bad})
    assert result.rows[0][2] is not None and result.rows[1][2:] == [None, None, None]
    assert result.errors[0][1] == "knet_kg" and "NumericalError" in result.errors[0][2]


def test_sweep_writes_table_plots_and_reports(tmp_path):
    cfg = tiny(snr_db=[0.0, 10.0], filters=["ekf", "bkn"])
    result = run_sweep(cfg, tmp_path)
    out = tmp_path / cfg.name
    rows = rows_of(out / "sweep.csv")
    assert rows[0] == SWEEP_HEADER and len(rows) == 5
    assert {r[1] for r in rows[1:]} == {"ekf", "bkn"}
    assert (out / "sweep_mse.svg").exists() and (out / "sweep_anees.csv").exists()
    assert (out / "checkpoints" / "bkn.json").exists() and (out / "logs" / "train_bkn.csv").exists()
    assert len(result.reports) == 4 and not result.errors


def test_pendulum_sweep_has_no_gain_covariance_rows(tmp_path):
    cfg = tiny(scenario="pendulum", snr_db=[10.0], filters=["ekf", "knet_kg"], measure_latency=False)
    result = run_sweep(cfg, None)
    row = {r[1]: r for r in result.rows}
    assert row["knet_kg"][3] is None and row["ekf"][3] is not None and not result.errors


def test_single_run_outputs(tmp_path):
    cfg = tiny(scenario="cv", mismatch={"kind": "process_noise", "factor": 100}, snr_db=[-10.0],
               filters=["ekf", "knet_kg", "bkn"], measure_latency=False)
    out = run_single(cfg, tmp_path)
    d = tmp_path / cfg.name / "single"
    tracks = rows_of(d / "tracks.csv")
    assert {r[0] for r in tracks[1:]} == {"truth", "ekf", "knet_kg", "bkn"}
    for name in ("ekf", "knet_kg", "bkn"):
        assert len(rows_of(d / f"apec_eec_{name}.csv")) == cfg.T + 1
    assert set(out["apec_eec"]) == {"ekf", "knet_kg", "bkn"}
    with pytest.raises(ConfigError):
        run_single(tiny(), None)


def test_bench_covers_filters_and_modes():
    cfg = tiny(filters=["ekf", "knet_kg", "bkn"], bench_scenarios=["canonical"], T=5)
    rows = run_bench(cfg)
    assert [(r[1], r[2]) for r in rows] == [("ekf", "single"), ("knet_kg", "single"),
                                           ("bkn", "serial"), ("bkn", "parallel")]
    assert all(r[3] > 0 for r in rows)


def test_strip_timing_drops_only_timing_columns():
    text = "snr_db,filter,mse_db,log_anees,latency_ms\n0.0,ekf,1.0,2.0,3.5\n"
    assert strip_timing(text) == "snr_db,filter,mse_db,log_anees\n0.0,ekf,1.0,2.0\n"

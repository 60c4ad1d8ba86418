import copy
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from bpmpc_core.config import (
    DEFAULT_STATE_RESOLUTION_LARGE,
    WORKERS_ENV,
    FailureExperimentConfig,
    build_config,
    config_snapshot,
    load_config,
    with_overrides,
    worker_count,
)
from bpmpc_core.errors import ConfigError

from .conftest import config_path

SHIPPED = ["si_setup1", "si_setup2", "di_setup1", "di_setup2"]


def _doc(name="si_setup1"):
    with open(config_path(name), "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_load(name):
    cfg = load_config(config_path(name))
    assert cfg.name == name
    assert cfg.missions.m == 2
    assert cfg.solver.M == 10000
    assert cfg.u_hat is None
    assert cfg.x0.shape == (cfg.model.n_x,)


def test_double_integrator_defaults():
    cfg = load_config(config_path("di_setup1"))
    assert cfg.model.n_x == 4 and cfg.model.n_u == 2
    assert cfg.grid.state_resolution == DEFAULT_STATE_RESOLUTION_LARGE
    assert cfg.horizon == 10
    assert not cfg.enforce_certificate


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.json"))


def test_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_scalar_gamma_is_broadcast():
    doc = _doc()
    doc["stability"]["gamma"] = 0.3
    assert build_config(doc).gamma == (0.3, 0.3)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("plant"),
        lambda d: d["stability"].update(gamma=[0.1]),
        lambda d: d["stability"].update(delta=-1.0),
        lambda d: d["stability"].update(K=[[1, 0, 0]]),
        lambda d: d["stability"].update(u_hat=[5, 5]),
        lambda d: d["missions"].update(destinations=[[0, 0], [30, 0], [1, 5]]),
        lambda d: d["cost"].update(Q2=[[0, 0], [0, 0]]),
        lambda d: d["cost"].update(pairing="middle"),
        lambda d: d.update(x0=[1, 2, 3]),
        lambda d: d.update(horizon=1),
        lambda d: d["solver"].update(samples=0),
    ],
)
def test_invalid_documents(mutate):
    doc = copy.deepcopy(_doc())
    mutate(doc)
    with pytest.raises(ConfigError):
        build_config(doc)


def test_fixed_u_hat():
    doc = _doc()
    doc["stability"]["u_hat"] = [0.5, -0.5]
    assert_array_equal(build_config(doc).u_hat, [0.5, -0.5])


def test_overrides():
    cfg = load_config(config_path("si_setup1"))
    out = with_overrides(cfg, seed=9, samples=32, horizon=3)
    assert out.solver.base_seed == 9
    assert out.solver.M == 32
    assert out.horizon == 3
    assert cfg.solver.M == 10000
    with pytest.raises(ConfigError):
        with_overrides(cfg, horizon=1)


@pytest.mark.parametrize("changes", [{"samples": 0}, {"seed": -1}])
def test_invalid_solver_overrides(changes):
    with pytest.raises(ConfigError):
        with_overrides(load_config(config_path("si_setup1")), **changes)


def test_snapshot_reloads(tmp_path):
    cfg = with_overrides(load_config(config_path("di_setup2")), seed=4, samples=50)
    path = tmp_path / "snap.json"
    path.write_text(json.dumps(config_snapshot(cfg)), encoding="utf-8")
    again = load_config(str(path))
    assert config_snapshot(again) == config_snapshot(cfg)
    assert_array_equal(again.K, cfg.K)
    assert again.solver.base_seed == 4


def test_failure_config():
    cfg = load_config(config_path("si_setup1"))
    fcfg = FailureExperimentConfig.from_experiment(cfg, baseline_mode=True)
    assert fcfg.support == tuple(range(1, 21))
    assert fcfg.runs == 50 and fcfg.baseline_mode
    with pytest.raises(ConfigError):
        FailureExperimentConfig(cfg, (), 5, 1.0)
    with pytest.raises(ConfigError):
        FailureExperimentConfig(cfg, (1, 2), 0, 1.0)


def test_worker_count(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert worker_count() == 1
    monkeypatch.setenv(WORKERS_ENV, "4")
    assert worker_count() == 4
    for bad in ("zero", "0", "-2"):
        monkeypatch.setenv(WORKERS_ENV, bad)
        with pytest.raises(ConfigError):
            worker_count()


def test_config_arrays_are_floats():
    cfg = load_config(config_path("si_setup2"))
    assert cfg.K.dtype == np.float64
    assert cfg.x0.dtype == np.float64


def test_ball_outside_state_box_only_warns(caplog):
    doc = _doc()
    doc["stability"]["delta"] = 5.0
    with caplog.at_level("WARNING", logger="bpmpc_core.config"):
        cfg = build_config(doc)
    assert cfg.delta == 5.0
    assert "state box" in caplog.text

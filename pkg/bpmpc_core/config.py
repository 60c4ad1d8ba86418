from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import BpmpcError, ConfigError

logger = logging.getLogger(__name__)

if TYPE_CHECKING:
    from .certify import GridSpec
    from .mission import MissionSet, QuadraticCostSpec
    from .plant import PlantModel
    from .solver import SolverParams

DEFAULT_HORIZON = 10
DEFAULT_SAMPLES = 10000
DEFAULT_SIGMA = 1.0
DEFAULT_LAMBDA = 1.0
DEFAULT_SEED = 0
DEFAULT_STATE_PENALTY = 1e6
DEFAULT_CONTROL_COST = False
DEFAULT_PAIRING = "post"

DEFAULT_COMPLETION_TOL = 0.5
DEFAULT_MAX_STEPS = 100
DEFAULT_DIVERGENCE_STEPS = 10

DEFAULT_POST_FAILURE_STEPS = 100
DEFAULT_FAILURE_RUNS = 50
DEFAULT_FAILURE_SUPPORT = tuple(range(1, 21))

DEFAULT_INPUT_RESOLUTION = 21
DEFAULT_STATE_RESOLUTION_SMALL = 21
DEFAULT_STATE_RESOLUTION_LARGE = 9
DEFAULT_INCLUDE_ORIGIN = True
DEFAULT_BETA_MARGIN = 0.01

DEFAULT_BENCH_HORIZONS = (5, 10, 15, 20)
DEFAULT_BENCH_SAMPLES = (100, 1000, 10000)
DEFAULT_BENCH_REPEATS = 5

# 雜訊以每 64 個樣本為一區塊播種，平行排程不影響結果
NOISE_BLOCK = 64

DATA_DIR = "data"
LOG_FILE = "bpmpc.log"
WORKERS_ENV = "BPMPC_WORKERS"


def default_state_resolution(n_x: int) -> int:
    return DEFAULT_STATE_RESOLUTION_SMALL if n_x <= 2 else DEFAULT_STATE_RESOLUTION_LARGE


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"{WORKERS_ENV} 必須是正整數，收到 {raw!r}") from e
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} 必須是正整數，收到 {raw!r}")
    return n


@dataclass(frozen=True)
class FailureSettings:
    support: tuple[int, ...] = DEFAULT_FAILURE_SUPPORT
    runs: int = DEFAULT_FAILURE_RUNS
    budget: float = 0.0
    post_failure_steps: int = DEFAULT_POST_FAILURE_STEPS


@dataclass(frozen=True)
class BenchSettings:
    horizons: tuple[int, ...] = DEFAULT_BENCH_HORIZONS
    samples: tuple[int, ...] = DEFAULT_BENCH_SAMPLES
    repeats: int = DEFAULT_BENCH_REPEATS


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: "PlantModel"
    missions: "MissionSet"
    cost: "QuadraticCostSpec"
    delta: float
    gamma: tuple[float, ...]
    mu: float
    K: np.ndarray
    u_hat: np.ndarray | None
    solver: "SolverParams"
    horizon: int
    max_steps: int
    x0: np.ndarray
    grid: "GridSpec"
    enforce_certificate: bool = True
    divergence_steps: int = DEFAULT_DIVERGENCE_STEPS
    failure: FailureSettings = field(default_factory=FailureSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)


@dataclass(frozen=True)
class FailureExperimentConfig:
    base: ExperimentConfig
    support: tuple[int, ...]
    runs: int
    budget: float
    baseline_mode: bool = False

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ConfigError("failure.runs 必須 >= 1")
        if not self.support:
            raise ConfigError("failure.support 不可為空")
        if any(t < 0 for t in self.support):
            raise ConfigError("failure.support 只能包含非負整數")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig, *, baseline_mode: bool = False) -> "FailureExperimentConfig":
        f = cfg.failure
        return cls(cfg, tuple(f.support), f.runs, f.budget, baseline_mode)


def _section(doc: dict, key: str, *, required: bool = True) -> dict:
    value = doc.get(key)
    if value is None:
        if required:
            raise ConfigError(f"設定檔缺少區段: {key}")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"設定區段 {key} 必須是物件")
    return value


def _require(sec: dict, key: str, where: str) -> Any:
    if key not in sec:
        raise ConfigError(f"設定檔缺少欄位: {where}.{key}")
    return sec[key]


def _box(raw: Any, where: str):
    from .plant import BoxSet

    if isinstance(raw, dict):
        return BoxSet(_require(raw, "lower", where), _require(raw, "upper", where))
    if isinstance(raw, (list, tuple)) and len(raw) == 2:
        return BoxSet(raw[0], raw[1])
    raise ConfigError(f"{where} 必須是 {{lower, upper}} 或 [lower, upper]")


def build_config(doc: dict, *, name: str | None = None) -> ExperimentConfig:
    """由已解析的 JSON 物件建立 ExperimentConfig，任何不一致皆轉成 ConfigError。"""
    from .certify import GridSpec
    from .mission import MissionSet, QuadraticCostSpec
    from .plant import LinearDynamics, PlantModel, contains
    from .solver import SolverParams

    if not isinstance(doc, dict):
        raise ConfigError("設定檔頂層必須是物件")
    try:
        plant = _section(doc, "plant")
        model = PlantModel(
            LinearDynamics(_require(plant, "A", "plant"), _require(plant, "B", "plant")),
            _box(_require(plant, "state_box", "plant"), "plant.state_box"),
            _box(_require(plant, "input_box", "plant"), "plant.input_box"),
        )

        ms = _section(doc, "missions")
        missions = MissionSet(
            _require(ms, "destinations", "missions"),
            float(ms.get("completion_tol", DEFAULT_COMPLETION_TOL)),
        )
        if missions.destinations.shape[1] != model.n_x:
            raise ConfigError(f"目的地維度 {missions.destinations.shape[1]} 與 n_x={model.n_x} 不符")
        for i, p in enumerate(missions.destinations):
            if not contains(model.state_box, p):
                raise ConfigError(f"目的地 p{i}={p.tolist()} 不在 state box 內")

        cs = _section(doc, "cost")
        cost = QuadraticCostSpec(
            _require(cs, "Q1", "cost"),
            _require(cs, "Q2", "cost"),
            _require(cs, "R", "cost"),
            cs.get("pairing", DEFAULT_PAIRING),
        )
        if cost.n_x != model.n_x or cost.n_u != model.n_u:
            raise ConfigError(f"成本矩陣維度 (n_x={cost.n_x}, n_u={cost.n_u}) 與 plant 不符")

        st = _section(doc, "stability")
        gamma_raw = _require(st, "gamma", "stability")
        if np.isscalar(gamma_raw):
            gamma = (float(gamma_raw),) * missions.m
        else:
            gamma = tuple(float(g) for g in gamma_raw)
        if len(gamma) != missions.m:
            raise ConfigError(f"stability.gamma 長度 {len(gamma)} 與備援數 m={missions.m} 不符")
        K = np.array(_require(st, "K", "stability"), dtype=float, ndmin=2)
        if K.shape != (model.n_u, model.n_x):
            raise ConfigError(f"stability.K 應為 {(model.n_u, model.n_x)}，收到 {K.shape}")
        u_hat_raw = st.get("u_hat", "compute")
        u_hat = None if u_hat_raw == "compute" else np.asarray(u_hat_raw, dtype=float)
        if u_hat is not None and not contains(model.input_box, u_hat):
            raise ConfigError(f"stability.u_hat={u_hat.tolist()} 不在 input box 內")

        sv = _section(doc, "solver", required=False)
        sigma = sv.get("sigma", DEFAULT_SIGMA)
        solver = SolverParams(
            M=int(sv.get("samples", DEFAULT_SAMPLES)),
            sigma=np.broadcast_to(np.asarray(sigma, dtype=float), (model.n_u,)),
            lambda_=float(sv.get("lambda", DEFAULT_LAMBDA)),
            base_seed=int(sv.get("seed", DEFAULT_SEED)),
            state_penalty=float(sv.get("state_penalty", DEFAULT_STATE_PENALTY)),
            control_cost=bool(sv.get("control_cost", DEFAULT_CONTROL_COST)),
        )

        gs = _section(doc, "grid", required=False)
        grid = GridSpec(
            input_resolution=int(gs.get("input_resolution", DEFAULT_INPUT_RESOLUTION)),
            state_resolution=int(gs.get("state_resolution") or default_state_resolution(model.n_x)),
            include_origin=bool(gs.get("include_origin", DEFAULT_INCLUDE_ORIGIN)),
        )

        x0 = np.asarray(_require(doc, "x0", "<root>"), dtype=float)
        if x0.shape != (model.n_x,):
            raise ConfigError(f"x0 維度 {x0.shape} 與 n_x={model.n_x} 不符")

        fs = _section(doc, "failure", required=False)
        failure = FailureSettings(
            support=tuple(int(t) for t in fs.get("support", DEFAULT_FAILURE_SUPPORT)),
            runs=int(fs.get("runs", DEFAULT_FAILURE_RUNS)),
            budget=float(fs.get("budget", 0.0)),
            post_failure_steps=int(fs.get("post_failure_steps", DEFAULT_POST_FAILURE_STEPS)),
        )
        bs = _section(doc, "bench", required=False)
        bench = BenchSettings(
            horizons=tuple(int(n) for n in bs.get("horizons", DEFAULT_BENCH_HORIZONS)),
            samples=tuple(int(m) for m in bs.get("samples", DEFAULT_BENCH_SAMPLES)),
            repeats=int(bs.get("repeats", DEFAULT_BENCH_REPEATS)),
        )

        cfg = ExperimentConfig(
            name=str(doc.get("name") or name or "experiment"),
            model=model,
            missions=missions,
            cost=cost,
            delta=float(_require(st, "delta", "stability")),
            gamma=gamma,
            mu=float(_require(st, "mu", "stability")),
            K=K,
            u_hat=u_hat,
            solver=solver,
            horizon=int(doc.get("horizon", DEFAULT_HORIZON)),
            max_steps=int(doc.get("max_steps", DEFAULT_MAX_STEPS)),
            x0=x0,
            grid=grid,
            enforce_certificate=bool(_section(doc, "certify", required=False).get("enforce", True)),
            divergence_steps=int(doc.get("divergence_steps", DEFAULT_DIVERGENCE_STEPS)),
            failure=failure,
            bench=bench,
        )
    except ConfigError:
        raise
    except (BpmpcError, ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"設定內容無效: {e}") from e

    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.delta <= 0 or cfg.mu <= 0:
        raise ConfigError("stability.delta 與 stability.mu 必須為正")
    if any(g < 0 for g in cfg.gamma):
        raise ConfigError("stability.gamma 不可為負")
    if cfg.horizon < 1 or (cfg.missions.m >= 1 and cfg.horizon < 2):
        raise ConfigError(f"horizon={cfg.horizon} 無效（有備援目的地時需 >= 2）")
    if cfg.max_steps < 1:
        raise ConfigError("max_steps 必須 >= 1")
    lower, upper = cfg.model.state_box.lower, cfg.model.state_box.upper
    p0 = cfg.missions.primary
    # B_δ 超出 state box 只警告：X∖B_δ 的網格仍有定義
    if np.any(p0 - cfg.delta < lower) or np.any(p0 + cfg.delta > upper):
        logger.warning(f"B_δ（δ={cfg.delta}）不完全落在 state box 內")


def load_config(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"找不到設定檔: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定檔不是合法 JSON: {path} | {e}") from e
    name = os.path.splitext(os.path.basename(path))[0]
    return build_config(doc, name=name)


def with_overrides(
    cfg: ExperimentConfig,
    *,
    seed: int | None = None,
    samples: int | None = None,
    horizon: int | None = None,
) -> ExperimentConfig:
    solver = cfg.solver
    try:
        if seed is not None:
            solver = replace(solver, base_seed=int(seed))
        if samples is not None:
            solver = replace(solver, M=int(samples))
    except ValueError as e:
        raise ConfigError(f"CLI 覆寫無效: {e}") from e
    out = replace(cfg, solver=solver)
    if horizon is not None:
        out = replace(out, horizon=int(horizon))
        _validate(out)
    return out


def config_snapshot(cfg: ExperimentConfig) -> dict:
    """實際使用的設定（含 CLI 覆寫），格式與設定檔相同，可直接再載入。"""
    m = cfg.model
    s = cfg.solver
    return {
        "name": cfg.name,
        "plant": {
            "A": np.asarray(m.dynamics.A).tolist(),
            "B": np.asarray(m.dynamics.B).tolist(),
            "state_box": {"lower": m.state_box.lower.tolist(), "upper": m.state_box.upper.tolist()},
            "input_box": {"lower": m.input_box.lower.tolist(), "upper": m.input_box.upper.tolist()},
        },
        "missions": {
            "destinations": cfg.missions.destinations.tolist(),
            "completion_tol": cfg.missions.completion_tol,
        },
        "cost": {
            "Q1": cfg.cost.Q1.tolist(),
            "Q2": cfg.cost.Q2.tolist(),
            "R": cfg.cost.R.tolist(),
            "pairing": cfg.cost.pairing,
        },
        "stability": {
            "delta": cfg.delta,
            "gamma": list(cfg.gamma),
            "mu": cfg.mu,
            "K": cfg.K.tolist(),
            "u_hat": "compute" if cfg.u_hat is None else cfg.u_hat.tolist(),
        },
        "solver": {
            "samples": s.M,
            "sigma": np.asarray(s.sigma).tolist(),
            "lambda": s.lambda_,
            "seed": s.base_seed,
            "state_penalty": s.state_penalty,
            "control_cost": s.control_cost,
        },
        "horizon": cfg.horizon,
        "max_steps": cfg.max_steps,
        "divergence_steps": cfg.divergence_steps,
        "x0": cfg.x0.tolist(),
        "grid": {
            "input_resolution": cfg.grid.input_resolution,
            "state_resolution": cfg.grid.state_resolution,
            "include_origin": cfg.grid.include_origin,
        },
        "certify": {"enforce": cfg.enforce_certificate},
        "failure": {
            "support": list(cfg.failure.support),
            "runs": cfg.failure.runs,
            "budget": cfg.failure.budget,
            "post_failure_steps": cfg.failure.post_failure_steps,
        },
        "bench": {
            "horizons": list(cfg.bench.horizons),
            "samples": list(cfg.bench.samples),
            "repeats": cfg.bench.repeats,
        },
    }

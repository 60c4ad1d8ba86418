from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .certify import Certificate, StabilityParams, certify, compute_uhat_P, search_params
from .config import ExperimentConfig, FailureExperimentConfig
from .controller import ControllerDeps, StepRecord, controller_step, initialize
from .errors import CertificationError, DivergenceError
from .mission import MissionSet, distance, mission_completed, nearest_destination, spec_for
from .plant import contains, step

logger = logging.getLogger(__name__)

FAILURE_SALT = 7
# α*ᵀJ(U*) <= α*ᵀJ(U_s) 的步數比例下限，低於此值只警告
DOMINANCE_FLOOR = 0.95
ARMS = ("proposed", "baseline")
FAILURE_METRICS = (
    "failure_time",
    "distance_at_failure",
    "energy_before_failure",
    "energy_after_failure",
    "total_energy",
    "remaining_energy",
)


@dataclass
class ClosedLoopResult:
    records: list[StepRecord]
    final_x: np.ndarray
    reached: bool
    certificate: Certificate | None
    summary: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FailureRunSummary:
    arm: str
    run: int
    seed: int
    failure_time: int
    nearest_destination: int
    distance_at_failure: float
    energy_before_failure: float
    energy_after_failure: float
    total_energy: float
    remaining_energy: float
    reached: bool


@dataclass
class FailureResult:
    rows: list[FailureRunSummary]
    aggregates: dict
    margins: dict


def resolve_stability(cfg: ExperimentConfig) -> StabilityParams:
    """u_hat 設為 "compute" 時以網格搜尋 û。"""
    u_hat = cfg.u_hat
    if u_hat is None:
        u_hat, P = compute_uhat_P(cfg.model, cfg.cost, cfg.missions, cfg.grid)
        logger.info(f"û 由網格計算: {u_hat.tolist()}（P={P:.6g}）")
    return StabilityParams(cfg.delta, cfg.gamma, cfg.mu, cfg.K, u_hat)


def run_certify(cfg: ExperimentConfig, params: StabilityParams | None = None) -> Certificate:
    params = params or resolve_stability(cfg)
    return certify(cfg.model, cfg.cost, cfg.missions, params, cfg.grid)


def run_search_params(cfg: ExperimentConfig, margin: float) -> tuple[StabilityParams, Certificate]:
    params = search_params(cfg.model, cfg.cost, cfg.missions, cfg.delta, cfg.K, cfg.grid, margin)
    return params, run_certify(cfg, params)


def single_objective(missions: MissionSet, target: int) -> MissionSet:
    """只保留一個目的地（m = 0）的任務集合。"""
    return MissionSet(missions.destinations[target : target + 1], missions.completion_tol)


def _deps(cfg: ExperimentConfig, params: StabilityParams, workers: int, *, target: int | None = None) -> ControllerDeps:
    if target is None:
        return ControllerDeps(cfg.model, cfg.cost, cfg.missions, params, cfg.solver, workers)
    missions = single_objective(cfg.missions, target)
    single = replace(params, gamma=())
    return ControllerDeps(cfg.model, spec_for(cfg.cost, target), missions, single, cfg.solver, workers)


def _fly(
    deps: ControllerDeps,
    x0: np.ndarray,
    horizon: int,
    max_steps: int,
    divergence_steps: int,
    *,
    require_in_box: bool = True,
) -> tuple[list[StepRecord], np.ndarray, bool]:
    """執行 controller_step 直到抵達 p⁰ 或步數上限，回傳 (紀錄, 最終狀態, 是否抵達)。"""
    model, missions = deps.model, deps.missions
    state = initialize(model, missions, deps.params, deps.solver, x0, horizon, require_in_box=require_in_box)
    x = np.asarray(x0, dtype=float)
    records: list[StepRecord] = []
    outside = 0
    for _ in range(max_steps):
        if mission_completed(missions, 0, x):
            break
        u, state, record = controller_step(state, x, deps)
        records.append(record)
        x = step(model, x, u)
        outside = 0 if contains(model.state_box, x) else outside + 1
        if outside > divergence_steps:
            raise DivergenceError(f"狀態連續 {outside} 步離開 state box，最後狀態 {x.tolist()}")
    return records, x, mission_completed(missions, 0, x)


def _energy(records: list[StepRecord]) -> float:
    return float(sum(float(r.u_star @ r.u_star) for r in records))


def trajectory_summary(cfg: ExperimentConfig, records: list[StepRecord], final_x: np.ndarray, reached: bool) -> dict:
    missions = cfg.missions
    visited = np.array([r.x for r in records] + [final_x])
    alts = missions.destinations[1:]
    dist_alt = (
        np.linalg.norm(visited[:, None, :] - alts[None, :, :], axis=-1) if missions.m else np.zeros((len(visited), 0))
    )
    phases = [r.phase for r in records]
    dominated = sum(1 for r in records if r.value <= r.value_candidate)
    increases = sum(1 for a, b in zip(records, records[1:]) if b.value > a.value)
    return {
        "steps": len(records),
        "reached": bool(reached),
        "final_x": final_x.tolist(),
        "final_distance": distance(final_x, missions.primary),
        "phase_switch_step": phases.index(2) if 2 in phases else None,
        "min_distance_to_alternatives": dist_alt.min(axis=0).tolist() if missions.m else [],
        "mean_distance_to_nearest_alternative": float(dist_alt.min(axis=1).mean()) if missions.m else None,
        "candidate_dominance_fraction": dominated / len(records) if records else None,
        "value_increase_count": increases,
        "energy": _energy(records),
    }


def run_closed_loop(
    cfg: ExperimentConfig,
    *,
    force: bool = False,
    baseline: bool = False,
    workers: int = 1,
    params: StabilityParams | None = None,
) -> ClosedLoopResult:
    """閉迴路模擬；baseline=True 時為只考慮 p⁰ 的單目標控制器（γ = 0, m = 0）。"""
    params = params or resolve_stability(cfg)
    cert = None
    if baseline:
        deps = _deps(cfg, params, workers, target=0)
        label = "baseline"
    else:
        cert = run_certify(cfg, params)
        if not cert.ok:
            msg = f"穩定性驗證未通過: {', '.join(cert.findings)}"
            if cfg.enforce_certificate and not force:
                raise CertificationError(msg)
            logger.warning(f"{msg}（未經驗證繼續執行）")
        deps = _deps(cfg, params, workers)
        label = "proposed"

    logger.info(f"[{label}] 閉迴路模擬開始: x0={cfg.x0.tolist()}, N={cfg.horizon}, M={cfg.solver.M}")
    records, final_x, reached = _fly(deps, cfg.x0, cfg.horizon, cfg.max_steps, cfg.divergence_steps)
    result = ClosedLoopResult(records, final_x, reached, cert)
    result.summary = trajectory_summary(cfg, records, final_x, reached)
    logger.info(
        f"[{label}] 模擬結束: steps={len(records)}, reached={reached}, "
        f"|x-p0|={result.summary['final_distance']:.4g}, energy={result.summary['energy']:.4g}"
    )
    dominance = result.summary["candidate_dominance_fraction"]
    if dominance is not None and dominance < DOMINANCE_FLOOR:
        logger.warning(
            f"[{label}] U* 不劣於 U_s 的步數比例 {dominance:.2%} 低於 {DOMINANCE_FLOOR:.0%}，"
            f"請檢查 state_penalty 或 sigma"
        )
    return result


def _run_seed(base_seed: int, run: int) -> int:
    return int(np.random.SeedSequence([base_seed, FAILURE_SALT, run]).generate_state(1)[0])


def _failure_time(base_seed: int, run: int, support: tuple[int, ...]) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, FAILURE_SALT, run, 1]))
    return int(rng.choice(np.asarray(support)))


def _one_failure_run(fcfg: FailureExperimentConfig, params: StabilityParams, run: int) -> FailureRunSummary:
    cfg = fcfg.base
    arm = "baseline" if fcfg.baseline_mode else "proposed"
    seed = _run_seed(cfg.solver.base_seed, run)
    T = _failure_time(cfg.solver.base_seed, run, fcfg.support)
    pre_cfg = replace(cfg, solver=replace(cfg.solver, base_seed=seed))
    deps = _deps(pre_cfg, params, 1, target=0 if fcfg.baseline_mode else None)

    before, x_fail, _ = _fly(deps, cfg.x0, cfg.horizon, T, cfg.divergence_steps)
    target = nearest_destination(cfg.missions, x_fail)
    d_fail = distance(x_fail, cfg.missions.destinations[target])

    # 故障後：以同樣的 N 從 x_fail 飛往最近的目的地，x_fail 可能已越界
    post_cfg = replace(cfg, solver=replace(cfg.solver, base_seed=seed + 1))
    post_deps = _deps(post_cfg, params, 1, target=target)
    after, _, reached = _fly(
        post_deps, x_fail, cfg.horizon, cfg.failure.post_failure_steps, cfg.divergence_steps, require_in_box=False
    )

    e_before = _energy(before)
    e_after = _energy(after)
    row = FailureRunSummary(
        arm=arm,
        run=run,
        seed=seed,
        failure_time=T,
        nearest_destination=target,
        distance_at_failure=float(d_fail),
        energy_before_failure=e_before,
        energy_after_failure=e_after,
        total_energy=e_before + e_after,
        remaining_energy=fcfg.budget - e_before,
        reached=bool(reached),
    )
    logger.info(
        f"[{arm}] run {run}: T={T}, 目的地 p{target}, 距離={d_fail:.4g}, "
        f"故障後能量={e_after:.4g}, 總能量={row.total_energy:.4g}"
    )
    return row


def aggregate_rows(rows: list[FailureRunSummary]) -> dict:
    """各指標的平均與樣本標準差（n=1 時為 0）。"""
    out = {}
    for metric in FAILURE_METRICS:
        values = np.array([float(getattr(r, metric)) for r in rows])
        out[metric] = {
            "mean": float(values.mean()),
            "stdev": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        }
    out["reached_fraction"] = sum(r.reached for r in rows) / len(rows)
    return out


def margin_at_failure(aggregates: dict) -> float:
    """平均剩餘能量 / 平均故障後能量。"""
    after = aggregates["energy_after_failure"]["mean"]
    remaining = aggregates["remaining_energy"]["mean"]
    if after == 0:
        return float("inf")
    return remaining / after


def run_failure_experiment(
    fcfg: FailureExperimentConfig,
    *,
    workers: int = 1,
    params: StabilityParams | None = None,
) -> FailureResult:
    params = params or resolve_stability(fcfg.base)
    arm = "baseline" if fcfg.baseline_mode else "proposed"
    logger.info(f"[{arm}] 隨機故障測試: runs={fcfg.runs}, support={min(fcfg.support)}..{max(fcfg.support)}")

    def task(run: int) -> FailureRunSummary:
        return _one_failure_run(fcfg, params, run)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(task, range(fcfg.runs)))
    else:
        rows = [task(r) for r in range(fcfg.runs)]

    aggregates = aggregate_rows(rows)
    margin = margin_at_failure(aggregates)
    logger.info(
        f"[{arm}] 故障後平均能量={aggregates['energy_after_failure']['mean']:.4g}, margin={margin:.4g}"
    )
    return FailureResult(rows, {arm: aggregates}, {arm: margin})


def run_failure_comparison(cfg: ExperimentConfig, *, force: bool = False, workers: int = 1) -> FailureResult:
    """同一組種子與故障時間下比較 proposed 與 baseline。"""
    params = resolve_stability(cfg)
    cert = run_certify(cfg, params)
    if not cert.ok:
        msg = f"穩定性驗證未通過: {', '.join(cert.findings)}"
        if cfg.enforce_certificate and not force:
            raise CertificationError(msg)
        logger.warning(f"{msg}（未經驗證繼續執行）")
    rows: list[FailureRunSummary] = []
    aggregates: dict = {}
    margins: dict = {}
    for baseline_mode in (False, True):
        fcfg = FailureExperimentConfig.from_experiment(cfg, baseline_mode=baseline_mode)
        res = run_failure_experiment(fcfg, workers=workers, params=params)
        rows.extend(res.rows)
        aggregates.update(res.aggregates)
        margins.update(res.margins)
    return FailureResult(rows, aggregates, margins)


def bench(
    cfg: ExperimentConfig,
    horizons,
    samples,
    *,
    repeats: int | None = None,
    workers: int = 1,
) -> list[dict]:
    """各 (N, M) 組合下從 x0 重複求解一步，記錄求解頻率與 α*ᵀJ 的平均/標準差。"""
    horizons = list(horizons)
    samples = list(samples)
    if not horizons or not samples:
        raise ValueError("bench 的 horizons 與 samples 不可為空")
    repeats = repeats or cfg.bench.repeats
    params = resolve_stability(cfg)
    rows = []
    for N in horizons:
        for M in samples:
            run_cfg = replace(cfg, horizon=int(N), solver=replace(cfg.solver, M=int(M)))
            deps = _deps(run_cfg, params, workers)
            state0 = initialize(run_cfg.model, run_cfg.missions, params, run_cfg.solver, run_cfg.x0, run_cfg.horizon)
            seconds = []
            values = []
            for r in range(repeats):
                state = replace(state0, step_index=r)
                t0 = time.perf_counter()
                _, _, record = controller_step(state, run_cfg.x0, deps)
                seconds.append(time.perf_counter() - t0)
                values.append(record.value)
            mean_s = float(np.mean(seconds))
            row = {
                "horizon": int(N),
                "samples": int(M),
                "control_frequency_hz": 1.0 / mean_s if mean_s > 0 else float("inf"),
                "mean_solve_seconds": mean_s,
                "cost_mean": float(np.mean(values)),
                "cost_stdev": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            }
            logger.info(
                f"bench N={N}, M={M}: {row['control_frequency_hz']:.2f} Hz, cost={row['cost_mean']:.4g}±{row['cost_stdev']:.3g}"
            )
            rows.append(row)
    return rows

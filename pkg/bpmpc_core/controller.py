from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .certify import StabilityParams, alpha_baseline, alpha_transitional, primary_weight
from .errors import ConfigError, DimensionError, NonFiniteError
from .mission import CostSpecSet, MissionSet, distance, vector_cost
from .multihorizon import MultiHorizonInput, shift
from .plant import PlantModel, clamp, contains, rollout
from .solver import SolverParams, solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerState:
    alpha_prev: np.ndarray
    U_prev: MultiHorizonInput
    latched: bool
    step_index: int
    x_prev: np.ndarray


@dataclass(frozen=True)
class StepRecord:
    x: np.ndarray
    alpha_star: np.ndarray
    u_star: np.ndarray
    value: float
    value_candidate: float
    phase: int
    x_kf: np.ndarray
    in_ball_x: bool
    in_ball_xkf: bool


@dataclass(frozen=True)
class ControllerDeps:
    model: PlantModel
    spec_set: CostSpecSet
    missions: MissionSet
    params: StabilityParams
    solver: SolverParams
    workers: int = 1


def in_ball(missions: MissionSet, delta: float, x) -> bool:
    """B_δ 為以 p⁰ 為中心的開球。"""
    return bool(distance(x, missions.primary) < delta)


def value(alpha, J) -> float:
    alpha = np.asarray(alpha, dtype=float)
    J = np.asarray(J, dtype=float)
    if alpha.shape != J.shape or alpha.ndim != 1:
        raise DimensionError(f"α {alpha.shape} 與 J {J.shape} 長度不一致")
    return float(alpha @ J)


def initialize(
    model: PlantModel,
    missions: MissionSet,
    params: StabilityParams,
    solver_params: SolverParams,
    x0,
    horizon: int,
    *,
    require_in_box: bool = True,
) -> ControllerState:
    """require_in_box=False 時（例如故障後從當下狀態接手）越界只記錄警告。"""
    x0 = np.asarray(x0, dtype=float)
    if not contains(model.state_box, x0):
        if require_in_box:
            raise ConfigError(f"x0={x0.tolist()} 不在 state box 內")
        logger.warning(f"起始狀態 {x0.tolist()} 超出 state box，仍從此狀態開始")
    u_hat = clamp(model.input_box, params.u_hat)
    U_prev = MultiHorizonInput.constant(horizon, missions.m, u_hat)
    latched = in_ball(missions, params.delta, x0)
    alpha_prev = primary_weight(missions.m) if latched else alpha_baseline(params, missions, x0)
    return ControllerState(alpha_prev, U_prev, latched, 0, x0)


def controller_step(
    state: ControllerState,
    x_k,
    deps: ControllerDeps,
) -> tuple[np.ndarray, ControllerState, StepRecord]:
    model, spec_set, missions, params = deps.model, deps.spec_set, deps.missions, deps.params
    x_k = np.asarray(x_k, dtype=float)
    k = state.step_index
    if not contains(model.state_box, x_k):
        logger.warning(f"step {k}: 狀態 {x_k.tolist()} 超出 state box")

    def run_3m(alpha: np.ndarray, U_s: MultiHorizonInput, salt: int) -> MultiHorizonInput:
        return solve(
            model, spec_set, missions, x_k, alpha, U_s, deps.solver,
            step_index=k, salt=salt, workers=deps.workers,
        )

    e0 = primary_weight(missions.m)
    U_s = shift(state.U_prev, model, state.x_prev, params.K, params.u_hat, origin=missions.primary)
    J_s = vector_cost(model, spec_set, missions, x_k, U_s)
    in_ball_x = in_ball(missions, params.delta, x_k)

    if state.latched or in_ball_x:
        latched = True
        alpha_star = e0
        U_star = run_3m(e0, U_s, 0)
        x_kf = rollout(model, x_k, U_star.primary)[-1]
        in_ball_xkf = in_ball(missions, params.delta, x_kf)
    else:
        alpha_b = alpha_baseline(params, missions, x_k)
        alpha_t = alpha_transitional(alpha_b, state.alpha_prev, J_s)
        U_t = run_3m(alpha_t, U_s, 0)
        x_kf = rollout(model, x_k, U_t.primary)[-1]
        in_ball_xkf = in_ball(missions, params.delta, x_kf)
        if in_ball_xkf:
            # 預測終點已進入 B_δ：改用 e₀ 以同一個 U_s 重新求解
            latched = True
            alpha_star = e0
            U_star = run_3m(e0, U_s, 1)
        else:
            latched = False
            alpha_star = alpha_t
            U_star = U_t

    if latched and not state.latched:
        logger.info(f"step {k}: 進入 phase 2（in_ball_x={in_ball_x}, in_ball_xkf={in_ball_xkf}）")

    u_star = U_star.primary[0].copy()
    J_star = vector_cost(model, spec_set, missions, x_k, U_star)
    V = value(alpha_star, J_star)
    V_candidate = value(alpha_star, J_s)
    if not (np.all(np.isfinite(u_star)) and np.isfinite(V)):
        raise NonFiniteError(f"step {k}: 控制輸入或價值函數出現非有限值")

    phase = 2 if latched else 1
    record = StepRecord(
        x=x_k.copy(),
        alpha_star=np.array(alpha_star, dtype=float),
        u_star=u_star,
        value=V,
        value_candidate=V_candidate,
        phase=phase,
        x_kf=np.asarray(x_kf, dtype=float),
        in_ball_x=in_ball_x,
        in_ball_xkf=in_ball_xkf,
    )
    logger.debug(
        f"step {k}: phase={phase}, V={V:.6g}, V_s={V_candidate:.6g}, |x-p0|={distance(x_k, missions.primary):.4g}"
    )
    new_state = ControllerState(record.alpha_star, U_star, latched, k + 1, x_k.copy())
    return u_star, new_state, record

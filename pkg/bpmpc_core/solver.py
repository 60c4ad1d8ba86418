"""多時域多目標 MPPI（3M）求解器。

對 U_s 的所有獨立元素加高斯擾動，以 αᵀJ 評分，再用 Gibbs（softmin）權重合成。
雜訊以 NOISE_BLOCK 個樣本為一區塊，由 (base_seed, step_index, salt, block) 播種，
因此結果與工作執行緒數量無關。
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import DEFAULT_CONTROL_COST, DEFAULT_STATE_PENALTY, NOISE_BLOCK
from .errors import DimensionError, NonFiniteError
from .mission import CostSpecSet, MissionSet, vector_cost_batch
from .multihorizon import HorizonShape, MultiHorizonInput, flatten, rollout_batch, unflatten
from .plant import PlantModel, violation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverParams:
    M: int
    sigma: np.ndarray
    lambda_: float
    base_seed: int
    state_penalty: float = DEFAULT_STATE_PENALTY
    control_cost: bool = DEFAULT_CONTROL_COST

    def __post_init__(self) -> None:
        sigma = np.array(self.sigma, dtype=float, ndmin=1)
        if self.M < 1:
            raise ValueError(f"樣本數 M 必須 >= 1，收到 {self.M}")
        if np.any(sigma <= 0):
            raise ValueError(f"sigma 必須全為正，收到 {sigma.tolist()}")
        if self.lambda_ <= 0:
            raise ValueError(f"lambda 必須為正，收到 {self.lambda_}")
        if self.state_penalty < 0:
            raise ValueError("state_penalty 不可為負")
        if self.base_seed < 0:
            raise ValueError("base_seed 不可為負")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class SampleEvaluation:
    sample_index: int
    weighted_cost: float
    gibbs_weight: float


@dataclass(frozen=True)
class SolveResult:
    U: MultiHorizonInput
    costs: np.ndarray
    weights: np.ndarray

    def evaluations(self) -> Iterator[SampleEvaluation]:
        for q, (c, w) in enumerate(zip(self.costs, self.weights), start=1):
            yield SampleEvaluation(q, float(c), float(w))


def _channel_scale(params: SolverParams, shape: HorizonShape) -> np.ndarray:
    if params.sigma.shape != (shape.n_u,):
        raise DimensionError(f"sigma 長度 {params.sigma.shape[0]} 與 n_u={shape.n_u} 不符")
    # 攤平向量中每個元素的通道為 index % n_u
    return np.tile(params.sigma, shape.dof // shape.n_u)


def noise_block(params: SolverParams, shape: HorizonShape, step_index: int, salt: int, block: int) -> np.ndarray:
    """第 block 個區塊的雜訊 (NOISE_BLOCK, dof)，列 r 對應樣本 q = block·NOISE_BLOCK + r + 1。"""
    seq = np.random.SeedSequence([params.base_seed, step_index, salt, block])
    rng = np.random.default_rng(seq)
    return rng.standard_normal((NOISE_BLOCK, shape.dof)) * _channel_scale(params, shape)


def sample_noise(params: SolverParams, shape: HorizonShape, q: int, step_index: int = 0, salt: int = 0) -> np.ndarray:
    if not 1 <= q <= params.M:
        raise ValueError(f"樣本索引 q={q} 超出 1..{params.M}")
    block, row = divmod(q - 1, NOISE_BLOCK)
    return noise_block(params, shape, step_index, salt, block)[row]


def _clamp_flat(model: PlantModel, shape: HorizonShape, flat: np.ndarray) -> np.ndarray:
    per_input = flat.reshape(*flat.shape[:-1], shape.dof // shape.n_u, shape.n_u)
    return np.clip(per_input, model.input_box.lower, model.input_box.upper).reshape(flat.shape)


def evaluate_batch(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    x,
    alpha,
    shape: HorizonShape,
    flat_inputs: np.ndarray,
    state_penalty: float = DEFAULT_STATE_PENALTY,
) -> np.ndarray:
    """批次評估 (B, dof) 的輸入，回傳 αᵀJ + 狀態越界懲罰 (B,)；輸入先裁切到 input box。"""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (missions.m + 1,):
        raise DimensionError(f"α 長度 {alpha.shape} 與 m+1={missions.m + 1} 不符")
    clamped = _clamp_flat(model, shape, np.atleast_2d(flat_inputs))
    primary, tails_by_p = shape.split(clamped)
    states, branches = rollout_batch(model, x, primary, tails_by_p)
    J = vector_cost_batch(spec_set, missions, primary, tails_by_p, states, branches)
    costs = J @ alpha
    if state_penalty:
        over = violation(model.state_box, states[:, 1:]).sum(axis=1)
        for b in branches:
            over = over + violation(model.state_box, b).sum(axis=(1, 2))
        costs = costs + state_penalty * over
    return costs


def evaluate_sample(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    x,
    alpha,
    U_s: MultiHorizonInput,
    noise,
    state_penalty: float = DEFAULT_STATE_PENALTY,
) -> float:
    flat = flatten(U_s) + np.asarray(noise, dtype=float)
    return float(evaluate_batch(model, spec_set, missions, x, alpha, U_s.shape, flat[None, :], state_penalty)[0])


def gibbs_weights(costs, lambda_: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 1 or costs.size < 1:
        raise DimensionError(f"costs 必須是非空一維陣列，收到 {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise NonFiniteError(f"樣本成本出現非有限值（{int(np.sum(~np.isfinite(costs)))} 筆）")
    w = np.exp(-(costs - costs.min()) / lambda_)
    return w / w.sum()


def solve_detailed(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    x,
    alpha,
    U_s: MultiHorizonInput,
    params: SolverParams,
    *,
    step_index: int = 0,
    salt: int = 0,
    workers: int = 1,
) -> SolveResult:
    shape = U_s.shape
    if shape.m != missions.m:
        raise DimensionError(f"U_s 的 m={shape.m} 與任務數 m={missions.m} 不符")
    mean = flatten(U_s)
    n_blocks = -(-params.M // NOISE_BLOCK)
    control_weight = params.lambda_ * mean / _channel_scale(params, shape) ** 2 if params.control_cost else None

    def run_block(block: int) -> tuple[np.ndarray, np.ndarray]:
        eps = noise_block(params, shape, step_index, salt, block)
        eps = eps[: min(NOISE_BLOCK, params.M - block * NOISE_BLOCK)]
        c = evaluate_batch(model, spec_set, missions, x, alpha, shape, mean + eps, params.state_penalty)
        if control_weight is not None:
            c = c + eps @ control_weight
        return eps, c

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_block, range(n_blocks)))
    else:
        results = [run_block(b) for b in range(n_blocks)]

    noise = np.concatenate([r[0] for r in results], axis=0)
    costs = np.concatenate([r[1] for r in results])
    weights = gibbs_weights(costs, params.lambda_)
    # 加權和固定依樣本順序計算，擾動用裁切前的雜訊
    update = mean + weights @ noise
    U = unflatten(shape, _clamp_flat(model, shape, update))
    logger.debug(
        f"3M step={step_index} salt={salt}: M={params.M}, min cost={costs.min():.6g}, "
        f"有效樣本數={1.0 / float(np.sum(weights ** 2)):.1f}"
    )
    return SolveResult(U, costs, weights)


def solve(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    x,
    alpha,
    U_s: MultiHorizonInput,
    params: SolverParams,
    *,
    step_index: int = 0,
    salt: int = 0,
    workers: int = 1,
) -> MultiHorizonInput:
    return solve_detailed(
        model, spec_set, missions, x, alpha, U_s, params, step_index=step_index, salt=salt, workers=workers
    ).U

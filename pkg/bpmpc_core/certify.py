"""權重向量 α_b / α_t 與穩定性參數的網格驗證。

所有 min/max 都在有限網格上近似，Certificate 會記錄網格解析度以便比較。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_BETA_MARGIN, DEFAULT_INCLUDE_ORIGIN, DEFAULT_INPUT_RESOLUTION, default_state_resolution
from .errors import DimensionError, ParameterInfeasibleError
from .mission import CostSpecSet, MissionSet, spec_for
from .plant import BoxSet, PlantModel, clamp

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
# 每次批次評估的 (u, x) 組合上限
_CHUNK_PAIRS = 250_000


@dataclass(frozen=True)
class StabilityParams:
    delta: float
    gamma: tuple[float, ...]
    mu: float
    K: np.ndarray
    u_hat: np.ndarray

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError(f"delta 必須為正，收到 {self.delta}")
        if self.mu <= 0:
            raise ValueError(f"mu 必須為正，收到 {self.mu}")
        gamma = tuple(float(g) for g in self.gamma)
        if any(g < 0 for g in gamma):
            raise ValueError(f"gamma 不可為負：{gamma}")
        K = np.array(self.K, dtype=float, ndmin=2)
        u_hat = np.array(self.u_hat, dtype=float, ndmin=1)
        K.setflags(write=False)
        u_hat.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "u_hat", u_hat)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "gamma": list(self.gamma),
            "mu": self.mu,
            "K": self.K.tolist(),
            "u_hat": self.u_hat.tolist(),
        }


@dataclass(frozen=True)
class GridSpec:
    input_resolution: int = DEFAULT_INPUT_RESOLUTION
    state_resolution: int | None = None
    include_origin: bool = DEFAULT_INCLUDE_ORIGIN

    def __post_init__(self) -> None:
        if self.input_resolution < 2:
            raise ParameterInfeasibleError("input_resolution 必須 >= 2")
        if self.state_resolution is not None and self.state_resolution < 2:
            raise ParameterInfeasibleError("state_resolution 必須 >= 2")

    def resolved_state_resolution(self, n_x: int) -> int:
        return self.state_resolution or default_state_resolution(n_x)


@dataclass(frozen=True)
class Certificate:
    P: float
    k1: float
    z: float
    beta: float
    beta_required: float
    condition13_ok: bool
    condition14_ok: bool
    assumption2_ok: bool
    u_hat: np.ndarray
    input_resolution: int
    state_resolution: int
    params: StabilityParams
    findings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return self.condition13_ok and self.condition14_ok and self.assumption2_ok

    def to_dict(self) -> dict:
        return {
            "P": self.P,
            "k1": self.k1,
            "z": self.z,
            "beta": self.beta,
            "beta_required": self.beta_required,
            "condition13_ok": self.condition13_ok,
            "condition14_ok": self.condition14_ok,
            "assumption2_ok": self.assumption2_ok,
            "ok": self.ok,
            "u_hat": self.u_hat.tolist(),
            "grid": {"input_resolution": self.input_resolution, "state_resolution": self.state_resolution},
            "params": self.params.to_dict(),
            "findings": list(self.findings),
        }


def primary_weight(m: int) -> np.ndarray:
    """e₀ = [1, 0, ..., 0]。"""
    e0 = np.zeros(m + 1)
    e0[0] = 1.0
    return e0


def check_weight_vector(alpha, m: int | None = None) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or (m is not None and alpha.shape[0] != m + 1):
        raise DimensionError(f"權重向量長度應為 {None if m is None else m + 1}，收到 {alpha.shape}")
    if np.any(alpha < -SIMPLEX_TOL) or np.any(alpha > 1 + SIMPLEX_TOL):
        raise ParameterInfeasibleError(f"權重超出 [0,1]：{alpha.tolist()}")
    if abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise ParameterInfeasibleError(f"權重總和 {alpha.sum()!r} != 1")
    return alpha


def _check_gamma(params: StabilityParams, missions: MissionSet) -> np.ndarray:
    gamma = np.asarray(params.gamma, dtype=float)
    if gamma.shape != (missions.m,):
        raise DimensionError(f"gamma 長度 {gamma.shape[0]} 與備援數 m={missions.m} 不符")
    return gamma


def _baseline_weights(params: StabilityParams, missions: MissionSet, X: np.ndarray) -> np.ndarray:
    """批次計算 α_b，X 為 (..., n_x)，不檢查 simplex。"""
    gamma = _check_gamma(params, missions)
    xc = missions.centered(X)
    alts = missions.destinations[1:] - missions.primary
    norm_x = np.linalg.norm(xc, axis=-1)[..., None]
    den = np.maximum(params.mu, np.linalg.norm(xc[..., None, :] - alts, axis=-1))
    alt_w = gamma * norm_x / den
    return np.concatenate([1.0 - alt_w.sum(axis=-1, keepdims=True), alt_w], axis=-1)


def alpha_baseline(params: StabilityParams, missions: MissionSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != missions.primary.shape:
        raise DimensionError(f"x 維度 {x.shape} 與目的地維度 {missions.primary.shape} 不符")
    alpha = _baseline_weights(params, missions, x)
    if alpha[0] < 0:
        raise ParameterInfeasibleError(
            f"α_b⁰={alpha[0]:.6g} < 0（x={x.tolist()}），請減小 gamma 或增大 mu"
        )
    return alpha


def alpha_transitional(alpha_b, alpha_prev, J_at_Us) -> np.ndarray:
    alpha_b = np.asarray(alpha_b, dtype=float)
    alpha_prev = np.asarray(alpha_prev, dtype=float)
    J = np.asarray(J_at_Us, dtype=float)
    if not (alpha_b.shape == alpha_prev.shape == J.shape) or J.ndim != 1:
        raise DimensionError(f"長度不一致：α_b {alpha_b.shape}, α_prev {alpha_prev.shape}, J {J.shape}")
    return alpha_b if float(alpha_b @ J) <= float(alpha_prev @ J) else alpha_prev


def _axis(lower: float, upper: float, resolution: int, origin: float | None) -> np.ndarray:
    pts = np.linspace(lower, upper, resolution)
    if origin is not None and lower <= origin <= upper and not np.any(pts == origin):
        pts = np.sort(np.append(pts, origin))
    return pts


def grid_points(box: BoxSet, resolution: int, origin=None) -> np.ndarray:
    """box 上的張量網格 (G, d)，origin 不為 None 時每一軸額外加入該座標。"""
    if resolution < 2:
        raise ParameterInfeasibleError("網格解析度必須 >= 2")
    axes = [
        _axis(lo, hi, resolution, None if origin is None else float(origin[j]))
        for j, (lo, hi) in enumerate(zip(box.lower, box.upper))
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, box.dim)


def _state_grid(model: PlantModel, missions: MissionSet, grid: GridSpec) -> np.ndarray:
    origin = missions.primary if grid.include_origin else None
    return grid_points(model.state_box, grid.resolved_state_resolution(model.n_x), origin)


def _input_grid(model: PlantModel, grid: GridSpec) -> np.ndarray:
    origin = np.zeros(model.n_u) if grid.include_origin else None
    return grid_points(model.input_box, grid.input_resolution, origin)


def _outside_ball(X: np.ndarray, missions: MissionSet, delta: float) -> np.ndarray:
    # X∖B_δ：封閉補集，‖x-p⁰‖ >= δ
    keep = np.linalg.norm(missions.centered(X), axis=-1) >= delta
    out = X[keep]
    if out.shape[0] == 0:
        raise ParameterInfeasibleError(f"網格點全部落在 B_δ（δ={delta}）內")
    return out


def _one_step_change(model: PlantModel, spec, p, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """L(x,u) + F(f(x,u)) - F(x)，X 與 U 可廣播。"""
    shape = np.broadcast_shapes(X.shape[:-1], U.shape[:-1])
    X = np.broadcast_to(X, (*shape, model.n_x))
    U = np.broadcast_to(U, (*shape, model.n_u))
    X_next = model.dynamics(X, U)
    paired = X_next if spec.pairing == "post" else X
    d_next = X_next - p
    d_now = X - p
    running = np.einsum("...i,ij,...j->...", paired - p, spec.Q1, paired - p) + np.einsum(
        "...i,ij,...j->...", U, spec.R, U
    )
    return (
        running
        + np.einsum("...i,ij,...j->...", d_next, spec.Q2, d_next)
        - np.einsum("...i,ij,...j->...", d_now, spec.Q2, d_now)
    )


def compute_uhat_P(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    grid: GridSpec,
) -> tuple[np.ndarray, float]:
    X = _state_grid(model, missions, grid)
    Ugrid = _input_grid(model, grid)
    if X.shape[0] == 0 or Ugrid.shape[0] == 0:
        raise ParameterInfeasibleError("網格為空")
    worst = np.full(Ugrid.shape[0], -np.inf)
    chunk = max(1, _CHUNK_PAIRS // X.shape[0])
    for start in range(0, Ugrid.shape[0], chunk):
        block = Ugrid[start : start + chunk]
        for i in range(missions.m + 1):
            spec = spec_for(spec_set, i)
            change = _one_step_change(model, spec, missions.destinations[i], X[None, :, :], block[:, None, :])
            worst[start : start + chunk] = np.maximum(worst[start : start + chunk], change.max(axis=1))
    # argmin 取第一個最小值，即字典序最小的網格索引
    best = int(np.argmin(worst))
    return Ugrid[best].copy(), float(worst[best])


def compute_k1_z(
    model: PlantModel,
    spec_set: CostSpecSet,
    params: StabilityParams,
    grid: GridSpec,
    missions: MissionSet,
) -> tuple[float, float]:
    """k₁ = max L⁰(x,Kx)+F⁰(f(x,Kx))-F⁰(x)，z = max ‖x‖，皆在 X∖B_δ 上。

    Kx 以 p⁰ 為原點計算，並裁切到 input box（與控制器實際套用的輸入一致）。
    """
    K = np.asarray(params.K, dtype=float)
    if K.shape != (model.n_u, model.n_x):
        raise DimensionError(f"K 應為 {(model.n_u, model.n_x)}，收到 {K.shape}")
    X = _outside_ball(_state_grid(model, missions, grid), missions, params.delta)
    xc = missions.centered(X)
    U = clamp(model.input_box, np.einsum("ij,gj->gi", K, xc))
    spec0 = spec_for(spec_set, 0)
    k1 = float(_one_step_change(model, spec0, missions.primary, X, U).max())
    z = float(np.linalg.norm(xc, axis=-1).max())
    return k1, z


def compute_beta(model: PlantModel, params: StabilityParams, missions: MissionSet, grid: GridSpec) -> float:
    X = _outside_ball(_state_grid(model, missions, grid), missions, params.delta)
    return float(_baseline_weights(params, missions, X)[:, 0].min())


def condition14_holds(beta: float, k1: float, P: float) -> bool:
    """β·k₁ <= -(1-β)·P，非嚴格不等式。"""
    return bool(beta * k1 <= -(1.0 - beta) * P)


def required_beta(P: float, k1: float) -> float:
    if P <= 0:
        return 0.0
    if P - k1 <= 0:
        return float("inf")
    return P / (P - k1)


def certify(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    params: StabilityParams,
    grid: GridSpec,
) -> Certificate:
    u_hat, P = compute_uhat_P(model, spec_set, missions, grid)
    k1, z = compute_k1_z(model, spec_set, params, grid, missions)
    beta = compute_beta(model, params, missions, grid)
    beta_req = required_beta(P, k1)

    assumption2_ok = k1 < 0
    condition13_ok = beta > 0
    condition14_ok = condition14_holds(beta, k1, P)

    findings = []
    if not assumption2_ok:
        findings.append("assumption2_violated")
    if not condition13_ok:
        findings.append("beta_nonpositive")
    if not condition14_ok:
        findings.append("condition14_violated")
    findings.append("grid_approximation")

    cert = Certificate(
        P=P,
        k1=k1,
        z=z,
        beta=beta,
        beta_required=beta_req,
        condition13_ok=bool(condition13_ok),
        condition14_ok=bool(condition14_ok),
        assumption2_ok=bool(assumption2_ok),
        u_hat=u_hat,
        input_resolution=grid.input_resolution,
        state_resolution=grid.resolved_state_resolution(model.n_x),
        params=params,
        findings=tuple(findings),
    )
    logger.info(
        f"驗證結果: P={P:.6g}, k1={k1:.6g}, z={z:.6g}, beta={beta:.6g}, "
        f"beta_required={beta_req:.6g}, ok={cert.ok}"
    )
    return cert


def search_params(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    delta: float,
    K,
    grid: GridSpec,
    target_beta_margin: float = DEFAULT_BETA_MARGIN,
    *,
    mu: float | None = None,
) -> StabilityParams:
    """找出統一的 γ 與 μ，使 1 - zΣγ/μ >= beta_required + margin。

    μ 預設為 z，此時 ‖x-pⁱ‖ 的分母下界不影響保守估計。
    """
    u_hat, P = compute_uhat_P(model, spec_set, missions, grid)
    trial = StabilityParams(delta, (0.0,) * missions.m, 1.0, K, u_hat)
    k1, z = compute_k1_z(model, spec_set, trial, grid, missions)
    if k1 >= 0:
        raise ParameterInfeasibleError(f"k1={k1:.6g} >= 0，K 無法讓 F⁰ 在 X∖B_δ 上遞減")
    beta_req = required_beta(P, k1)
    if beta_req >= 1.0 - target_beta_margin:
        raise ParameterInfeasibleError(
            f"beta_required={beta_req:.6g} >= 1 - margin={1.0 - target_beta_margin:.6g}，找不到可行參數"
        )
    mu = z if mu is None else float(mu)
    if missions.m == 0:
        gamma: tuple[float, ...] = ()
    else:
        g = mu * (1.0 - beta_req - target_beta_margin) / (missions.m * z)
        gamma = (g,) * missions.m
    params = StabilityParams(delta, gamma, mu, K, u_hat)
    cert = certify(model, spec_set, missions, params, grid)
    if not cert.ok:
        raise ParameterInfeasibleError(f"搜尋到的參數未通過驗證: {', '.join(cert.findings)}")
    logger.info(f"參數搜尋完成: gamma={list(gamma)}, mu={mu:.6g}, beta={cert.beta:.6g}")
    return params

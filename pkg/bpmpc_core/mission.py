from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .config import DEFAULT_COMPLETION_TOL
from .errors import DimensionError, IndexRangeError
from .multihorizon import MultiHorizonInput, flatten, rollout_batch
from .plant import PlantModel, rollout

PAIRINGS = ("post", "pre")


def _psd(M: np.ndarray, name: str, *, strict: bool = False) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} 必須是方陣，收到 {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} 必須對稱")
    eig_min = float(np.linalg.eigvalsh(M).min())
    if eig_min < (1e-12 if strict else -1e-12):
        kind = "正定" if strict else "半正定"
        raise ValueError(f"{name} 必須{kind}（最小特徵值 {eig_min:.3g}）")


@dataclass(frozen=True)
class MissionSet:
    destinations: np.ndarray
    completion_tol: float = DEFAULT_COMPLETION_TOL

    def __post_init__(self) -> None:
        dest = np.array(self.destinations, dtype=float, ndmin=2)
        if dest.ndim != 2 or dest.shape[0] < 1:
            raise DimensionError(f"目的地須為 (m+1, n_x) 陣列，收到 {dest.shape}")
        if self.completion_tol < 0:
            raise ValueError("completion_tol 不可為負")
        dest.setflags(write=False)
        object.__setattr__(self, "destinations", dest)

    @property
    def m(self) -> int:
        return int(self.destinations.shape[0]) - 1

    @property
    def primary(self) -> np.ndarray:
        return self.destinations[0]

    def centered(self, x) -> np.ndarray:
        """轉換到以 p^0 為原點的座標。"""
        return np.asarray(x, dtype=float) - self.primary


@dataclass(frozen=True)
class QuadraticCostSpec:
    """L^i(x,u) = (x-p^i)ᵀQ1(x-p^i) + uᵀRu，F^i(x) = (x-p^i)ᵀQ2(x-p^i)。"""

    Q1: np.ndarray
    Q2: np.ndarray
    R: np.ndarray
    pairing: str = "post"

    def __post_init__(self) -> None:
        Q1 = np.array(self.Q1, dtype=float, ndmin=2)
        Q2 = np.array(self.Q2, dtype=float, ndmin=2)
        R = np.array(self.R, dtype=float, ndmin=2)
        _psd(Q1, "Q1")
        _psd(Q2, "Q2", strict=True)
        _psd(R, "R")
        if Q1.shape != Q2.shape:
            raise DimensionError(f"Q1 {Q1.shape} 與 Q2 {Q2.shape} 維度不一致")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing 必須是 {PAIRINGS} 之一，收到 {self.pairing!r}")
        for arr in (Q1, Q2, R):
            arr.setflags(write=False)
        object.__setattr__(self, "Q1", Q1)
        object.__setattr__(self, "Q2", Q2)
        object.__setattr__(self, "R", R)

    @property
    def n_x(self) -> int:
        return int(self.Q1.shape[0])

    @property
    def n_u(self) -> int:
        return int(self.R.shape[0])


CostSpecSet = Union[QuadraticCostSpec, Sequence[QuadraticCostSpec]]


def spec_for(spec_set: CostSpecSet, i: int) -> QuadraticCostSpec:
    if isinstance(spec_set, QuadraticCostSpec):
        return spec_set
    try:
        return spec_set[i]
    except IndexError as e:
        raise IndexRangeError(f"找不到目的地 {i} 的成本設定") from e


def _quad(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", v, M, v)


def _check_dims(spec: QuadraticCostSpec, p, x, u=None) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    if p.shape[-1:] != (spec.n_x,) or x.shape[-1:] != (spec.n_x,):
        raise DimensionError(f"狀態/目的地維度與成本設定 n_x={spec.n_x} 不符")
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (spec.n_u,):
            raise DimensionError(f"輸入維度 {u.shape} 與成本設定 n_u={spec.n_u} 不符")
    return p, x, u


def distance(x, p) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape[-1:] != p.shape[-1:]:
        raise DimensionError(f"distance 維度不符：{x.shape} vs {p.shape}")
    d = np.linalg.norm(x - p, axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def running_cost(spec: QuadraticCostSpec, p, x, u):
    p, x, u = _check_dims(spec, p, x, u)
    c = _quad(spec.Q1, x - p) + _quad(spec.R, u)
    return float(c) if np.ndim(c) == 0 else c


def terminal_cost(spec: QuadraticCostSpec, p, x):
    p, x, _ = _check_dims(spec, p, x)
    c = _quad(spec.Q2, x - p)
    return float(c) if np.ndim(c) == 0 else c


def _running_terms(spec: QuadraticCostSpec, p, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """states 含起點 (…, L+1, n_x)，inputs (…, L, n_u)；依 pairing 回傳 (…, L)。"""
    paired = states[..., 1:, :] if spec.pairing == "post" else states[..., :-1, :]
    return running_cost(spec, p, paired, inputs)


def branch_cost(model: PlantModel, spec: QuadraticCostSpec, p, x, branch_inputs) -> float:
    inputs = np.asarray(branch_inputs, dtype=float)
    states = rollout(model, x, inputs)
    running = np.sum(_running_terms(spec, p, states, inputs)) if inputs.shape[0] else 0.0
    return float(running + terminal_cost(spec, p, states[-1]))


def vector_cost_batch(
    spec_set: CostSpecSet,
    missions: MissionSet,
    primary: np.ndarray,
    tails_by_p: tuple[np.ndarray, ...],
    states: np.ndarray,
    branches: tuple[np.ndarray, ...],
) -> np.ndarray:
    """由批次模擬結果計算向量成本 J，回傳 (B, m+1)。

    J^0 為主分支成本；J^i 為 N-1 個中止時間分支成本的算術平均。
    前綴 running cost 沿主狀態累積一次，各分支共用。
    """
    B, N = primary.shape[0], primary.shape[1]
    m = missions.m
    out = np.empty((B, m + 1))
    for i in range(m + 1):
        spec = spec_for(spec_set, i)
        p_i = missions.destinations[i]
        prefix = np.concatenate(
            [np.zeros((B, 1)), np.cumsum(_running_terms(spec, p_i, states, primary), axis=1)], axis=1
        )
        if i == 0:
            out[:, 0] = prefix[:, N] + terminal_cost(spec, p_i, states[:, N])
            continue
        total = np.zeros(B)
        for p, tail in enumerate(tails_by_p):
            seg_inputs = tail[:, i - 1]
            seg_states = np.concatenate([states[:, p + 1, None, :], branches[p][:, i - 1]], axis=1)
            running = _running_terms(spec, p_i, seg_states, seg_inputs).sum(axis=1)
            total += prefix[:, p + 1] + running + terminal_cost(spec, p_i, seg_states[:, -1])
        out[:, i] = total / (N - 1)
    return out


def vector_cost(
    model: PlantModel,
    spec_set: CostSpecSet,
    missions: MissionSet,
    x,
    U: MultiHorizonInput,
) -> np.ndarray:
    if U.m != missions.m:
        raise DimensionError(f"U 的備援數 m={U.m} 與任務數 m={missions.m} 不符")
    if U.n_u != model.n_u:
        raise DimensionError(f"U 的 n_u={U.n_u} 與模型 n_u={model.n_u} 不符")
    primary, tails_by_p = U.shape.split(flatten(U)[None, :])
    states, branches = rollout_batch(model, x, primary, tails_by_p)
    return vector_cost_batch(spec_set, missions, primary, tails_by_p, states, branches)[0]


def mission_completed(missions: MissionSet, i: int, x) -> bool:
    if not 0 <= i <= missions.m:
        raise IndexRangeError(f"任務索引 i={i} 超出 0..{missions.m}")
    return bool(distance(x, missions.destinations[i]) <= missions.completion_tol)


def nearest_destination(missions: MissionSet, x) -> int:
    """最近目的地索引（含主目的地），距離相同取較小索引。"""
    return int(np.argmin(distance(x, missions.destinations)))

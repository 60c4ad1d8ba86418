from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import DimensionError


def _frozen_array(value, name: str, ndim: int) -> np.ndarray:
    arr = np.array(value, dtype=float, ndmin=ndim)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} 必須是 {ndim} 維陣列，收到 shape={arr.shape}")
    arr.setflags(write=False)
    return arr


class StepMap(Protocol):
    """離散時間動態 x_{k+1} = f(x_k, u_k)，需支援任意前置 batch 維度。"""

    n_x: int
    n_u: int

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = _frozen_array(self.lower, "lower", 1)
        upper = _frozen_array(self.upper, "upper", 1)
        if lower.shape != upper.shape:
            raise DimensionError(f"box 上下界長度不一致：{lower.shape} vs {upper.shape}")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box 必須是緊緻集合（所有邊界皆為有限值）")
        if np.any(lower > upper):
            raise ValueError(f"box 下界大於上界：lower={lower.tolist()}, upper={upper.tolist()}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return int(self.lower.shape[0])

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 0 or v.shape[-1] != self.dim:
            raise DimensionError(f"向量維度 {v.shape} 與 box 維度 {self.dim} 不符")
        return v


@dataclass(frozen=True)
class LinearDynamics:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        A = _frozen_array(self.A, "A", 2)
        B = _frozen_array(self.B, "B", 2)
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A 必須是方陣，收到 {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise DimensionError(f"B 的列數須為 n_x={A.shape[0]}，收到 {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return int(self.A.shape[0])

    @property
    def n_u(self) -> int:
        return int(self.B.shape[1])

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        # einsum 逐元素計算，結果不隨 batch 大小改變
        return np.einsum("ij,...j->...i", self.A, x) + np.einsum("ij,...j->...i", self.B, u)


@dataclass(frozen=True)
class FunctionDynamics:
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n_x: int
    n_u: int

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x, u), dtype=float)


@dataclass(frozen=True)
class PlantModel:
    dynamics: StepMap
    state_box: BoxSet
    input_box: BoxSet

    def __post_init__(self) -> None:
        if self.state_box.dim != self.dynamics.n_x:
            raise DimensionError(f"state box 維度 {self.state_box.dim} != n_x={self.dynamics.n_x}")
        if self.input_box.dim != self.dynamics.n_u:
            raise DimensionError(f"input box 維度 {self.input_box.dim} != n_u={self.dynamics.n_u}")

    @property
    def n_x(self) -> int:
        return self.dynamics.n_x

    @property
    def n_u(self) -> int:
        return self.dynamics.n_u


def _as_state(model: PlantModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != model.n_x:
        raise DimensionError(f"狀態維度 {x.shape} 與 n_x={model.n_x} 不符")
    return x


def _as_input(model: PlantModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] != model.n_u:
        raise DimensionError(f"輸入維度 {u.shape} 與 n_u={model.n_u} 不符")
    return u


def step(model: PlantModel, x, u) -> np.ndarray:
    """回傳 f(x, u)；不做任何限制條件的裁切或拒絕。"""
    return model.dynamics(_as_state(model, x), _as_input(model, u))


def rollout(model: PlantModel, x0, inputs: Sequence) -> np.ndarray:
    """回傳 [x0, f(x0,u0), ...]，shape = (len(inputs)+1, n_x)。"""
    x = _as_state(model, x0)
    if x.ndim != 1:
        raise DimensionError(f"x0 必須是一維向量，收到 {x.shape}")
    us = np.asarray(inputs, dtype=float)
    if us.size == 0:
        us = np.zeros((0, model.n_u))
    elif us.ndim != 2 or us.shape[1] != model.n_u:
        raise DimensionError(f"輸入序列 shape={us.shape} 與 n_u={model.n_u} 不符")
    states = np.empty((us.shape[0] + 1, model.n_x))
    states[0] = x
    for k, u in enumerate(us):
        states[k + 1] = model.dynamics(states[k], u)
    return states


def contains(box: BoxSet, v) -> bool:
    v = box._check(v)
    return bool(np.all((v >= box.lower) & (v <= box.upper)))


def clamp(box: BoxSet, v) -> np.ndarray:
    v = box._check(v)
    return np.clip(v, box.lower, box.upper)


def violation(box: BoxSet, v) -> np.ndarray:
    """逐分量越界量總和（最後一軸加總），在 box 內為 0。"""
    v = box._check(v)
    return (np.maximum(box.lower - v, 0.0) + np.maximum(v - box.upper, 0.0)).sum(axis=-1)

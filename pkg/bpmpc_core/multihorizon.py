from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, IndexRangeError
from .plant import PlantModel, clamp, rollout


def total_dof(N: int, m: int, n_u: int) -> int:
    """多時域輸入 U 的獨立純量個數 (N + m·N(N-1)/2)·n_u。"""
    if N < 1 or m < 0 or n_u < 1:
        raise ValueError(f"需要 N>=1, m>=0, n_u>=1，收到 N={N}, m={m}, n_u={n_u}")
    return (N + m * N * (N - 1) // 2) * n_u


@dataclass(frozen=True)
class HorizonShape:
    N: int
    m: int
    n_u: int

    def __post_init__(self) -> None:
        total_dof(self.N, self.m, self.n_u)
        if self.m >= 1 and self.N < 2:
            raise ValueError("有備援目的地 (m>=1) 時需要 N>=2")

    @property
    def dof(self) -> int:
        return total_dof(self.N, self.m, self.n_u)

    def tail_offset(self, i: int, p: int) -> int:
        # 攤平順序：主序列在前，其後依 (i, p, q) 排列
        N, n_u = self.N, self.n_u
        per_branch = N * (N - 1) // 2
        before_p = p * (N - 1) - p * (p - 1) // 2
        return (N + (i - 1) * per_branch + before_p) * n_u

    @cached_property
    def tail_index(self) -> tuple[np.ndarray, ...]:
        """每個 p 一個 (m, N-p-1, n_u) 的索引陣列，指向攤平向量。"""
        out = []
        for p in range(self.N - 1):
            length = self.N - p - 1
            idx = np.empty((self.m, length, self.n_u), dtype=np.intp)
            for i in range(1, self.m + 1):
                start = self.tail_offset(i, p)
                idx[i - 1] = np.arange(start, start + length * self.n_u).reshape(length, self.n_u)
            out.append(idx)
        return tuple(out)

    def split(self, flat: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        """(..., dof) -> 主序列 (..., N, n_u) 與每個 p 的分支尾段 (..., m, N-p-1, n_u)。"""
        flat = np.asarray(flat, dtype=float)
        if flat.shape[-1] != self.dof:
            raise DimensionError(f"攤平向量長度 {flat.shape[-1]} != total_dof={self.dof}")
        lead = flat.shape[:-1]
        primary = flat[..., : self.N * self.n_u].reshape(*lead, self.N, self.n_u)
        tails = tuple(flat[..., idx] for idx in self.tail_index)
        return primary, tails


@dataclass(frozen=True, eq=False)
class MultiHorizonInput:
    """U = [U^0, U^1, ..., U^m]，只儲存獨立元素；tails[i-1][p] 為分支 (i, p) 的尾段。"""

    primary: np.ndarray
    tails: tuple[tuple[np.ndarray, ...], ...]

    def __post_init__(self) -> None:
        primary = np.array(self.primary, dtype=float, ndmin=2)
        if primary.ndim != 2:
            raise DimensionError(f"主序列必須是 (N, n_u)，收到 {primary.shape}")
        N, n_u = primary.shape
        tails = []
        for i, blocks in enumerate(self.tails, start=1):
            if len(blocks) != N - 1:
                raise DimensionError(f"備援 {i} 需有 N-1={N - 1} 個分支，收到 {len(blocks)}")
            fixed = []
            for p, tail in enumerate(blocks):
                tail = np.array(tail, dtype=float).reshape(-1, n_u) if np.size(tail) else np.zeros((0, n_u))
                if tail.shape != (N - p - 1, n_u):
                    raise DimensionError(f"分支 ({i},{p}) 尾段應為 {(N - p - 1, n_u)}，收到 {tail.shape}")
                tail.setflags(write=False)
                fixed.append(tail)
            tails.append(tuple(fixed))
        primary.setflags(write=False)
        object.__setattr__(self, "primary", primary)
        object.__setattr__(self, "tails", tuple(tails))
        HorizonShape(N, len(tails), n_u)

    @property
    def N(self) -> int:
        return int(self.primary.shape[0])

    @property
    def m(self) -> int:
        return len(self.tails)

    @property
    def n_u(self) -> int:
        return int(self.primary.shape[1])

    @property
    def shape(self) -> HorizonShape:
        return HorizonShape(self.N, self.m, self.n_u)

    @classmethod
    def constant(cls, N: int, m: int, u) -> "MultiHorizonInput":
        u = np.asarray(u, dtype=float)
        tails = tuple(
            tuple(np.tile(u, (N - p - 1, 1)) for p in range(N - 1))
            for _ in range(m)
        )
        return cls(np.tile(u, (N, 1)), tails)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MultiHorizonInput):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(flatten(self), flatten(other))


@dataclass(frozen=True)
class MultiHorizonTrajectory:
    primary_states: np.ndarray
    branch_states: tuple[tuple[np.ndarray, ...], ...]

    @property
    def final_state(self) -> np.ndarray:
        return self.primary_states[-1]


def _check_branch(U: MultiHorizonInput, i: int, p: int) -> None:
    if not 1 <= i <= U.m:
        raise IndexRangeError(f"備援索引 i={i} 超出 1..{U.m}")
    if not 0 <= p <= U.N - 2:
        raise IndexRangeError(f"中止時間 p={p} 超出 0..{U.N - 2}")


def materialize_branch(U: MultiHorizonInput, i: int, p: int) -> np.ndarray:
    """U_p^i = [u_0, ..., u_p, u^i_{p,p+1}, ..., u^i_{p,N-1}]，長度 N。"""
    _check_branch(U, i, p)
    return np.concatenate([U.primary[: p + 1], U.tails[i - 1][p]], axis=0)


def flatten(U: MultiHorizonInput) -> np.ndarray:
    parts = [U.primary.ravel()]
    for blocks in U.tails:
        parts.extend(tail.ravel() for tail in blocks)
    return np.concatenate(parts)


def unflatten(template: MultiHorizonInput | HorizonShape, vector) -> MultiHorizonInput:
    shape = template.shape if isinstance(template, MultiHorizonInput) else template
    vector = np.asarray(vector, dtype=float)
    if vector.ndim != 1:
        raise DimensionError(f"unflatten 需要一維向量，收到 {vector.shape}")
    primary, tails_by_p = shape.split(vector)
    tails = tuple(
        tuple(tails_by_p[p][i] for p in range(shape.N - 1))
        for i in range(shape.m)
    )
    return MultiHorizonInput(primary.copy(), tails)


def rollout_batch(
    model: PlantModel,
    x,
    primary: np.ndarray,
    tails_by_p: tuple[np.ndarray, ...],
) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """批次模擬：主序列 (B, N, n_u) 與尾段 (B, m, N-p-1, n_u)。

    回傳主狀態 (B, N+1, n_x) 與每個 p 的分支狀態 (B, m, N-p-1, n_x)。
    分支 (i, p) 由主狀態 p+1 接續模擬，共用前綴只算一次。
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_x,):
        raise DimensionError(f"x 維度 {x.shape} 與 n_x={model.n_x} 不符")
    if primary.shape[-1] != model.n_u:
        raise DimensionError(f"輸入維度 {primary.shape[-1]} 與 n_u={model.n_u} 不符")
    B, N = primary.shape[0], primary.shape[1]
    states = np.empty((B, N + 1, model.n_x))
    states[:, 0] = x
    for k in range(N):
        states[:, k + 1] = model.dynamics(states[:, k], primary[:, k])

    branches = []
    for p, tail in enumerate(tails_by_p):
        m, length = tail.shape[1], tail.shape[2]
        out = np.empty((B, m, length, model.n_x))
        current = np.broadcast_to(states[:, p + 1, None, :], (B, m, model.n_x))
        for q in range(length):
            current = model.dynamics(current, tail[:, :, q])
            out[:, :, q] = current
        branches.append(out)
    return states, tuple(branches)


def rollout_all(model: PlantModel, x, U: MultiHorizonInput) -> MultiHorizonTrajectory:
    if U.n_u != model.n_u:
        raise DimensionError(f"U 的 n_u={U.n_u} 與模型 n_u={model.n_u} 不符")
    primary, tails_by_p = U.shape.split(flatten(U)[None, :])
    states, branches = rollout_batch(model, x, primary, tails_by_p)
    branch_states = tuple(
        tuple(branches[p][0, i] for p in range(U.N - 1))
        for i in range(U.m)
    )
    return MultiHorizonTrajectory(states[0], branch_states)


def shift(
    U_prev: MultiHorizonInput,
    model: PlantModel,
    x_prev,
    K,
    u_hat,
    *,
    origin=None,
) -> MultiHorizonInput:
    """由 U_*(x_{k-1}) 建構 U_s(x_k)。

    主序列：去掉已執行的 u_0，末端補 K·x_{k-1,f}（以 p^0 為原點的座標）。
    分支：新的 (i, p) 分支等於舊的 (i, p+1) 分支去頭再補 û，其中舊 (i, N-1)
    視為主序列本身；因此 materialize(shift(U))_p^i == materialize(U)_{p+1}^i[1:] ⧺ [û]。
    補上的元素皆裁切到輸入 box 內。
    """
    K = np.asarray(K, dtype=float)
    if K.shape != (model.n_u, model.n_x):
        raise DimensionError(f"K 應為 {(model.n_u, model.n_x)}，收到 {K.shape}")
    if U_prev.n_u != model.n_u:
        raise DimensionError(f"U 的 n_u={U_prev.n_u} 與模型 n_u={model.n_u} 不符")
    origin = np.zeros(model.n_x) if origin is None else np.asarray(origin, dtype=float)
    u_hat = clamp(model.input_box, u_hat)

    x_f = rollout(model, x_prev, U_prev.primary)[-1]
    u_feedback = clamp(model.input_box, K @ (x_f - origin))
    primary = np.vstack([U_prev.primary[1:], u_feedback])

    N = U_prev.N
    tails = []
    for blocks in U_prev.tails:
        new_blocks = []
        for p in range(N - 1):
            older = blocks[p + 1] if p + 1 <= N - 2 else np.zeros((0, model.n_u))
            new_blocks.append(np.vstack([older, u_hat]))
        tails.append(tuple(new_blocks))
    return MultiHorizonInput(primary, tuple(tails))

from __future__ import annotations

import os

import numpy as np
import pytest

from bpmpc_core.certify import GridSpec, StabilityParams
from bpmpc_core.mission import MissionSet, QuadraticCostSpec
from bpmpc_core.multihorizon import MultiHorizonInput
from bpmpc_core.plant import BoxSet, LinearDynamics, PlantModel
from bpmpc_core.solver import SolverParams

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(ROOT, "configs")

DI_A = [[1, 0, 0.1, 0], [0, 1, 0, 0.1], [0, 0, 1, 0], [0, 0, 0, 1]]
DI_B = [[0, 0], [0, 0], [1, 0], [0, 1]]


def config_path(name: str) -> str:
    return os.path.join(CONFIG_DIR, f"{name}.json")


@pytest.fixture
def si_model() -> PlantModel:
    return PlantModel(
        LinearDynamics(np.eye(2), np.eye(2)),
        BoxSet([-2, -2], [10, 10]),
        BoxSet([-10, -10], [2, 2]),
    )


@pytest.fixture
def di_model() -> PlantModel:
    return PlantModel(
        LinearDynamics(DI_A, DI_B),
        BoxSet([-2, -2, -10, -10], [10, 10, 2, 2]),
        BoxSet([-10, -10], [2, 2]),
    )


@pytest.fixture
def si_cost() -> QuadraticCostSpec:
    return QuadraticCostSpec(1e-5 * np.eye(2), 0.1 * np.eye(2), 0.1 * np.eye(2))


@pytest.fixture
def si_missions() -> MissionSet:
    return MissionSet([[0, 0], [3, 9], [1, 5]], 0.5)


@pytest.fixture
def si_params() -> StabilityParams:
    return StabilityParams(delta=3.0, gamma=(0.45, 0.45), mu=15.0, K=-0.1 * np.eye(2), u_hat=[0.0, 0.0])


@pytest.fixture
def coarse_grid() -> GridSpec:
    return GridSpec(input_resolution=5, state_resolution=7, include_origin=True)


@pytest.fixture
def small_solver() -> SolverParams:
    return SolverParams(M=128, sigma=[1.0, 1.0], lambda_=1.0, base_seed=3)


def random_input(rng: np.random.Generator, N: int, m: int, n_u: int) -> MultiHorizonInput:
    tails = tuple(
        tuple(rng.uniform(-1, 1, (N - p - 1, n_u)) for p in range(N - 1))
        for _ in range(m)
    )
    return MultiHorizonInput(rng.uniform(-1, 1, (N, n_u)), tails)

"""Environment protocol shared by the PPO, GAIL and adversarial loops."""

from dataclasses import dataclass, field
from typing import Any, Dict, Protocol

import numpy as np


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: Dict[str, Any] = field(default_factory=dict)


class Env(Protocol):
    obs_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        ...

    def step(self, action: np.ndarray) -> StepResult:
        ...


class ToyTargetEnv:
    """1-D target reaching: the agent moves by its (clamped) action each step.

    Reward is the negative normalized distance to the target after the move.
    Used as a smoke test for the PPO loop.
    """

    obs_dim = 2
    action_dim = 1

    def __init__(self, target: float = 5.0, horizon: int = 20, max_move: float = 1.0):
        self.target = target
        self.horizon = horizon
        self.action_low = np.array([-max_move])
        self.action_high = np.array([max_move])
        self.x = 0.0
        self.t = 0

    def _obs(self) -> np.ndarray:
        return np.array([(self.x - self.target) / self.target, self.t / self.horizon])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.x, self.t = 0.0, 0
        return self._obs()

    def step(self, action: np.ndarray) -> StepResult:
        move = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0], self.action_low[0], self.action_high[0]))
        self.x += move
        self.t += 1
        reward = -abs(self.x - self.target) / self.target
        return StepResult(self._obs(), reward, self.t >= self.horizon, {"x": self.x})

"""Small numpy neural toolkit.

Fully connected ReLU networks with analytic backpropagation, a
diagonal-Gaussian policy head, Adam updates and JSON checkpoints. All
arithmetic is float64. Inputs may be a single vector or a batch of row
vectors.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .artifacts import write_json
from .errors import CheckpointError, DomainError, StaleCacheError

logger = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
CHECKPOINT_FORMAT = "advscenario-nets"
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: Tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d < 1 for d in dims):
            raise DomainError(f"All layer widths must be at least 1, got {dims}")
        if self.activation != "relu":
            raise DomainError(f"Unsupported activation '{self.activation}'; only 'relu' is available")

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


@dataclass
class ForwardCache:
    """Activations kept by `Mlp.forward` for the matching backward pass."""
    version: int
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    squeeze: bool


class Mlp:
    """Affine + ReLU per hidden layer, linear output layer.

    Parameters are stored as [W0, b0, W1, b1, ...] with W of shape
    (fan_in, fan_out). Every parameter assignment bumps `version`, which
    invalidates older forward caches.
    """

    def __init__(self, spec: MlpSpec, rng: Optional[np.random.Generator] = None,
                 output_scale: float = 1.0, input_scale: Optional[np.ndarray] = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        params = []
        widths = spec.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            scale = math.sqrt(2.0 / fan_in)
            if i == len(widths) - 2:
                scale *= output_scale
            params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        self._params = params
        self.input_scale = (np.ones(spec.input_dim) if input_scale is None
                            else np.asarray(input_scale, dtype=np.float64).copy())
        self.version = 0

    @property
    def params(self) -> List[np.ndarray]:
        return self._params

    @params.setter
    def params(self, values: Sequence[np.ndarray]) -> None:
        values = [np.asarray(v, dtype=np.float64) for v in values]
        if len(values) != len(self._params) or any(v.shape != p.shape for v, p in zip(values, self._params)):
            raise DomainError("Parameter shapes do not match the network layout")
        self._params = [v.copy() for v in values]
        self.version += 1

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._params])

    def set_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        out, start = [], 0
        for p in self._params:
            out.append(vector[start:start + p.size].reshape(p.shape))
            start += p.size
        if start != vector.size:
            raise DomainError(f"Flat vector has {vector.size} entries, network has {start}")
        self.params = out

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.spec = self.spec
        clone._params = [p.copy() for p in self._params]
        clone.input_scale = self.input_scale.copy()
        clone.version = 0
        return clone

    def forward(self, x) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DomainError(f"Expected input of width {self.spec.input_dim}, got shape {x.shape}")
        h = x * self.input_scale
        inputs, preacts = [], []
        n_layers = len(self._params) // 2
        for i in range(n_layers):
            W, b = self._params[2 * i], self._params[2 * i + 1]
            inputs.append(h)
            z = h @ W + b
            preacts.append(z)
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        return (h[0] if squeeze else h), ForwardCache(self.version, inputs, preacts, squeeze)

    def backward(self, cache: ForwardCache, grad_y) -> List[np.ndarray]:
        """Gradients of sum(grad_y * y) with respect to every parameter.

        Raises:
            StaleCacheError: If parameters changed since the forward pass.
        """
        if cache.version != self.version:
            raise StaleCacheError(
                f"Forward cache is from parameter version {cache.version}, network is at {self.version}; "
                "run forward again before backward"
            )
        g = np.asarray(grad_y, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        n_layers = len(self._params) // 2
        grads: List[np.ndarray] = [np.empty(0)] * len(self._params)
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                g = g * (cache.preacts[i] > 0)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self._params[2 * i].T
        return grads

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "spec": {"input_dim": self.spec.input_dim, "hidden": list(self.spec.hidden),
                     "output_dim": self.spec.output_dim, "activation": self.spec.activation},
            "input_scale": self.input_scale.tolist(),
            "params": [p.ravel().tolist() for p in self._params],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Mlp":
        spec_data = dict(data["spec"])
        spec = MlpSpec(spec_data["input_dim"], tuple(spec_data["hidden"]), spec_data["output_dim"],
                       spec_data.get("activation", "relu"))
        net = cls(spec, input_scale=np.asarray(data["input_scale"]))
        net.params = [np.asarray(flat).reshape(p.shape) for flat, p in zip(data["params"], net.params)]
        net.version = 0
        return net


def mlp_forward(net: Mlp, x) -> Tuple[np.ndarray, ForwardCache]:
    return net.forward(x)


def mlp_backward(net: Mlp, cache: ForwardCache, grad_y) -> List[np.ndarray]:
    return net.backward(cache, grad_y)


def _check_variance(*variances: np.ndarray) -> None:
    for var in variances:
        if np.any(~(var > 0)):
            raise DomainError("Gaussian variance must be strictly positive")


def gaussian_logprob(mean, var, action) -> Union[float, np.ndarray]:
    """Log density of a diagonal Gaussian, summed over the last axis."""
    mean, var, action = (np.asarray(v, dtype=np.float64) for v in (mean, var, action))
    _check_variance(var)
    value = np.sum(-0.5 * (_LOG_2PI + np.log(var)) - (action - mean) ** 2 / (2.0 * var), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def gaussian_sample(mean, var, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.sqrt(np.maximum(np.asarray(var, dtype=np.float64), 0.0))
    return mean + std * rng.standard_normal(mean.shape)


def diag_gaussian_kl(mean_p, var_p, mean_q, var_q) -> Union[float, np.ndarray]:
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    mean_p, var_p, mean_q, var_q = (np.asarray(v, dtype=np.float64) for v in (mean_p, var_p, mean_q, var_q))
    _check_variance(var_p, var_q)
    value = 0.5 * np.sum(np.log(var_q / var_p) + (var_p + (mean_p - mean_q) ** 2) / var_q - 1.0, axis=-1)
    value = np.maximum(value, 0.0)
    return float(value) if np.ndim(value) == 0 else value


@dataclass
class GaussianOutput:
    mean: np.ndarray
    logvar: np.ndarray
    cache: ForwardCache
    raw_logvar: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar)


class GaussianPolicy:
    """Diagonal-Gaussian policy: an Mlp whose output splits into mean and log-variance heads.

    The log-variance head is clamped to [LOGVAR_MIN, LOGVAR_MAX]; clamped
    entries pass no gradient.
    """

    def __init__(self, obs_dim: int, action_dim: int, hidden: Sequence[int] = (128, 128),
                 rng: Optional[np.random.Generator] = None, init_logvar: float = 0.0,
                 input_scale: Optional[np.ndarray] = None):
        self.action_dim = action_dim
        self.net = Mlp(MlpSpec(obs_dim, tuple(hidden), 2 * action_dim), rng,
                       output_scale=0.01, input_scale=input_scale)
        params = [p.copy() for p in self.net.params]
        params[-1][action_dim:] = init_logvar
        self.net.params = params

    @property
    def obs_dim(self) -> int:
        return self.net.spec.input_dim

    @property
    def mean_head(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.net.params[-2][:, :self.action_dim], self.net.params[-1][:self.action_dim]

    @property
    def logvar_head(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.net.params[-2][:, self.action_dim:], self.net.params[-1][self.action_dim:]

    def distribution(self, obs) -> GaussianOutput:
        out, cache = self.net.forward(obs)
        mean = out[..., :self.action_dim]
        raw = out[..., self.action_dim:]
        return GaussianOutput(mean, np.clip(raw, LOGVAR_MIN, LOGVAR_MAX), cache, raw)

    def act(self, obs, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        """Sample an unclamped action and return it with its log-probability."""
        dist = self.distribution(obs)
        action = gaussian_sample(dist.mean, dist.var, rng)
        return action, gaussian_logprob(dist.mean, dist.var, action)

    def logprob_gradients(self, obs, actions, weights) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Log-probabilities of actions and the gradient of sum(weights * logprob).

        Returns:
            (logprob per row, parameter gradients)
        """
        dist = self.distribution(obs)
        actions = np.asarray(actions, dtype=np.float64)
        var = dist.var
        diff = actions - dist.mean
        logp = gaussian_logprob(dist.mean, var, actions)
        w = np.asarray(weights, dtype=np.float64)[..., None]
        d_mean = w * diff / var
        inside = (dist.raw_logvar > LOGVAR_MIN) & (dist.raw_logvar < LOGVAR_MAX)
        d_logvar = w * (-0.5 + diff ** 2 / (2.0 * var)) * inside
        grads = self.net.backward(dist.cache, np.concatenate([d_mean, d_logvar], axis=-1))
        return np.asarray(logp), grads

    def copy(self) -> "GaussianPolicy":
        clone = GaussianPolicy.__new__(GaussianPolicy)
        clone.action_dim = self.action_dim
        clone.net = self.net.copy()
        return clone

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "gaussian-policy", "action_dim": self.action_dim, **self.net.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GaussianPolicy":
        policy = cls.__new__(cls)
        policy.action_dim = int(data["action_dim"])
        policy.net = Mlp.from_dict(data)
        return policy


@dataclass
class AdamState:
    lr: float
    m: List[np.ndarray]
    v: List[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float) -> "AdamState":
        return cls(lr, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> List[np.ndarray]:
    """One bias-corrected Adam descent step. Advances the state in place.

    Raises:
        DomainError: On parameter, gradient or moment shape mismatch.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DomainError("Adam: parameter, gradient and moment lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DomainError(f"Adam: shape mismatch at parameter {i}: {p.shape} vs gradient {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** state.step)
        v_hat = state.v[i] / (1 - b2 ** state.step)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class Optimizer:
    """Adam bound to one network."""
    net: Mlp
    lr: float = 1e-3
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(self.net.params, self.lr)

    def step(self, grads: Sequence[np.ndarray], max_norm: Optional[float] = None) -> None:
        if max_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > max_norm:
                grads = [g * (max_norm / norm) for g in grads]
        self.net.params = adam_step(self.net.params, grads, self.state)


def save_checkpoint(path: Union[str, Path], nets: Mapping[str, Union[Mlp, GaussianPolicy]],
                    meta: Optional[Mapping[str, Any]] = None) -> Path:
    """Write networks to a versioned JSON checkpoint.

    Floats are written with repr precision, so a save/load round trip is
    bit-exact.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "nets": {name: (net.to_dict() if isinstance(net, GaussianPolicy) else {"kind": "mlp", **net.to_dict()})
                 for name, net in nets.items()},
    }
    return write_json(path, payload)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Union[Mlp, GaussianPolicy]], Dict[str, Any]]:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        CheckpointError: If the file is not a readable checkpoint of a
            supported version.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an advscenario network checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has version {payload.get('version')}; this build reads version {CHECKPOINT_VERSION}"
        )
    nets: Dict[str, Union[Mlp, GaussianPolicy]] = {}
    try:
        for name, data in payload["nets"].items():
            nets[name] = GaussianPolicy.from_dict(data) if data.get("kind") == "gaussian-policy" else Mlp.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} is malformed: {e}") from e
    logger.debug("Loaded %d network(s) from %s", len(nets), path)
    return nets, payload.get("meta", {})

"""Batch imitation of the receding-horizon expert: collect observation/control
pairs from closed-loop runs, fit the dropout network on them, and check the
clone in closed loop.

Exploration noise is injected into the *actuated* control only; the
recorded label is always the expert's clean output, so sigma_explore=0
reproduces pure on-policy data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bayesnet import MLPArchitecture, NetParams, fit_network, init_params, mc_predict
from .cartpole import (
    SUCCESS_X_BOUND,
    CartPoleParams,
    CartPoleState,
    encode_observation,
    is_success,
    observation_dim,
    random_hanging_state,
    step,
)
from .ddp import MpcConfig, MpcExpert

__all__ = [
    "ExpertFailureError",
    "Dataset",
    "collect_dataset",
    "save_dataset",
    "load_dataset",
    "train",
    "DropoutPolicy",
    "ExpertActor",
    "EpisodeLog",
    "EvaluationResult",
    "evaluate_policy",
]


class ExpertFailureError(RuntimeError):
    """The expert left the track bounds in every collection episode."""


@dataclass
class Dataset:
    """Observation/control pairs plus the observation statistics used for
    network standardization (zero-variance dimensions get std 1)."""

    observations: np.ndarray
    controls: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray
    discarded_episodes: int = 0

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if len(self.observations) != len(self.controls):
            raise ValueError("observations and controls must have equal length")
        if np.any(self.obs_std <= 0):
            raise ValueError("obs_std entries must be > 0")

    def __len__(self) -> int:
        return len(self.controls)


def normalization_stats(observations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = observations.mean(axis=0)
    std = observations.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return mean, std


def collect_dataset(
    env_params: CartPoleParams,
    expert_config: MpcConfig,
    episodes: int,
    steps_per_episode: int,
    sigma_explore: float,
    rng: np.random.Generator,
    encoding: str = "sincos",
) -> Dataset:
    """Run the expert from randomized hanging starts and record its controls.

    Episodes in which the expert leaves |x| < 2.4 are discarded (and
    counted on the returned dataset). Raises ExpertFailureError if nothing
    survives.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if sigma_explore < 0:
        raise ValueError("sigma_explore must be >= 0")
    obs_list: list[np.ndarray] = []
    ctrl_list: list[float] = []
    discarded = 0
    for ep_rng in rng.spawn(episodes):
        expert = MpcExpert(expert_config)
        state = random_hanging_state(ep_rng)
        ep_obs: list[np.ndarray] = []
        ep_ctrl: list[float] = []
        failed = False
        for _ in range(steps_per_episode):
            state_arr = state.as_array()
            ep_obs.append(encode_observation(state_arr, encoding))
            label = expert.act(state_arr)
            ep_ctrl.append(label)
            actuated = label + sigma_explore * ep_rng.normal() if sigma_explore > 0 else label
            state = step(state, actuated, env_params)
            if not -SUCCESS_X_BOUND < state.x < SUCCESS_X_BOUND:
                failed = True
                break
        if failed:
            discarded += 1
        else:
            obs_list.extend(ep_obs)
            ctrl_list.extend(ep_ctrl)
    if not obs_list:
        raise ExpertFailureError(f"expert failed all {episodes} collection episodes")
    observations = np.asarray(obs_list)
    mean, std = normalization_stats(observations)
    return Dataset(
        observations=observations,
        controls=np.asarray(ctrl_list),
        obs_mean=mean,
        obs_std=std,
        discarded_episodes=discarded,
    )


def save_dataset(dataset: Dataset, path: str):
    """CSV with header obs_0..obs_{k-1},control; 17-significant-digit floats."""
    k = dataset.observations.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"obs_{i}" for i in range(k)] + ["control"])
        for obs, control in zip(dataset.observations, dataset.controls):
            writer.writerow([format(v, ".17g") for v in obs] + [format(control, ".17g")])


def load_dataset(path: str) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "control" or not header[0].startswith("obs_"):
            raise ValueError(f"{path} does not look like a dataset CSV")
        rows = [[float(v) for v in row] for row in reader]
    if not rows:
        raise ValueError(f"{path} contains no records")
    data = np.asarray(rows)
    observations, controls = data[:, :-1], data[:, -1]
    mean, std = normalization_stats(observations)
    return Dataset(observations=observations, controls=controls, obs_mean=mean, obs_std=std)


def train(
    dataset: Dataset,
    architecture: MLPArchitecture,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    rng: np.random.Generator,
    init_dropout: float = 0.1,
    lengthscale: float = 1e-2,
    temperature: float = 0.1,
) -> tuple[NetParams, list[float]]:
    """Clone the expert by mini-batch regression; returns params and the
    per-epoch mean loss curve."""
    if len(dataset) < 1:
        raise ValueError("dataset must be non-empty")
    if architecture.n_inputs != dataset.observations.shape[1]:
        raise ValueError(
            f"architecture expects {architecture.n_inputs} inputs but dataset "
            f"observations have {dataset.observations.shape[1]}"
        )
    params = init_params(
        architecture, rng, init_dropout=init_dropout,
        obs_mean=dataset.obs_mean, obs_std=dataset.obs_std,
    )
    curve = fit_network(
        params, dataset.observations, dataset.controls,
        epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        rng=rng, lengthscale=lengthscale, temperature=temperature,
    )
    return params, curve


class DropoutPolicy:
    """Closed-loop actor: Monte-Carlo predictive mean, clamped to the
    actuator limit. Read-only on params, safe to share across rollouts."""

    def __init__(self, params: NetParams, encoding: str = "sincos",
                 n_samples: int = 30, force_limit: float = 10.0):
        if observation_dim(encoding) != params.architecture.n_inputs:
            raise ValueError(
                f"{encoding!r} observations have {observation_dim(encoding)} entries "
                f"but the network expects {params.architecture.n_inputs}"
            )
        self.params = params
        self.encoding = encoding
        self.n_samples = n_samples
        self.force_limit = force_limit

    def reset(self):
        pass

    def predict(self, observation: np.ndarray, rng: np.random.Generator):
        return mc_predict(self.params, observation, self.n_samples, rng)

    def act(self, state_array: np.ndarray, rng: np.random.Generator) -> float:
        obs = encode_observation(state_array, self.encoding)
        pred = self.predict(obs, rng)
        return float(np.clip(pred.mean, -self.force_limit, self.force_limit))


class ExpertActor:
    """Adapter giving the MPC expert the same closed-loop actor interface."""

    def __init__(self, config: MpcConfig):
        self.config = config
        self.expert = MpcExpert(config)

    def reset(self):
        self.expert = MpcExpert(self.config)

    def act(self, state_array: np.ndarray, rng: np.random.Generator) -> float:
        return self.expert.act(state_array)


@dataclass
class EpisodeLog:
    episode: int
    success: bool
    final_state: CartPoleState
    steps: int


@dataclass
class EvaluationResult:
    success_rate: float
    episodes: list[EpisodeLog] = field(default_factory=list)


def evaluate_policy(
    actor,
    env_params: CartPoleParams,
    episodes: int,
    T: int,
    rng: np.random.Generator,
) -> EvaluationResult:
    """Clean closed-loop rollouts from hanging starts; success judged at step T."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    logs = []
    for index, ep_rng in enumerate(rng.spawn(episodes)):
        actor.reset()
        state = random_hanging_state(ep_rng)
        for _ in range(T):
            state = step(state, actor.act(state.as_array(), ep_rng), env_params)
        logs.append(EpisodeLog(episode=index, success=is_success(state),
                               final_state=state, steps=T))
    rate = sum(log.success for log in logs) / episodes
    return EvaluationResult(success_rate=rate, episodes=logs)

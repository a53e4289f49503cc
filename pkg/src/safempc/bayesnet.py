"""From-scratch feedforward network with per-layer dropout whose rates are
learned jointly with the weights.

The output layer is split into a mean head and a log-variance head. The
log-variance head captures input-dependent observation noise through the
negative-log-likelihood-style loss; structural (model) uncertainty comes
from Monte-Carlo sampling of hard dropout masks at prediction time. During
training the binary masks are replaced by their smooth relaxation so the
dropout-rate logits receive gradients, and a dataset-size-scaled
regularizer keeps weights and dropout rates in check.

All gradients are computed by hand-written reverse-mode backpropagation;
the optimizer is Adam. Inputs are standardized with statistics stored on
the parameter record so checkpoints are self-contained.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, xlogy

__all__ = [
    "ShapeMismatchError",
    "NonFiniteLossError",
    "MLPArchitecture",
    "NetParams",
    "PredictiveOutput",
    "DROPOUT_OFF_LOGIT",
    "init_params",
    "forward",
    "heteroscedastic_loss",
    "concrete_regularizer",
    "relaxed_masks",
    "sample_hard_masks",
    "loss_and_grads",
    "AdamState",
    "train_step",
    "mc_predict",
    "fit_network",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "safempc-checkpoint"
CHECKPOINT_VERSION = 1

# expit(-1000) underflows to exactly 0.0: the documented "dropout off" logit.
DROPOUT_OFF_LOGIT = -1000.0

DEFAULT_TEMPERATURE = 0.1
DEFAULT_LENGTHSCALE = 1e-2


class ShapeMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MLPArchitecture:
    """Layer widths and activation; the output is always (mean, log-variance)."""

    n_inputs: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.n_inputs < 1:
            raise ValueError("n_inputs must be >= 1")
        if len(self.hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self) -> tuple[int, ...]:
        """Widths including input and the 2-unit output head."""
        return (self.n_inputs, *self.hidden, 2)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def fan_ins(self) -> tuple[int, ...]:
        return self.widths[:-1]


@dataclass
class NetParams:
    """Weights, biases, per-layer dropout logits, and input statistics.

    dropout_logits[i] parameterizes the drop probability of layer i's
    input units as p_i = expit(logit); masks keep a unit with probability
    1 - p_i. Sigmoid parameterization keeps p_i in (0, 1) for finite
    logits; DROPOUT_OFF_LOGIT underflows to p_i = 0 exactly.
    """

    architecture: MLPArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_logits: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray

    def __post_init__(self):
        widths = self.architecture.widths
        if len(self.weights) != self.architecture.n_layers:
            raise ShapeMismatchError("wrong number of weight matrices")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ShapeMismatchError(
                    f"layer {i}: expected W {(widths[i + 1], widths[i])}, got {W.shape}"
                )
        if self.dropout_logits.shape != (self.architecture.n_layers,):
            raise ShapeMismatchError("need one dropout logit per layer")
        if self.obs_mean.shape != (widths[0],) or self.obs_std.shape != (widths[0],):
            raise ShapeMismatchError("normalization stats must match the input width")
        if np.any(self.obs_std <= 0):
            raise ValueError("obs_std entries must be > 0")

    def dropout_rates(self) -> np.ndarray:
        return expit(self.dropout_logits)

    def parameter_list(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        out.append(self.dropout_logits)
        return out

    def copy(self) -> "NetParams":
        return NetParams(
            architecture=self.architecture,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout_logits=self.dropout_logits.copy(),
            obs_mean=self.obs_mean.copy(),
            obs_std=self.obs_std.copy(),
        )


@dataclass(frozen=True)
class PredictiveOutput:
    """Mean control plus noise/model/total variances of one prediction."""

    mean: float
    aleatoric: float
    epistemic: float
    total: float

    def __post_init__(self):
        if self.aleatoric < 0 or self.epistemic < 0:
            raise ValueError("variances must be >= 0")
        if self.total != self.aleatoric + self.epistemic:
            raise ValueError("total variance must equal aleatoric + epistemic")

    @staticmethod
    def of(mean: float, aleatoric: float, epistemic: float) -> "PredictiveOutput":
        return PredictiveOutput(float(mean), float(aleatoric), float(epistemic),
                                float(aleatoric) + float(epistemic))


def init_params(
    architecture: MLPArchitecture,
    rng: np.random.Generator,
    init_dropout: float = 0.1,
    obs_mean=None,
    obs_std=None,
) -> NetParams:
    """He (relu) or Glorot (tanh) weight init, zero biases, shared dropout rate."""
    if not 0.0 < init_dropout < 1.0:
        raise ValueError("init_dropout must lie in (0, 1)")
    widths = architecture.widths
    weights, biases = [], []
    for i in range(architecture.n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        if architecture.activation == "relu":
            scale = np.sqrt(2.0 / fan_in)
        else:
            scale = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    logit = float(np.log(init_dropout / (1.0 - init_dropout)))
    return NetParams(
        architecture=architecture,
        weights=weights,
        biases=biases,
        dropout_logits=np.full(architecture.n_layers, logit),
        obs_mean=np.zeros(widths[0]) if obs_mean is None else np.asarray(obs_mean, dtype=float),
        obs_std=np.ones(widths[0]) if obs_std is None else np.asarray(obs_std, dtype=float),
    )


def _activation(arch: MLPArchitecture, H):
    return np.maximum(H, 0.0) if arch.activation == "relu" else np.tanh(H)


def _activation_grad(arch: MLPArchitecture, H, A):
    return (H > 0.0).astype(float) if arch.activation == "relu" else 1.0 - A * A


def _forward_batch(params: NetParams, X: np.ndarray, masks: list[np.ndarray]):
    """Masked forward pass; returns per-layer caches for backprop.

    X is raw (unstandardized) input of shape (M, n_in); masks[i] broadcasts
    against the input of layer i, shape (M, fan_in) or (fan_in,).
    """
    arch = params.architecture
    A = (X - params.obs_mean) / params.obs_std
    activations = [A]
    preacts = []
    masked = []
    for i in range(arch.n_layers):
        Min = activations[-1] * masks[i]
        H = Min @ params.weights[i].T + params.biases[i]
        masked.append(Min)
        preacts.append(H)
        activations.append(_activation(arch, H) if i < arch.n_layers - 1 else H)
    return activations, preacts, masked


def _check_masks(params: NetParams, masks):
    fan_ins = params.architecture.fan_ins()
    if len(masks) != len(fan_ins):
        raise ShapeMismatchError(f"need {len(fan_ins)} masks, got {len(masks)}")
    for i, (m, width) in enumerate(zip(masks, fan_ins)):
        if np.shape(m)[-1] != width:
            raise ShapeMismatchError(f"mask {i} must have width {width}, got {np.shape(m)[-1]}")


def forward(params: NetParams, x, masks) -> tuple[float, float]:
    """Deterministic masked forward pass of one input -> (mean, log-variance)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.architecture.n_inputs,):
        raise ShapeMismatchError(
            f"expected input of shape ({params.architecture.n_inputs},), got {x.shape}"
        )
    masks = [np.asarray(m, dtype=float) for m in masks]
    _check_masks(params, masks)
    activations, _, _ = _forward_batch(params, x[None, :], masks)
    out = activations[-1][0]
    return float(out[0]), float(out[1])


def heteroscedastic_loss(means, log_vars, targets) -> float:
    """Sum over samples of exp(-log s2)*(y - mu)^2 + log s2."""
    means = np.asarray(means, dtype=float)
    log_vars = np.asarray(log_vars, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if not (means.shape == log_vars.shape == targets.shape) or means.size < 1:
        raise ShapeMismatchError("means, log_vars, and targets must share a non-empty shape")
    return float(np.sum(np.exp(-log_vars) * (targets - means) ** 2 + log_vars))


def concrete_regularizer(
    params: NetParams, dataset_size: int, lengthscale: float = DEFAULT_LENGTHSCALE
) -> float:
    """Weight penalty scaled by the kept fraction plus dropout-rate entropy term.

    Per layer with drop rate p and fan-in K:
    l^2/(N(1-p)) * (||W||^2 + ||b||^2) + (K/N) * (p log p + (1-p) log(1-p)).
    """
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    if lengthscale <= 0:
        raise ValueError("lengthscale must be > 0")
    p = params.dropout_rates()
    total = 0.0
    for i in range(params.architecture.n_layers):
        sq = float(np.sum(params.weights[i] ** 2) + np.sum(params.biases[i] ** 2))
        fan_in = params.architecture.fan_ins()[i]
        total += lengthscale**2 / (dataset_size * (1.0 - p[i])) * sq
        total += fan_in / dataset_size * float(xlogy(p[i], p[i]) + xlogy(1.0 - p[i], 1.0 - p[i]))
    return total


def relaxed_masks(params: NetParams, uniforms, temperature: float = DEFAULT_TEMPERATURE):
    """Smooth near-binary masks from uniform draws; differentiable in the logits.

    z = sigmoid((logit(u) - rho)/tau), so a unit is kept (z ~ 1) with
    probability 1 - p as tau -> 0.
    """
    masks = []
    for rho, u in zip(params.dropout_logits, uniforms):
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        masks.append(expit((np.log(u) - np.log1p(-u) - rho) / temperature))
    return masks


def sample_hard_masks(params: NetParams, n_samples: int, rng: np.random.Generator):
    """Binary masks: unit kept with probability 1 - p per layer."""
    p = params.dropout_rates()
    return [
        (rng.random((n_samples, fan_in)) >= p[i]).astype(float)
        for i, fan_in in enumerate(params.architecture.fan_ins())
    ]


def loss_and_grads(
    params: NetParams,
    X: np.ndarray,
    y: np.ndarray,
    uniforms,
    dataset_size: int,
    lengthscale: float = DEFAULT_LENGTHSCALE,
    temperature: float = DEFAULT_TEMPERATURE,
    data_scale: float = 1.0,
):
    """Objective data_scale*heteroscedastic_loss + concrete_regularizer and its
    exact gradients w.r.t. every weight, bias, and dropout logit.

    ``uniforms`` fixes the mask randomness so the objective is a pure
    function of the parameters (finite-difference checkable).
    """
    arch = params.architecture
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    M = len(X)
    masks = relaxed_masks(params, uniforms, temperature)
    activations, preacts, masked = _forward_batch(params, X, masks)
    out = activations[-1]
    mu, s = out[:, 0], out[:, 1]

    inv_var = np.exp(-s)
    residual = y - mu
    data = float(np.sum(inv_var * residual**2 + s))
    objective = data_scale * data + concrete_regularizer(params, dataset_size, lengthscale)

    grad_out = np.empty_like(out)
    grad_out[:, 0] = -2.0 * inv_var * residual * data_scale
    grad_out[:, 1] = (1.0 - inv_var * residual**2) * data_scale

    p = params.dropout_rates()
    grad_W = [None] * arch.n_layers
    grad_b = [None] * arch.n_layers
    grad_rho = np.zeros(arch.n_layers)
    G = grad_out
    for i in range(arch.n_layers - 1, -1, -1):
        keep_scale = lengthscale**2 / (dataset_size * (1.0 - p[i]))
        grad_W[i] = G.T @ masked[i] + 2.0 * keep_scale * params.weights[i]
        grad_b[i] = G.sum(axis=0) + 2.0 * keep_scale * params.biases[i]
        dmasked = G @ params.weights[i]
        z = masks[i]
        dz = dmasked * activations[i]
        # dz/drho = -z(1-z)/tau, summed over batch and units
        grad_rho[i] = float(np.sum(dz * (-z * (1.0 - z) / temperature)))
        sq = float(np.sum(params.weights[i] ** 2) + np.sum(params.biases[i] ** 2))
        fan_in = arch.fan_ins()[i]
        grad_rho[i] += (
            lengthscale**2 * sq / dataset_size * p[i] / (1.0 - p[i])
            + fan_in / dataset_size * params.dropout_logits[i] * p[i] * (1.0 - p[i])
        )
        if i > 0:
            dA = dmasked * z
            G = dA * _activation_grad(arch, preacts[i - 1], activations[i])

    grads: list[np.ndarray] = []
    for gW, gb in zip(grad_W, grad_b):
        grads.append(gW)
        grads.append(gb)
    grads.append(grad_rho)
    return objective, grads


@dataclass
class AdamState:
    """First/second moment accumulators for a fixed parameter list."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def update(self, parameters: list[np.ndarray], grads: list[np.ndarray]):
        if not self.m:
            self.m = [np.zeros_like(p) for p in parameters]
            self.v = [np.zeros_like(p) for p in parameters]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (param, g) in enumerate(zip(parameters, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1**self.t)
            v_hat = self.v[i] / (1.0 - b2**self.t)
            param -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def train_step(
    params: NetParams,
    batch: tuple[np.ndarray, np.ndarray],
    opt: AdamState,
    rng: np.random.Generator,
    dataset_size: int | None = None,
    lengthscale: float = DEFAULT_LENGTHSCALE,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[NetParams, float]:
    """One SGD step: sample relaxed masks, backprop, apply Adam in place.

    The data term is averaged over the batch so the regularizer weight is
    independent of batch size. Raises NonFiniteLossError if the objective
    or any gradient is non-finite.
    """
    X, y = batch
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) < 1:
        raise ValueError("batch must be non-empty")
    if dataset_size is None:
        dataset_size = len(X)
    uniforms = [
        rng.random((len(X), fan_in)) for fan_in in params.architecture.fan_ins()
    ]
    loss, grads = loss_and_grads(
        params, X, y, uniforms, dataset_size, lengthscale, temperature,
        data_scale=1.0 / len(X),
    )
    if not np.isfinite(loss) or any(not np.isfinite(g).all() for g in grads):
        raise NonFiniteLossError(f"non-finite loss or gradient (loss={loss})")
    opt.update(params.parameter_list(), grads)
    return params, float(loss)


def mc_predict(
    params: NetParams, x, n_samples: int, rng: np.random.Generator
) -> PredictiveOutput:
    """Monte-Carlo prediction over hard dropout masks.

    The mean head's spread across samples estimates model (epistemic)
    variance; the averaged variance head gives noise (aleatoric) variance.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    x = np.asarray(x, dtype=float)
    if x.shape != (params.architecture.n_inputs,):
        raise ShapeMismatchError(
            f"expected input of shape ({params.architecture.n_inputs},), got {x.shape}"
        )
    masks = sample_hard_masks(params, n_samples, rng)
    X = np.broadcast_to(x, (n_samples, len(x)))
    activations, _, _ = _forward_batch(params, X, masks)
    mu = activations[-1][:, 0]
    log_var = activations[-1][:, 1]
    if np.all(mu == mu[0]) and np.all(log_var == log_var[0]):
        # degenerate sample set (e.g. dropout off): variance is exactly zero
        # and the mean is the deterministic single-pass output
        mean_out, log_var_out = forward(params, x, [m[0] for m in masks])
        return PredictiveOutput.of(mean_out, np.exp(log_var_out), 0.0)
    return PredictiveOutput.of(
        float(np.mean(mu)), float(np.mean(np.exp(log_var))), float(np.var(mu))
    )


def fit_network(
    params: NetParams,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    rng: np.random.Generator,
    lengthscale: float = DEFAULT_LENGTHSCALE,
    temperature: float = DEFAULT_TEMPERATURE,
) -> list[float]:
    """Shuffled mini-batch training; returns the per-epoch mean loss curve."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) != len(y) or len(X) < 1:
        raise ValueError("X and y must be non-empty and the same length")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    opt = AdamState(learning_rate=learning_rate)
    curve = []
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, loss = train_step(
                params, (X[idx], y[idx]), opt, rng,
                dataset_size=n, lengthscale=lengthscale, temperature=temperature,
            )
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return curve


def save_checkpoint(params: NetParams, path: str, encoding: str | None = None):
    """Versioned plain-text checkpoint; floats round-trip exactly via repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "n_inputs": params.architecture.n_inputs,
            "hidden": list(params.architecture.hidden),
            "activation": params.architecture.activation,
        },
        "normalization": {
            "mean": params.obs_mean.tolist(),
            "std": params.obs_std.tolist(),
        },
        "layers": [
            {
                "weight": params.weights[i].tolist(),
                "bias": params.biases[i].tolist(),
                "dropout_logit": float(params.dropout_logits[i]),
            }
            for i in range(params.architecture.n_layers)
        ],
    }
    if encoding is not None:
        doc["observation_encoding"] = encoding
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[NetParams, str | None]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    arch = MLPArchitecture(
        n_inputs=doc["architecture"]["n_inputs"],
        hidden=tuple(doc["architecture"]["hidden"]),
        activation=doc["architecture"]["activation"],
    )
    params = NetParams(
        architecture=arch,
        weights=[np.asarray(layer["weight"], dtype=float) for layer in doc["layers"]],
        biases=[np.asarray(layer["bias"], dtype=float) for layer in doc["layers"]],
        dropout_logits=np.asarray([layer["dropout_logit"] for layer in doc["layers"]], dtype=float),
        obs_mean=np.asarray(doc["normalization"]["mean"], dtype=float),
        obs_std=np.asarray(doc["normalization"]["std"], dtype=float),
    )
    return params, doc.get("observation_encoding")

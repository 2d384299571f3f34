"""Gaussian MLP policies, value functions, mixers and product-of-experts composition.

Everything runs in float64. All randomness (weight init, action noise) is drawn
from a caller-supplied ``numpy.random.Generator`` so runs are reproducible
bit for bit.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .envs import ACTION_DIM, STATE_DIM

DTYPE = torch.float64
HIDDEN = (64, 64)
FORMAT_VERSION = 1
LOG_2PI = math.log(2 * math.pi)


class CorruptedParametersError(RuntimeError):
    """A network produced non-finite outputs."""


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def mlp(rng: np.random.Generator, n_in: int, n_out: int, out_gain: float = 0.01,
        hidden=HIDDEN) -> nn.Sequential:
    """tanh MLP with orthogonal init (hidden gain sqrt(2), output ``out_gain``)."""
    sizes = (n_in, *hidden, n_out)
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lin = nn.Linear(a, b, dtype=DTYPE)
        last = i == len(sizes) - 2
        w = np.zeros((b, a)) if last and out_gain == 0 else _orthogonal(rng, b, a, out_gain if last else math.sqrt(2))
        with torch.no_grad():
            lin.weight.copy_(torch.as_tensor(w, dtype=DTYPE))
            lin.bias.zero_()
        layers.append(lin)
        if not last:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class GaussianMoments:
    """Per-dimension mean and variance of a diagonal Gaussian."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if np.any(self.var <= 0):
            raise ValueError("variance must be strictly positive")


def compose(means, variances, weights):
    """Weighted product of diagonal Gaussians along axis 0.

    Works on numpy arrays and torch tensors alike. ``weights`` broadcasts
    against ``means`` (shape (k, ...) with a trailing axis of size 1 or d).
    Returns ``(mean, var)``.
    """
    precision = weights / variances
    total = precision.sum(axis=0)
    mean = (precision * means).sum(axis=0) / total
    return mean, 1.0 / total


def poe_compose(experts: list[GaussianMoments], weights) -> GaussianMoments:
    """Compose expert Gaussians as prod_i N(mu_i, var_i)^w_i, renormalized.

    The result is Gaussian with precision sum_i w_i/var_i and the
    precision-weighted mean.
    """
    if not experts:
        raise ValueError("need at least one expert")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(experts),):
        raise ValueError(f"expected {len(experts)} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero; composition undefined")
    means = np.stack([e.mean for e in experts])
    variances = np.stack([e.var for e in experts])
    mean, var = compose(means, variances, w.reshape((-1,) + (1,) * (means.ndim - 1)))
    return GaussianMoments(mean, var)


def gaussian_log_prob(actions: torch.Tensor, mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Log density of a diagonal Gaussian, summed over the last axis."""
    return -0.5 * (((actions - mean) ** 2) / var + torch.log(var) + LOG_2PI).sum(-1)


class StochasticPolicy(nn.Module):
    """Shared sampling / scoring logic; subclasses implement ``moments``."""

    kind = "abstract"

    def moments(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def log_prob(self, obs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        mean, var = self.moments(obs)
        return gaussian_log_prob(actions, mean, var)

    def entropy(self, obs: torch.Tensor) -> torch.Tensor:
        _, var = self.moments(obs)
        return 0.5 * (torch.log(var) + 1 + LOG_2PI).sum(-1)

    @torch.no_grad()
    def act(self, states, rng: np.random.Generator, deterministic: bool = False):
        """Sample (or take the mean) action for a state or a batch of states.

        Returns ``(action, log_prob)`` as numpy values.
        """
        states = np.asarray(states, dtype=float)
        single = states.ndim == 1
        mean, var = self.moments(as_tensor(np.atleast_2d(states)))
        mean, var = mean.numpy(), var.numpy()
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise CorruptedParametersError(f"{self.kind} produced non-finite moments")
        if deterministic:
            action = mean.copy()
        else:
            action = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        logp = -0.5 * (((action - mean) ** 2) / var + np.log(var) + LOG_2PI).sum(-1)
        if single:
            return action[0], float(logp[0])
        return action, logp

    def clone(self):
        return copy.deepcopy(self)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


class GaussianPolicy(StochasticPolicy):
    """Diagonal Gaussian with MLP mean and state-independent log-std."""

    kind = "gaussian_policy"

    def __init__(self, rng: np.random.Generator, obs_dim: int = STATE_DIM, act_dim: int = ACTION_DIM,
                 log_std_init: float = 0.0):
        super().__init__()
        self.net = mlp(rng, obs_dim, act_dim, out_gain=0.01)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std_init), dtype=DTYPE))

    def moments(self, obs):
        mean = self.net(obs)
        var = torch.exp(2 * self.log_std).expand_as(mean)
        return mean, var

    def set_frozen(self, frozen: bool):
        for p in self.parameters():
            p.requires_grad_(not frozen)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


class ValueFunction(nn.Module):
    """MLP critic on standardized inputs: ``shift + scale * net((s - obs_mean) / obs_std)``.

    Warm-up sets the input and output statistics from its Monte Carlo data.
    """

    kind = "value_function"

    def __init__(self, rng: np.random.Generator, obs_dim: int = STATE_DIM):
        super().__init__()
        self.net = mlp(rng, obs_dim, 1, out_gain=1.0)
        self.register_buffer("shift", torch.zeros((), dtype=DTYPE))
        self.register_buffer("scale", torch.ones((), dtype=DTYPE))
        self.register_buffer("obs_mean", torch.zeros(obs_dim, dtype=DTYPE))
        self.register_buffer("obs_std", torch.ones(obs_dim, dtype=DTYPE))

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.shift + self.scale * self.net((obs - self.obs_mean) / self.obs_std).squeeze(-1)

    @torch.no_grad()
    def predict(self, states) -> np.ndarray:
        return self(as_tensor(states)).numpy()


class MixerFunction(nn.Module):
    """State-conditioned softmax weights over ``k`` experts.

    The output layer starts at zero, so initial weights are exactly uniform.
    """

    kind = "mixer"

    def __init__(self, rng: np.random.Generator, k: int, obs_dim: int = STATE_DIM):
        super().__init__()
        if k < 1:
            raise ValueError("mixer needs at least one expert")
        self.k = k
        self.net = mlp(rng, obs_dim, k, out_gain=0.0)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(obs), dim=-1)


class MixturePolicy(StochasticPolicy):
    """Product-of-experts policy: experts shared, weights from one mixer."""

    kind = "mixture_policy"

    def __init__(self, experts: list[GaussianPolicy], mixer: MixerFunction):
        super().__init__()
        if mixer.k != len(experts):
            raise ValueError(f"mixer arity {mixer.k} != {len(experts)} experts")
        self.experts = nn.ModuleList(experts)
        self.mixer = mixer

    def moments(self, obs):
        means, variances = zip(*(e.moments(obs) for e in self.experts))
        weights = self.mixer(obs).movedim(-1, 0).unsqueeze(-1)  # (k, [batch,] 1)
        return compose(torch.stack(means), torch.stack(variances), weights)


def mixture_act(experts: list[GaussianPolicy], mixer: MixerFunction, s, rng, deterministic=False):
    """Sample from the product-of-experts policy defined by ``experts`` and ``mixer``."""
    return MixturePolicy(list(experts), mixer).act(s, rng, deterministic)


# -- checkpoints ----------------------------------------------------------

def _linear_layers(module: nn.Module) -> list[nn.Linear]:
    return [m for m in module.modules() if isinstance(m, nn.Linear)]


def to_checkpoint(model: nn.Module) -> dict:
    """Serialize a policy / value function / mixer to a JSON-able dict."""
    if isinstance(model, MixturePolicy):
        return {
            "format_version": FORMAT_VERSION,
            "kind": model.kind,
            "experts": [to_checkpoint(e) for e in model.experts],
            "mixer": to_checkpoint(model.mixer),
        }
    layers = [
        {
            "shape": list(lin.weight.shape),
            "weight": lin.weight.detach().reshape(-1).tolist(),
            "bias": lin.bias.detach().tolist(),
        }
        for lin in _linear_layers(model.net)
    ]
    doc = {"format_version": FORMAT_VERSION, "kind": model.kind, "layers": layers}
    if isinstance(model, GaussianPolicy):
        doc["log_std"] = model.log_std.detach().tolist()
        doc["frozen"] = model.frozen
    elif isinstance(model, ValueFunction):
        doc["shift"], doc["scale"] = model.shift.item(), model.scale.item()
        doc["obs_mean"], doc["obs_std"] = model.obs_mean.tolist(), model.obs_std.tolist()
    return doc


def from_checkpoint(doc: dict) -> nn.Module:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    kind = doc["kind"]
    if kind == MixturePolicy.kind:
        return MixturePolicy([from_checkpoint(e) for e in doc["experts"]], from_checkpoint(doc["mixer"]))
    shapes = [tuple(layer["shape"]) for layer in doc["layers"]]
    obs_dim, n_out = shapes[0][1], shapes[-1][0]
    hidden = tuple(s[0] for s in shapes[:-1])
    rng = np.random.default_rng(0)
    if kind == GaussianPolicy.kind:
        model = GaussianPolicy(rng, obs_dim, n_out)
        with torch.no_grad():
            model.log_std.copy_(torch.tensor(doc["log_std"], dtype=DTYPE))
    elif kind == ValueFunction.kind:
        model = ValueFunction(rng, obs_dim)
    elif kind == MixerFunction.kind:
        model = MixerFunction(rng, n_out, obs_dim)
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    if hidden != HIDDEN:
        model.net = mlp(rng, obs_dim, n_out, hidden=hidden)
    for lin, layer in zip(_linear_layers(model.net), doc["layers"]):
        with torch.no_grad():
            lin.weight.copy_(torch.tensor(layer["weight"], dtype=DTYPE).reshape(layer["shape"]))
            lin.bias.copy_(torch.tensor(layer["bias"], dtype=DTYPE))
    if kind == ValueFunction.kind:
        model.shift.fill_(doc["shift"])
        model.scale.fill_(doc["scale"])
        model.obs_mean.copy_(torch.tensor(doc["obs_mean"], dtype=DTYPE))
        model.obs_std.copy_(torch.tensor(doc["obs_std"], dtype=DTYPE))
    if kind == GaussianPolicy.kind and doc.get("frozen"):
        model.set_frozen(True)
    return model


def checkpoint_bytes(model: nn.Module) -> bytes:
    return json.dumps(to_checkpoint(model), sort_keys=True).encode()


def checkpoint_hash(model: nn.Module) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def save_checkpoint(model: nn.Module, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> nn.Module:
    return from_checkpoint(json.loads(Path(path).read_text()))

"""Residual-MLP diffusion models and their training loop.

Four parameterizations share one network s_theta(x, t):

  EPSILON     eps_theta = s_theta                       (score only)
  ENERGY_L2   f = -1/2 ||s_theta||^2
  ENERGY_DAE  f = -1/2 ||x - s_theta||^2
  ENERGY_IP   f = x . s_theta

For the energy kinds eps_theta = -grad_x f, the unnormalised log-density at level t is
f / sigma_t and score = -eps_theta / sigma_t holds for every kind. Training an energy
model differentiates grad_x f with respect to the parameters (double backprop).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable

import numpy as np
import torch
from torch import nn

from services.errors import CapabilityError, ConfigError, NumericAbort, to_float, to_int
from services.rng import check_seed, stream
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("networks")

DTYPE = torch.float64
SMOOTH_ACTIVATIONS: dict[str, Callable[[], nn.Module]] = {
    "silu": nn.SiLU,
    "softplus": nn.Softplus,
    "tanh": nn.Tanh,
    "gelu": nn.GELU,
}
EMBED_MAX_PERIOD = 10000.0
EMBED_TIME_SCALE = 1000.0


class Parameterization(str, Enum):
    EPSILON = "EPSILON"
    ENERGY_L2 = "ENERGY_L2"
    ENERGY_DAE = "ENERGY_DAE"
    ENERGY_IP = "ENERGY_IP"

    @classmethod
    def parse(cls, value: Any) -> "Parameterization":
        try:
            return cls(str(value).strip().upper())
        except ValueError as exc:
            raise ConfigError(f"Unknown parameterization '{value}'") from exc

    @property
    def has_energy(self) -> bool:
        return self is not Parameterization.EPSILON


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 2
    time_embed_dim: int = 32
    hidden_dim: int = 128
    n_blocks: int = 4
    activation: str = "silu"
    zero_init_output: bool = True

    def __post_init__(self) -> None:
        if self.input_dim != 2:
            raise ConfigError(f"Invalid input_dim={self.input_dim}: only 2D models are supported")
        for name in ("time_embed_dim", "hidden_dim", "n_blocks"):
            value = to_int(getattr(self, name), name)
            if value < 1:
                raise ConfigError(f"Invalid {name}={value}: must be positive")
        if self.time_embed_dim % 2:
            raise ConfigError(f"Invalid time_embed_dim={self.time_embed_dim}: must be even")
        if self.activation not in SMOOTH_ACTIVATIONS:
            raise ConfigError(
                f"Invalid activation '{self.activation}': expected one of {sorted(SMOOTH_ACTIVATIONS)}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "time_embed_dim": self.time_embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_blocks": self.n_blocks,
            "activation": self.activation,
            "zero_init_output": self.zero_init_output,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "MlpArchitecture":
        return cls(
            input_dim=to_int(payload.get("input_dim", 2), "input_dim"),
            time_embed_dim=to_int(payload.get("time_embed_dim", 32), "time_embed_dim"),
            hidden_dim=to_int(payload.get("hidden_dim", 128), "hidden_dim"),
            n_blocks=to_int(payload.get("n_blocks", 4), "n_blocks"),
            activation=str(payload.get("activation", "silu")),
            zero_init_output=bool(payload.get("zero_init_output", True)),
        )


def timestep_embedding(t: torch.Tensor, T: int, dim: int) -> torch.Tensor:
    """Sinusoidal features of t / T."""
    half = dim // 2
    freqs = torch.exp(-math.log(EMBED_MAX_PERIOD) * torch.arange(half, dtype=DTYPE) / half)
    args = (t.to(DTYPE) / float(T) * EMBED_TIME_SCALE)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, hidden: int, activation: str) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(hidden, dtype=DTYPE)
        self.act = SMOOTH_ACTIVATIONS[activation]()
        self.inner = nn.Linear(hidden, 2 * hidden, dtype=DTYPE)
        self.outer = nn.Linear(2 * hidden, hidden, dtype=DTYPE)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.outer(self.act(self.inner(self.act(self.norm(h)))))


class ResidualMlp(nn.Module):
    def __init__(self, arch: MlpArchitecture, T: int) -> None:
        super().__init__()
        self.arch = arch
        self.T = T
        self.stem = nn.Linear(arch.input_dim + arch.time_embed_dim, arch.hidden_dim, dtype=DTYPE)
        self.blocks = nn.ModuleList([ResidualBlock(arch.hidden_dim, arch.activation) for _ in range(arch.n_blocks)])
        self.act = SMOOTH_ACTIVATIONS[arch.activation]()
        self.head = nn.Linear(arch.hidden_dim, arch.input_dim, dtype=DTYPE)
        if arch.zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.stem(torch.cat([x, timestep_embedding(t, self.T, self.arch.time_embed_dim)], dim=1))
        for block in self.blocks:
            h = block(h)
        return self.head(self.act(h))


@dataclass(eq=False)
class NeuralModel:
    arch: MlpArchitecture
    parameterization: Parameterization
    schedule: NoiseSchedule
    net: ResidualMlp
    name: str = "neural"

    @property
    def has_energy(self) -> bool:
        return self.parameterization.has_energy

    @property
    def T(self) -> int:
        return self.schedule.T

    def flat_params(self) -> np.ndarray:
        with torch.no_grad():
            return nn.utils.parameters_to_vector(self.net.parameters()).detach().cpu().numpy().copy()

    def load_flat_params(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        expected = sum(p.numel() for p in self.net.parameters())
        if vector.shape != (expected,):
            raise ConfigError(f"parameter vector has {vector.shape} entries, architecture needs {expected}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(torch.as_tensor(vector, dtype=DTYPE), self.net.parameters())

    def n_params(self) -> int:
        return int(sum(p.numel() for p in self.net.parameters()))

    # numpy-facing API shared with AnalyticModel -------------------------------------
    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        return -forward_eps(self, x, t) / self.schedule.sigma(t)

    def energy(self, x: np.ndarray, t: int) -> np.ndarray:
        """Unnormalised log-density f_theta / sigma_t."""
        return energy(self, x, t) / self.schedule.sigma(t)

    def energy_and_score(self, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.has_energy:
            raise CapabilityError(f"model '{self.name}' ({self.parameterization.value}) has no energy")
        xt = _points_tensor(x).requires_grad_(True)
        with torch.enable_grad():
            f = _energy_tensor(self, xt, _levels(t, xt.shape[0]))
            (grad,) = torch.autograd.grad(f.sum(), xt)
        sigma = self.schedule.sigma(t)
        return f.detach().numpy() / sigma, grad.detach().numpy() / sigma


def build_model(
    arch: MlpArchitecture,
    parameterization: Parameterization | str,
    schedule: NoiseSchedule,
    seed: int = 0,
    name: str = "neural",
) -> NeuralModel:
    torch.manual_seed(check_seed(seed))
    net = ResidualMlp(arch, schedule.T)
    return NeuralModel(
        arch=arch,
        parameterization=Parameterization.parse(parameterization) if isinstance(parameterization, str) else parameterization,
        schedule=schedule,
        net=net,
        name=name,
    )


def _points_tensor(x: np.ndarray) -> torch.Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return torch.as_tensor(arr.copy(), dtype=DTYPE)


def _levels(t: int | np.ndarray | torch.Tensor, n: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.to(torch.int64)
    arr = np.asarray(t, dtype=np.int64)
    if arr.ndim == 0:
        arr = np.full(n, int(arr))
    return torch.as_tensor(arr)


def _energy_tensor(m: NeuralModel, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    s = m.net(x, t)
    kind = m.parameterization
    if kind is Parameterization.ENERGY_L2:
        return -0.5 * (s * s).sum(dim=1)
    if kind is Parameterization.ENERGY_DAE:
        r = x - s
        return -0.5 * (r * r).sum(dim=1)
    if kind is Parameterization.ENERGY_IP:
        return (x * s).sum(dim=1)
    raise CapabilityError(f"model '{m.name}' ({kind.value}) has no energy")


def _eps_tensor(m: NeuralModel, x: torch.Tensor, t: torch.Tensor, create_graph: bool) -> torch.Tensor:
    if m.parameterization is Parameterization.EPSILON:
        return m.net(x, t)
    if not x.requires_grad:
        x = x.requires_grad_(True)
    with torch.enable_grad():
        f = _energy_tensor(m, x, t)
        (grad,) = torch.autograd.grad(f.sum(), x, create_graph=create_graph)
    return -grad


def forward_eps(m: NeuralModel, x: np.ndarray, t: int | np.ndarray) -> np.ndarray:
    xt = _points_tensor(x)
    levels = _levels(t, xt.shape[0])
    if m.parameterization is Parameterization.EPSILON:
        with torch.no_grad():
            return m.net(xt, levels).numpy()
    return _eps_tensor(m, xt, levels, create_graph=False).detach().numpy()


def energy(m: NeuralModel, x: np.ndarray, t: int | np.ndarray) -> np.ndarray:
    """Scalar potential f_theta(x, t) per point."""
    if not m.has_energy:
        raise CapabilityError(f"model '{m.name}' ({m.parameterization.value}) has no energy")
    xt = _points_tensor(x)
    with torch.no_grad():
        return _energy_tensor(m, xt, _levels(t, xt.shape[0])).numpy()


def _dsm_loss_tensor(m: NeuralModel, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    abar = torch.as_tensor(m.schedule.alpha_bars, dtype=DTYPE)[t - 1]
    x_t = torch.sqrt(abar)[:, None] * x0 + torch.sqrt(1.0 - abar)[:, None] * noise
    eps = _eps_tensor(m, x_t, t, create_graph=True)
    return ((noise - eps) ** 2).sum(dim=1).mean()


def dsm_loss(m: NeuralModel, batch: np.ndarray, t: int | np.ndarray, noise: np.ndarray) -> float:
    """Mean over the batch of ||eps - eps_theta(x_t, t)||^2."""
    x0 = _points_tensor(batch)
    with torch.enable_grad():
        loss = _dsm_loss_tensor(m, x0, _levels(t, x0.shape[0]), _points_tensor(noise))
    return float(loss.detach())


def dsm_loss_grad(m: NeuralModel, batch: np.ndarray, t: int | np.ndarray, noise: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the flat parameter vector."""
    x0 = _points_tensor(batch)
    m.net.zero_grad(set_to_none=True)
    with torch.enable_grad():
        loss = _dsm_loss_tensor(m, x0, _levels(t, x0.shape[0]), _points_tensor(noise))
        grads = torch.autograd.grad(loss, list(m.net.parameters()), allow_unused=True)
    flat = torch.cat(
        [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, m.net.parameters())
        ]
    )
    return float(loss.detach()), flat.detach().numpy()


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 15000
    batch_size: int = 1000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 500

    def __post_init__(self) -> None:
        if to_int(self.iterations, "iterations") < 0:
            raise ConfigError(f"Invalid iterations={self.iterations}: must be >= 0")
        if to_int(self.batch_size, "batch_size") < 1:
            raise ConfigError(f"Invalid batch_size={self.batch_size}: must be positive")
        for name in ("learning_rate", "adam_eps", "grad_clip"):
            if to_float(getattr(self, name), name) <= 0.0:
                raise ConfigError(f"Invalid {name}={getattr(self, name)}: must be positive")
        for name in ("adam_beta1", "adam_beta2", "ema_decay"):
            value = to_float(getattr(self, name), name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"Invalid {name}={value}: must lie in [0, 1)")
        check_seed(self.seed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "grad_clip": self.grad_clip,
            "ema_decay": self.ema_decay,
            "seed": self.seed,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "TrainConfig":
        defaults = cls()
        return cls(
            iterations=to_int(payload.get("iterations", defaults.iterations), "iterations"),
            batch_size=to_int(payload.get("batch_size", defaults.batch_size), "batch_size"),
            learning_rate=to_float(payload.get("learning_rate", defaults.learning_rate), "learning_rate"),
            adam_beta1=to_float(payload.get("adam_beta1", defaults.adam_beta1), "adam_beta1"),
            adam_beta2=to_float(payload.get("adam_beta2", defaults.adam_beta2), "adam_beta2"),
            adam_eps=to_float(payload.get("adam_eps", defaults.adam_eps), "adam_eps"),
            grad_clip=to_float(payload.get("grad_clip", defaults.grad_clip), "grad_clip"),
            ema_decay=to_float(payload.get("ema_decay", defaults.ema_decay), "ema_decay"),
            seed=to_int(payload.get("seed", defaults.seed), "seed"),
            log_every=to_int(payload.get("log_every", defaults.log_every), "log_every"),
        )


@dataclass
class TrainResult:
    model: NeuralModel
    losses: list[float] = field(default_factory=list)

    def smoothed(self, window: int = 100) -> np.ndarray:
        if not self.losses:
            return np.zeros(0)
        window = max(1, min(window, len(self.losses)))
        kernel = np.ones(window) / window
        return np.convolve(np.asarray(self.losses), kernel, mode="valid")


def train(
    m: NeuralModel,
    data_sampler: Callable[[int, np.random.Generator], np.ndarray],
    cfg: TrainConfig,
) -> TrainResult:
    """Equal-weight DSM over uniformly drawn levels with Adam, clipping and EMA.

    The returned model carries the EMA weights (the raw weights when ema_decay is 0).
    """
    T = m.schedule.T
    rng = stream(cfg.seed, purpose=3)
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(
        m.net.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )
    ema = [p.detach().clone() for p in m.net.parameters()]
    losses: list[float] = []
    LOGGER.info(
        "Starting training model=%s kind=%s iterations=%s batch=%s",
        m.name,
        m.parameterization.value,
        cfg.iterations,
        cfg.batch_size,
    )
    for iteration in range(cfg.iterations):
        x0 = np.asarray(data_sampler(cfg.batch_size, rng), dtype=np.float64)
        levels = rng.integers(1, T + 1, size=cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size, 2))
        optimizer.zero_grad(set_to_none=True)
        loss = _dsm_loss_tensor(m, _points_tensor(x0), torch.as_tensor(levels), _points_tensor(noise))
        value = float(loss.detach())
        if not math.isfinite(value):
            param_norm = float(np.linalg.norm(m.flat_params()))
            hist = np.bincount(levels, minlength=T + 1)[1:]
            raise NumericAbort(
                f"non-finite training loss at iteration {iteration}",
                {"iteration": iteration, "t_histogram": hist.tolist(), "param_norm": param_norm},
            )
        loss.backward()
        nn.utils.clip_grad_norm_(m.net.parameters(), cfg.grad_clip)
        optimizer.step()
        if cfg.ema_decay > 0.0:
            with torch.no_grad():
                for shadow, p in zip(ema, m.net.parameters()):
                    shadow.mul_(cfg.ema_decay).add_(p.detach(), alpha=1.0 - cfg.ema_decay)
        losses.append(value)
        if cfg.log_every and (iteration + 1) % cfg.log_every == 0:
            LOGGER.info("iteration=%s loss=%.5f", iteration + 1, float(np.mean(losses[-cfg.log_every :])))

    if cfg.iterations and cfg.ema_decay > 0.0:
        with torch.no_grad():
            for shadow, p in zip(ema, m.net.parameters()):
                p.copy_(shadow)
    return TrainResult(model=m, losses=losses)


def relative_score_mse(m: Any, reference: Any, t: int, probes: np.ndarray) -> float:
    """mean ||s_model - s_ref||^2 / mean ||s_ref||^2 over the probes."""
    s_model = m.score(probes, t)
    s_ref = reference.score(probes, t)
    return float(np.mean(np.sum((s_model - s_ref) ** 2, axis=1)) / np.mean(np.sum(s_ref**2, axis=1)))


def clone_model(m: NeuralModel) -> NeuralModel:
    copy = build_model(m.arch, m.parameterization, m.schedule, name=m.name)
    copy.load_flat_params(m.flat_params())
    return replace(copy, name=m.name)

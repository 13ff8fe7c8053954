"""
Diffusion Schedule Module
Forward noising process, variance schedule and the epsilon training objective
"""

from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from models.exceptions import ScheduleError, ShapeError

Timestep = Union[int, torch.Tensor]

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Variance schedule over T discrete timesteps

    Arrays are float64. Checkpoints store `to_dict()` and rebuild the schedule
    with `schedule_from_dict`, so sampling uses the betas training saw.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        if self.T < 1:
            raise ScheduleError(f"timestep count must be >= 1, got {self.T}")
        for name in ("beta", "alpha", "alpha_bar"):
            values = getattr(self, name)
            if values.shape != (self.T,):
                raise ScheduleError(f"{name} has shape {values.shape}, expected ({self.T},)")
            values.setflags(write=False)
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ScheduleError("every beta must lie in the open interval (0, 1)")

    def check_timestep(self, t: Timestep) -> None:
        """Raise ScheduleError if any timestep falls outside [0, T)"""
        if isinstance(t, torch.Tensor):
            if t.numel() == 0:
                return
            low, high = int(t.min()), int(t.max())
        else:
            low = high = int(t)
        if low < 0 or high >= self.T:
            raise ScheduleError(f"timestep out of range [0, {self.T}): got {low}..{high}")

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) per timestep"""
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def to_dict(self) -> Dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
            "betas": [float(b) for b in self.beta],
        }

    def matches(self, other: "NoiseSchedule") -> bool:
        """Same timestep count and bitwise-equal betas"""
        return self.T == other.T and np.array_equal(self.beta, other.beta)


def from_betas(betas: Sequence[float], kind: str = "custom") -> NoiseSchedule:
    """Build a schedule from an explicit beta array"""
    beta = np.asarray(betas, dtype=np.float64).copy()
    if beta.ndim != 1 or beta.size < 1:
        raise ScheduleError("betas must be a non-empty 1-D sequence")
    alpha = 1.0 - beta
    return NoiseSchedule(T=int(beta.size), beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), kind=kind)


def make_schedule(T: int = 1000,
                  beta_start: float = 1e-4,
                  beta_end: float = 2e-2,
                  kind: str = "linear") -> NoiseSchedule:
    """
    Create a noise schedule

    Args:
        T: Number of diffusion timesteps
        beta_start: First variance increment
        beta_end: Last variance increment (inclusive)
        kind: Schedule family; only 'linear' is supported

    Returns:
        NoiseSchedule: beta, alpha and cumulative alpha_bar arrays
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind '{kind}', expected one of {SCHEDULE_KINDS}")

    return from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64), kind=kind)


def schedule_from_dict(data: Dict) -> NoiseSchedule:
    """Rebuild a schedule written by NoiseSchedule.to_dict"""
    try:
        sched = from_betas(data["betas"], kind=str(data.get("kind", "custom")))
        T = int(data["T"])
    except (KeyError, TypeError, ValueError) as e:
        raise ScheduleError(f"malformed schedule record: {e}") from e
    if sched.T != T:
        raise ScheduleError(f"schedule record lists {sched.T} betas for T={T}")
    return sched


def _coefficient(values: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at t, broadcastable against `like`"""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.shape[0] != like.shape[0]:
            raise ShapeError(f"{t.shape[0]} timesteps for a batch of {like.shape[0]}")
        return table[t.long().to(like.device)].reshape(-1, *([1] * (like.dim() - 1)))
    return table[int(t)]


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """
    Sample x_t from q(x_t | x_0) in closed form

    Args:
        x0: Clean sample; a leading batch axis is required when t is a tensor
        t: Integer timestep or a 1-D tensor with one timestep per batch item
        eps: Gaussian noise with x0's shape
        sched: Noise schedule

    Returns:
        Tensor: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
    """
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    sched.check_timestep(t)

    signal = _coefficient(np.sqrt(sched.alpha_bar), t, x0)
    noise = _coefficient(np.sqrt(1.0 - sched.alpha_bar), t, x0)
    return signal * x0 + noise * eps


def training_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise over all elements"""
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(
            f"loss shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}"
        )
    return F.mse_loss(eps_pred, eps_true, reduction="mean")


def iterative_forward(x0: torch.Tensor,
                      t: int,
                      noise_stream: Sequence[torch.Tensor],
                      sched: NoiseSchedule) -> torch.Tensor:
    """
    Apply the single-step kernel q(x_i | x_{i-1}) for i = 0..t

    Verification oracle for the marginal statistics of q_sample.
    """
    sched.check_timestep(t)
    if len(noise_stream) != t + 1:
        raise ShapeError(f"noise stream needs {t + 1} entries, got {len(noise_stream)}")

    x = x0
    for i, noise in enumerate(noise_stream):
        if noise.shape != x0.shape:
            raise ShapeError(f"noise entry {i} has shape {tuple(noise.shape)}")
        x = float(np.sqrt(sched.alpha[i])) * x + float(np.sqrt(sched.beta[i])) * noise
    return x

"""Closed-form DDIM arithmetic: noising, sampling step, inversion step.

All functions are pure. Latents may be numpy arrays or torch tensors; the
coefficient tables are always float64 numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012
BETA_SCHEDULES = ("linear", "scaled_linear")


@dataclass(frozen=True)
class SchedulerParams:
    num_train_steps: int
    # sampling order (descending train steps)
    inference_timesteps: tuple[int, ...]
    alpha_bar: np.ndarray = field(repr=False)
    # per inference step, aligned with inference_timesteps
    alpha_bar_prev: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    beta_schedule: str = "scaled_linear"

    @property
    def T(self) -> int:
        return len(self.inference_timesteps)

    @property
    def inversion_timesteps(self) -> tuple[int, ...]:
        return tuple(reversed(self.inference_timesteps))

    def index_of(self, t: int) -> int:
        try:
            return self.inference_timesteps.index(int(t))
        except ValueError:
            raise ScheduleError(f"timestep {t} is not an inference step of this schedule") from None

    def coefficients(self, t: int) -> tuple[float, float]:
        i = self.index_of(t)
        return float(self.phi[i]), float(self.psi[i])

    def to_dict(self) -> dict:
        return {
            "num_train_steps": self.num_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "beta_schedule": self.beta_schedule,
            "inference_timesteps": list(self.inference_timesteps),
            "alpha_bar": self.alpha_bar.tolist(),
            "alpha_bar_prev": self.alpha_bar_prev.tolist(),
            "phi": self.phi.tolist(),
            "psi": self.psi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerParams":
        return cls(
            num_train_steps=int(d["num_train_steps"]),
            inference_timesteps=tuple(int(t) for t in d["inference_timesteps"]),
            alpha_bar=np.asarray(d["alpha_bar"], dtype=np.float64),
            alpha_bar_prev=np.asarray(d["alpha_bar_prev"], dtype=np.float64),
            phi=np.asarray(d["phi"], dtype=np.float64),
            psi=np.asarray(d["psi"], dtype=np.float64),
            beta_start=float(d.get("beta_start", DEFAULT_BETA_START)),
            beta_end=float(d.get("beta_end", DEFAULT_BETA_END)),
            beta_schedule=str(d.get("beta_schedule", "scaled_linear")),
        )

    def same_schedule(self, other: "SchedulerParams") -> bool:
        return (
            self.num_train_steps == other.num_train_steps
            and self.inference_timesteps == other.inference_timesteps
            and np.array_equal(self.alpha_bar, other.alpha_bar)
        )


def ddim_coefficients(alpha_bar_t, alpha_bar_prev):
    """Return (phi, psi) for stepping from alpha_bar_t to alpha_bar_prev."""
    alpha_bar_t = np.asarray(alpha_bar_t, dtype=np.float64)
    alpha_bar_prev = np.asarray(alpha_bar_prev, dtype=np.float64)
    phi = np.sqrt(alpha_bar_prev) / np.sqrt(alpha_bar_t)
    psi = np.sqrt(alpha_bar_prev) * (
        np.sqrt(1.0 / alpha_bar_prev - 1.0) - np.sqrt(1.0 / alpha_bar_t - 1.0)
    )
    return phi, psi


def schedule_from_alpha_bar(alpha_bar: np.ndarray, T: int, beta_start: float = DEFAULT_BETA_START,
                            beta_end: float = DEFAULT_BETA_END,
                            beta_schedule: str = "custom") -> SchedulerParams:
    """Build inference tables for an arbitrary cumulative-alpha array.

    Timesteps use "leading" spacing: ``arange(T) * (N // T)``. The step out of
    the first timestep goes to alpha_bar = 1 (clean data).
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    n = len(alpha_bar)
    if not 1 <= T <= n:
        raise ScheduleError(f"need 1 <= T <= num_train_steps, got T={T}, num_train_steps={n}")
    if np.any(np.diff(alpha_bar) >= 0) or alpha_bar[0] > 1 or alpha_bar[-1] <= 0:
        raise ScheduleError("alpha_bar must be strictly decreasing within (0, 1]")
    stride = n // T
    ascending = np.arange(T) * stride
    prev = np.concatenate([[1.0], alpha_bar[ascending[:-1]]])
    phi, psi = ddim_coefficients(alpha_bar[ascending], prev)
    return SchedulerParams(
        num_train_steps=n,
        inference_timesteps=tuple(int(t) for t in ascending[::-1]),
        alpha_bar=alpha_bar,
        alpha_bar_prev=prev[::-1].copy(),
        phi=phi[::-1].copy(),
        psi=psi[::-1].copy(),
        beta_start=beta_start,
        beta_end=beta_end,
        beta_schedule=beta_schedule,
    )


def build_schedule(num_train_steps: int = 1000, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END, T: int = 50,
                   kind: str = "scaled_linear") -> SchedulerParams:
    """Beta schedule with T evenly strided inference steps.

    ``kind="scaled_linear"`` interpolates sqrt(beta) linearly (latent
    diffusion style).
    """
    if kind not in BETA_SCHEDULES:
        raise ScheduleError(f"unknown beta schedule {kind!r}; expected one of {BETA_SCHEDULES}")
    if num_train_steps < 1:
        raise ScheduleError("num_train_steps must be positive")
    if not 1 <= T <= num_train_steps:
        raise ScheduleError(f"need 1 <= T <= num_train_steps, got T={T}, num_train_steps={num_train_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    else:
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_steps, dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - betas)
    return schedule_from_alpha_bar(alpha_bar, T, beta_start, beta_end, kind)


def _shape(x):
    return tuple(x.shape)


def add_noise(z0, eps, t: int, params: SchedulerParams):
    """Forward noising: sqrt(a_t) * z0 + sqrt(1 - a_t) * eps."""
    if _shape(z0) != _shape(eps):
        raise ValueError(f"shape mismatch: z0 {_shape(z0)} vs eps {_shape(eps)}")
    if not 0 <= int(t) < params.num_train_steps:
        raise ScheduleError(f"train step {t} outside [0, {params.num_train_steps})")
    a = float(params.alpha_bar[int(t)])
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def ddim_step(z_t, noise_pred, t: int, params: SchedulerParams):
    """One deterministic sampling step z_t -> z_{t-1}."""
    phi, psi = params.coefficients(t)
    return phi * z_t + psi * noise_pred


def ddim_inverse_step(z_prev, noise_pred, t: int, params: SchedulerParams, eps: float = 1e-12):
    """Solve the sampling step for z_t given z_{t-1} and a noise prediction.

    The caller decides where ``noise_pred`` was evaluated: at z_{t-1} for plain
    DDIM inversion, at z_t for the fixed-point re-derivation.
    """
    phi, psi = params.coefficients(t)
    if abs(phi) < eps:
        raise ScheduleError(f"degenerate schedule: phi={phi} at t={t}")
    return (z_prev - psi * noise_pred) / phi

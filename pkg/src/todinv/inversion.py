"""Task-oriented DDIM inversion.

Each timestep takes one plain DDIM inversion step with the source prompt and
then tunes the grid cells the edit class allows, so that the prediction made
at the new latent reproduces that latent (the fixed point the plain step
only approximates).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Collection

import numpy as np
import torch

from .denoiser import CfgConfig, guided_prediction, unconditional_prediction
from .embedding_space import (GROUPS, EditClass, LayerGroup, PromptGrid, SharingMode, encode_prompt,
                              init_grid, selection_mask)
from .scheduler import SchedulerParams, ScheduleError, ddim_inverse_step

logger = logging.getLogger(__name__)


class MaskOverride(str, Enum):
    NONE = "none"
    NO_TOPO = "no_topo"
    REVERSE = "reverse"


class NumericalError(FloatingPointError):
    def __init__(self, message: str, timestep: int | None = None):
        super().__init__(message)
        self.timestep = timestep


@dataclass
class TodinvConfig:
    K: int = 10
    delta: float = 5e-6
    lr: float = 1e-3
    edit_class: EditClass = EditClass.GLOBAL_EDIT
    mask_override: MaskOverride = MaskOverride.NONE
    T: int = 50
    sharing_mode: SharingMode = SharingMode.P_STAR
    weight_decay: float = 0.01
    # "mean" keeps delta independent of latent size; "sum" is the raw squared norm
    reduction: str = "mean"
    # True runs the inversion with the guided prediction instead of the
    # conditional one; unstable at large scales
    guided_inversion: bool = False

    def __post_init__(self):
        self.edit_class = EditClass(self.edit_class)
        self.mask_override = MaskOverride(self.mask_override)
        self.sharing_mode = SharingMode(self.sharing_mode)
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    def mask(self) -> frozenset[tuple[int, LayerGroup]]:
        if self.mask_override is MaskOverride.NO_TOPO:
            return selection_mask(EditClass.GLOBAL_EDIT, self.T)
        return selection_mask(self.edit_class, self.T, reverse=self.mask_override is MaskOverride.REVERSE)


@dataclass
class StepOutcome:
    steps_used: int
    trace: list[float]
    initial_residual: float
    final_residual: float
    hit_nan: bool = False


@dataclass
class InversionResult:
    z_T: torch.Tensor
    grid: PromptGrid
    # ascending timesteps; index i of every per-step list refers to timesteps[i]
    timesteps: tuple[int, ...]
    residual_trace: list[list[float]]
    initial_residuals: list[float]
    final_residuals: list[float]
    steps_used: list[int]
    nan_flags: list[bool] = field(default_factory=list)
    trajectory: list[torch.Tensor] | None = None
    # best residual when each step was optimized; differs from final_residuals
    # only when later steps rewrite shared slots (P, P_PLUS)
    optimized_residuals: list[float] | None = None

    @property
    def mean_final_residual(self) -> float:
        return sum(self.final_residuals) / len(self.final_residuals)

    @property
    def total_steps(self) -> int:
        return sum(self.steps_used)


def _reduce(sq: torch.Tensor, reduction: str) -> torch.Tensor:
    return sq.mean() if reduction == "mean" else sq.sum()


def _residual(z_prev, z_t, cells, t, params, handle, cfg, uncond, reduction="mean"):
    pred = guided_prediction(handle, z_t, cells, t, cfg, uncond)
    z_prime = ddim_inverse_step(z_prev, pred, t, params)
    return z_prime, _reduce((z_t - z_prime) ** 2, reduction)


def fixed_point_residual(z_prev: torch.Tensor, z_t: torch.Tensor, grid: PromptGrid, t: int,
                         params: SchedulerParams, handle, cfg: CfgConfig,
                         reduction: str = "mean") -> tuple[torch.Tensor, float]:
    """Re-derive z_t from z_{t-1} with the prediction taken at z_t.

    Returns ``(z_t_prime, mean((z_t - z_t_prime)**2))``.
    """
    if z_prev.shape != z_t.shape:
        raise ValueError(f"shape mismatch: {tuple(z_prev.shape)} vs {tuple(z_t.shape)}")
    with torch.no_grad():
        z_prime, r = _residual(z_prev, z_t.detach(), grid.cells_at(t), t, params, handle, cfg, None, reduction)
    if not torch.isfinite(z_prime).all():
        raise NumericalError(f"non-finite prediction at timestep {t}", t)
    return z_prime, r.item()


def residual_grad(z_prev: torch.Tensor, z_t: torch.Tensor, cells: dict[LayerGroup, torch.Tensor], t: int,
                  params: SchedulerParams, handle, cfg: CfgConfig, wrt: Collection[LayerGroup] = GROUPS,
                  reduction: str = "mean") -> tuple[float, dict[LayerGroup, torch.Tensor]]:
    """Fixed-point residual and its gradient w.r.t. the cells of ``wrt``."""
    leaves = {g: cells[g].detach().clone().requires_grad_(g in wrt) for g in GROUPS}
    if not any(g in wrt for g in GROUPS):
        with torch.no_grad():
            _, r = _residual(z_prev, z_t, leaves, t, params, handle, cfg, None, reduction)
        return r.item(), {}
    with torch.enable_grad():
        _, r = _residual(z_prev.detach(), z_t.detach(), leaves, t, params, handle, cfg, None, reduction)
        wanted = [g for g in GROUPS if g in wrt]
        grads = torch.autograd.grad(r, [leaves[g] for g in wanted], allow_unused=True)
    out = {g: torch.zeros_like(leaves[g]) if d is None else d for g, d in zip(wanted, grads)}
    return r.item(), out


def optimize_timestep(z_prev: torch.Tensor, z_t: torch.Tensor, grid: PromptGrid,
                      mask: Collection[tuple[int, LayerGroup]], t: int, config: TodinvConfig,
                      params: SchedulerParams, handle, cfg: CfgConfig) -> StepOutcome:
    """Tune the masked cells of row ``t`` to shrink the fixed-point residual.

    Stops once the residual drops below ``config.delta`` or after ``config.K``
    updates, and leaves the best iterate seen in the grid. Cells outside the
    mask are never written.
    """
    if grid.frozen:
        raise RuntimeError("cannot optimize a frozen grid")
    row = grid.row_of(t)
    z_prev = z_prev.detach()
    z_t = z_t.detach()
    slot_ids = grid.writable_slots(((row, g) for g in GROUPS if (row, g) in mask), mask)
    with torch.no_grad():
        uncond = None if cfg.scale == 1 else unconditional_prediction(handle, z_t, t, cfg)

    if not slot_ids or config.K == 0:
        if not slot_ids:
            logger.debug("no selected cells at timestep %d", t)
        with torch.no_grad():
            _, r = _residual(z_prev, z_t, grid.cells_at(t), t, params, handle, cfg, uncond, config.reduction)
        v = r.item()
        return StepOutcome(0, [], v, v, not math.isfinite(v))

    leaves = {k: grid.slots[k].detach().clone().requires_grad_(True) for k in slot_ids}
    cells = {}
    for g in GROUPS:
        k = grid.slot_of(row, g)
        cells[g] = leaves[k] if k in leaves else grid.slots[k].detach()
    opt = torch.optim.AdamW(list(leaves.values()), lr=config.lr, weight_decay=config.weight_decay)
    leaf_list = list(leaves.values())

    def evaluate(need_grad: bool):
        with torch.set_grad_enabled(need_grad):
            return _residual(z_prev, z_t, cells, t, params, handle, cfg, uncond, config.reduction)[1]

    r = evaluate(config.K > 0)
    initial = r.item()
    if not math.isfinite(initial):
        raise NumericalError(f"non-finite residual at timestep {t}", t)
    best = initial
    best_values = [p.detach().clone() for p in leaf_list]
    trace: list[float] = []
    hit_nan = False
    while len(trace) < config.K and best >= config.delta:
        grads = torch.autograd.grad(r, leaf_list, allow_unused=True)
        for p, g in zip(leaf_list, grads):
            p.grad = g
        opt.step()
        r = evaluate(len(trace) + 1 < config.K)
        v = r.item()
        if not math.isfinite(v):
            logger.warning("non-finite residual at timestep %d, keeping best iterate", t)
            hit_nan = True
            break
        trace.append(v)
        if v < best:
            best = v
            best_values = [p.detach().clone() for p in leaf_list]

    with torch.no_grad():
        for k, value in zip(leaves, best_values):
            grid.slots[k].copy_(value)
    return StepOutcome(len(trace), trace, initial, best, hit_nan)


def _check_schedule(params: SchedulerParams, T: int) -> None:
    if params.T != T:
        raise ScheduleError(f"schedule has {params.T} inference steps but the config asks for T={T}")


def _inversion_cfg(cfg: CfgConfig, config: TodinvConfig) -> CfgConfig:
    return cfg if config.guided_inversion else CfgConfig(1.0, cfg.uncond_embedding, cfg.negative)


def naive_ddim_invert(z0: torch.Tensor, grid: PromptGrid, params: SchedulerParams, handle,
                      cfg: CfgConfig, keep_trajectory: bool = True,
                      guided_inversion: bool = False) -> InversionResult:
    """Plain DDIM inversion, recording the one-shot fixed-point residual per step.

    Like ``todinv_invert`` it uses the conditional prediction unless
    ``guided_inversion`` is set.
    """
    if not guided_inversion:
        cfg = CfgConfig(1.0, cfg.uncond_embedding, cfg.negative)
    if grid.timesteps != params.inversion_timesteps:
        raise ScheduleError("grid rows do not match the schedule's timesteps")
    z = z0.detach()
    traj = [z] if keep_trajectory else None
    residuals = []
    for t in params.inversion_timesteps:
        with torch.no_grad():
            cells = grid.cells_at(t)
            z_t = ddim_inverse_step(z, guided_prediction(handle, z, cells, t, cfg), t, params)
            if not torch.isfinite(z_t).all():
                raise NumericalError(f"non-finite latent at timestep {t}", t)
            _, r = _residual(z, z_t, cells, t, params, handle, cfg, None)
        residuals.append(r.item())
        if traj is not None:
            traj.append(z_t)
        z = z_t
    n = len(residuals)
    return InversionResult(z, grid, params.inversion_timesteps, [[] for _ in range(n)], residuals,
                           list(residuals), [0] * n, [False] * n, traj)


def source_grid(source_prompt: str, params: SchedulerParams, handle, dtype: torch.dtype,
                mode: SharingMode = SharingMode.P_STAR) -> PromptGrid:
    emb = encode_prompt(source_prompt, handle.tokens, handle.dim, dtype)
    return init_grid(emb, params.T, mode, timesteps=params.inversion_timesteps)


def todinv_invert(z0: torch.Tensor, source_prompt: str, task, config: TodinvConfig,
                  params: SchedulerParams, handle, cfg: CfgConfig,
                  keep_trajectory: bool = True) -> InversionResult:
    """Invert ``z0`` to noise while optimizing the grid cells the edit permits.

    ``task`` is an EditTask (its edit class is used) or None to take the class
    from ``config``.
    """
    _check_schedule(params, config.T)
    if task is not None:
        config = TodinvConfig(**{**config.__dict__, "edit_class": task.edit_class})
    cfg = _inversion_cfg(cfg, config)
    grid = source_grid(source_prompt, params, handle, z0.dtype, config.sharing_mode)
    mask = config.mask()
    z = z0.detach()
    traj = [z] if keep_trajectory else None
    traces, initial, final, used, flags = [], [], [], [], []
    pairs = []
    for row, t in enumerate(params.inversion_timesteps):
        src_cells = {g: grid.snapshot_cell(row, g) for g in GROUPS}
        with torch.no_grad():
            z_t = ddim_inverse_step(z, guided_prediction(handle, z, src_cells, t, cfg), t, params)
        if not torch.isfinite(z_t).all():
            raise NumericalError(f"non-finite latent at timestep {t}", t)
        out = optimize_timestep(z, z_t, grid, mask, t, config, params, handle, cfg)
        traces.append(out.trace)
        initial.append(out.initial_residual)
        final.append(out.final_residual)
        used.append(out.steps_used)
        flags.append(out.hit_nan)
        pairs.append((z, z_t))
        if traj is not None:
            traj.append(z_t)
        z = z_t
    optimized = list(final)
    if _shared_across_rows(grid):
        # score every step against the grid that is actually returned
        final = []
        for (z_prev, z_t), t in zip(pairs, params.inversion_timesteps):
            with torch.no_grad():
                _, r = _residual(z_prev, z_t, grid.cells_at(t), t, params, handle, cfg, None, config.reduction)
            final.append(r.item())
    return InversionResult(z, grid, params.inversion_timesteps, traces, initial, final, used, flags, traj,
                           optimized)


def _shared_across_rows(grid: PromptGrid) -> bool:
    layout = grid.layout
    return any(np.intersect1d(layout[r], layout[r + 1]).size for r in range(layout.shape[0] - 1))

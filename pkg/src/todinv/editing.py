"""Reconstruction and editing from an inverted latent.

Both run the same DDIM sampling loop; editing swaps in the renewed target
grid and lets an edit-method hook produce each noise prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .denoiser import CfgConfig, guided_prediction
from .embedding_space import EditClass, LayerGroup, PromptGrid, classify_edit, encode_prompt, renew_target
from .scheduler import SchedulerParams, ScheduleError, ddim_step


@dataclass
class EditTask:
    id: str
    image_ref: str
    source_prompt: str
    target_prompt: str
    edit_type: str
    multi_edit: bool = False
    background_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        # fail early on unknown labels
        classify_edit(self.edit_type, self.multi_edit)

    @property
    def edit_class(self) -> EditClass:
        return classify_edit(self.edit_type, self.multi_edit)


@dataclass
class EditStepContext:
    """What a hook sees at one sampling step."""
    step: int
    t: int
    z_t: torch.Tensor
    source_cells: dict[LayerGroup, torch.Tensor]
    target_cells: dict[LayerGroup, torch.Tensor]
    default_prediction: torch.Tensor
    handle: object
    cfg: CfgConfig
    params: SchedulerParams


@dataclass
class EditMethodHook:
    name: str
    apply: Callable[[EditStepContext], torch.Tensor]


def _identity(ctx: EditStepContext) -> torch.Tensor:
    return ctx.default_prediction


def _word_replace(ctx: EditStepContext) -> torch.Tensor:
    # the target prompt is the source prompt with the edited words swapped in;
    # sampling with its (renewed) embedding is the whole method
    uncond = ctx.source_cells if ctx.cfg.negative == "source" else None
    return guided_prediction(ctx.handle, ctx.z_t, ctx.target_cells, ctx.t, ctx.cfg, uncond_cells=uncond)


_HOOKS: dict[str, EditMethodHook] = {}


def register_hook(name: str, hook: EditMethodHook) -> None:
    if name in _HOOKS:
        raise ValueError(f"edit hook {name!r} is already registered")
    _HOOKS[name] = hook


def get_hook(name: str) -> EditMethodHook:
    try:
        return _HOOKS[name]
    except KeyError:
        raise KeyError(f"unknown edit hook {name!r}; registered: {sorted(_HOOKS)}") from None


def list_hooks() -> list[str]:
    return sorted(_HOOKS)


register_hook("identity", EditMethodHook("identity", _identity))
register_hook("word-replace", EditMethodHook("word-replace", _word_replace))


def _sample(z_T: torch.Tensor, grid: PromptGrid, params: SchedulerParams, handle, cfg: CfgConfig,
            hook: EditMethodHook | None = None, source_grid: PromptGrid | None = None,
            keep_trajectory: bool = False):
    if grid.timesteps != params.inversion_timesteps:
        raise ScheduleError(f"grid rows {grid.timesteps[:4]}... do not match the sampling schedule "
                            f"{params.inversion_timesteps[:4]}...")
    z = z_T.detach()
    traj = [z]
    with torch.no_grad():
        for step, t in enumerate(params.inference_timesteps):
            cells = grid.cells_at(t)
            src = source_grid.cells_at(t) if source_grid is not None else cells
            pred = guided_prediction(handle, z, cells, t, cfg,
                                     uncond_cells=src if cfg.negative == "source" else None)
            if hook is not None:
                pred = hook.apply(EditStepContext(step, t, z, src, cells, pred, handle, cfg, params))
            z = ddim_step(z, pred, t, params)
            if keep_trajectory:
                traj.append(z)
    return (z, traj) if keep_trajectory else z


def reconstruct(z_T: torch.Tensor, grid_opt: PromptGrid, params: SchedulerParams, handle, cfg: CfgConfig,
                keep_trajectory: bool = False):
    """DDIM sampling where step t is conditioned on the optimized row for t."""
    return _sample(z_T, grid_opt, params, handle, cfg, source_grid=grid_opt, keep_trajectory=keep_trajectory)


def edit(z_T: torch.Tensor, grid_opt: PromptGrid, target_prompt: str, hook: EditMethodHook | str,
         params: SchedulerParams, handle, cfg: CfgConfig, keep_trajectory: bool = False):
    """Sample from ``z_T`` with the target embedding renewed by the grid's offsets."""
    if isinstance(hook, str):
        hook = get_hook(hook)
    target = encode_prompt(target_prompt, grid_opt.tokens, grid_opt.dim, grid_opt.dtype)
    renewed = renew_target(grid_opt, target)
    return _sample(z_T, renewed, params, handle, cfg, hook, source_grid=grid_opt,
                   keep_trajectory=keep_trajectory)

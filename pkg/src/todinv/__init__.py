"""Task-oriented diffusion inversion on a trainable toy denoiser."""
from .denoiser import CfgConfig, ToyDenoiser, load_weights, save_weights, train_toy
from .editing import EditTask, edit, reconstruct
from .embedding_space import EditClass, LayerGroup, PromptGrid, SharingMode, classify_edit
from .inversion import MaskOverride, TodinvConfig, naive_ddim_invert, todinv_invert
from .scheduler import SchedulerParams, build_schedule, ddim_inverse_step, ddim_step

__version__ = "0.1.0"

__all__ = [
    "CfgConfig", "ToyDenoiser", "load_weights", "save_weights", "train_toy",
    "EditTask", "edit", "reconstruct",
    "EditClass", "LayerGroup", "PromptGrid", "SharingMode", "classify_edit",
    "MaskOverride", "TodinvConfig", "naive_ddim_invert", "todinv_invert",
    "SchedulerParams", "build_schedule", "ddim_inverse_step", "ddim_step",
]

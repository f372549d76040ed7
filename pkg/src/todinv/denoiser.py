"""Conditional noise predictors.

``ToyDenoiser`` is a small multi-resolution encoder/decoder whose blocks are
tagged with a layer group; each block is modulated only by the embedding cell
of its own group. ``GaussianOracleDenoiser`` and ``ConstantDenoiser`` are
analytic predictors used as test oracles.
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedding_space import GROUPS, LayerGroup, PromptGrid, encode_prompt
from .scheduler import DEFAULT_BETA_END, DEFAULT_BETA_START, SchedulerParams, build_schedule

logger = logging.getLogger(__name__)

Cells = Mapping[LayerGroup, torch.Tensor]


NEGATIVE_MODES = ("null", "source")


@dataclass
class CfgConfig:
    """Guidance settings.

    ``negative`` picks the unconditional branch used by the sampling
    pipelines: "null" is the learned null embedding, "source" reuses the
    (optimized) source cells so reconstruction follows the conditional
    trajectory and edits are guided relative to the source.
    """
    scale: float
    uncond_embedding: torch.Tensor
    negative: str = "null"

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"guidance scale must be >= 1, got {self.scale}")
        if self.negative not in NEGATIVE_MODES:
            raise ValueError(f"negative must be one of {NEGATIVE_MODES}, got {self.negative!r}")

    @classmethod
    def for_handle(cls, handle: nn.Module, scale: float = 7.5, negative: str = "null") -> "CfgConfig":
        return cls(scale, handle.null_embedding.detach().clone(), negative)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ToyDenoiser(nn.Module):
    """Encoder/decoder over (C, R, R) latents with ``levels`` resolution levels.

    Every block is conv -> FiLM -> SiLU -> conv with an identity skip; decoder
    blocks add the matching encoder activation. Levels at full and half
    resolution are appearance blocks, coarser levels are structure blocks,
    mirroring the 64/32 vs 16/8 split of a latent U-Net. A block's FiLM
    parameters come only from the token-summed cell of its own group.
    """

    def __init__(self, in_channels: int = 4, resolution: int = 16, width: int = 16, levels: int = 4,
                 tokens: int = 8, dim: int = 64, time_dim: int = 32, num_train_steps: int = 1000,
                 beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END,
                 beta_schedule: str = "scaled_linear",
                 conditioned_groups: Sequence[LayerGroup] | None = None):
        super().__init__()
        if resolution % (2 ** (levels - 1)):
            raise ValueError(f"resolution {resolution} not divisible by {2 ** (levels - 1)}")
        self.config = dict(in_channels=in_channels, resolution=resolution, width=width, levels=levels,
                           tokens=tokens, dim=dim, time_dim=time_dim, num_train_steps=num_train_steps,
                           beta_start=beta_start, beta_end=beta_end, beta_schedule=beta_schedule)
        self.tokens, self.dim, self.time_dim, self.width = tokens, dim, time_dim, width
        self.conditioned_groups = set(GROUPS if conditioned_groups is None else
                                      (LayerGroup(g) for g in conditioned_groups))
        self._enc_levels = list(range(levels))
        self._dec_levels = list(range(levels - 2, -1, -1))
        self.level_resolutions = [resolution // 2 ** lvl for lvl in range(levels)]
        level_groups = [LayerGroup.APPEARANCE if lvl < 2 else LayerGroup.STRUCTURE for lvl in range(levels)]
        self.layer_tags: list[LayerGroup] = [level_groups[lvl] for lvl in self._enc_levels + self._dec_levels]
        n_blocks = len(self.layer_tags)

        self.null_embedding = nn.Parameter(torch.randn(tokens, dim) * 0.01)
        self.time_in = nn.Linear(time_dim, time_dim)
        self.time_mod = nn.Linear(time_dim, 2 * width * n_blocks)
        self.emb_mod = nn.Linear(dim, 2 * width * n_blocks, bias=False)
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv1 = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(n_blocks))
        self.conv2 = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(n_blocks))
        self.head = nn.Conv2d(width, in_channels, 3, padding=1)
        self._group_index = [GROUPS.index(g) for g in self.layer_tags]

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def schedule(self, T: int) -> SchedulerParams:
        """Inference schedule matching the noise schedule the model was trained on."""
        c = self.config
        return build_schedule(c["num_train_steps"], c["beta_start"], c["beta_end"], T, c["beta_schedule"])

    def block_resolutions(self) -> list[int]:
        return [self.level_resolutions[lvl] for lvl in self._enc_levels + self._dec_levels]

    def _modulation(self, cells: Cells, t, B: int, dtype) -> torch.Tensor:
        """(n_blocks, B, 2*width) FiLM parameters."""
        t = torch.as_tensor(t)
        t = t.reshape(1).expand(B) if t.numel() == 1 else t
        temb = F.silu(self.time_in(timestep_embedding(t, self.time_dim).to(dtype)))
        mod = self.time_mod(temb)  # (B, 2wN)
        pooled = []
        for g in GROUPS:
            p = cells[g].sum(dim=-2)
            if g not in self.conditioned_groups:
                p = torch.zeros_like(p)
            pooled.append(p.expand(B, -1) if p.ndim == 1 else p)
        emb = self.emb_mod(torch.stack(pooled))  # (G, B, 2wN)
        n = len(self.layer_tags)
        emb = emb.reshape(len(GROUPS), B, n, 2 * self.width)
        idx = torch.tensor(self._group_index)
        own = emb[idx, :, torch.arange(n)]  # (n, B, 2w): block b reads its group's slice
        return own + mod.reshape(B, n, 2 * self.width).transpose(0, 1)

    def _block(self, i: int, h: torch.Tensor, mod: torch.Tensor) -> torch.Tensor:
        scale, shift = mod[i][:, :, None, None].chunk(2, dim=1)
        u = torch.addcmul(shift, self.conv1[i](h), 1 + scale)
        return h + self.conv2[i](F.silu(u))

    def forward(self, z: torch.Tensor, cells: Cells, t) -> torch.Tensor:
        unbatched = z.ndim == 3
        if unbatched:
            z = z.unsqueeze(0)
        mod = self._modulation(cells, t, z.shape[0], z.dtype)
        h = self.stem(z)
        skips = []
        i = 0
        for lvl in self._enc_levels:
            if lvl > 0:
                h = F.avg_pool2d(h, 2)
            h = self._block(i, h, mod)
            skips.append(h)
            i += 1
        skips.pop()
        for _ in self._dec_levels:
            h = F.interpolate(h, scale_factor=2, mode="nearest") + skips.pop()
            h = self._block(i, h, mod)
            i += 1
        out = self.head(h)
        return out[0] if unbatched else out


class GaussianOracleDenoiser(nn.Module):
    """Exact noise predictor for data z0 ~ N(0, sigma^2), elementwise.

    E[eps | z_t] = sqrt(1 - a_t) * z_t / (sigma^2 a_t + 1 - a_t). Ignores the
    prompt, so its gradient w.r.t. any cell is zero.
    """

    def __init__(self, alpha_bar: np.ndarray, sigma: float = 1.0, tokens: int = 8, dim: int = 64):
        super().__init__()
        self.alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        self.sigma = float(sigma)
        self.tokens, self.dim = tokens, dim
        self.null_embedding = nn.Parameter(torch.zeros(tokens, dim, dtype=torch.float64), requires_grad=False)
        self.layer_tags = [LayerGroup.APPEARANCE, LayerGroup.STRUCTURE]

    def gain(self, t: int) -> float:
        a = self.alpha_bar[int(t)]
        return math.sqrt(1 - a) / (self.sigma ** 2 * a + 1 - a)

    def forward(self, z, cells, t):
        return self.gain(t) * z


class ConstantDenoiser(nn.Module):
    """Predicts the same noise everywhere, so every DDIM inversion step is exact."""

    def __init__(self, value: torch.Tensor, tokens: int = 8, dim: int = 64):
        super().__init__()
        self.register_buffer("value", value.clone())
        self.tokens, self.dim = tokens, dim
        self.null_embedding = nn.Parameter(torch.zeros(tokens, dim, dtype=value.dtype), requires_grad=False)
        self.layer_tags = [LayerGroup.APPEARANCE, LayerGroup.STRUCTURE]

    def forward(self, z, cells, t):
        return self.value.expand_as(z).clone()


def _check_cells(handle, cells: Cells) -> None:
    for g, c in cells.items():
        if c.shape[-2:] != (handle.tokens, handle.dim):
            raise ValueError(f"{g.value} cell has shape {tuple(c.shape[-2:])}, "
                             f"denoiser expects {(handle.tokens, handle.dim)}")


def predict_cells(handle: nn.Module, z_t: torch.Tensor, cells: Cells, t: int) -> torch.Tensor:
    _check_cells(handle, cells)
    return handle(z_t, cells, t)


def guided_prediction(handle: nn.Module, z_t: torch.Tensor, cells: Cells, t: int, cfg: CfgConfig,
                      uncond_pred: torch.Tensor | None = None,
                      uncond_cells: Cells | None = None) -> torch.Tensor:
    """uncond + scale * (cond - uncond); scale 1 returns the conditional prediction.

    The unconditional branch is ``uncond_pred`` if given, else a prediction with
    ``uncond_cells`` if given, else the null embedding.
    """
    cond = predict_cells(handle, z_t, cells, t)
    if cfg.scale == 1:
        return cond
    if uncond_pred is None:
        if uncond_cells is not None:
            uncond_pred = predict_cells(handle, z_t, uncond_cells, t)
        else:
            uncond_pred = unconditional_prediction(handle, z_t, t, cfg)
    return uncond_pred + cfg.scale * (cond - uncond_pred)


def unconditional_prediction(handle: nn.Module, z_t: torch.Tensor, t: int, cfg: CfgConfig) -> torch.Tensor:
    null = cfg.uncond_embedding.to(z_t.dtype)
    return predict_cells(handle, z_t, {g: null for g in GROUPS}, t)


def predict_noise(handle: nn.Module, z_t: torch.Tensor, grid: PromptGrid, t: int) -> torch.Tensor:
    """Prediction where each block reads the grid cell of (t, its group)."""
    if grid.dim != handle.dim or grid.tokens != handle.tokens:
        raise ValueError(f"grid cells {(grid.tokens, grid.dim)} do not match denoiser "
                         f"conditioning {(handle.tokens, handle.dim)}")
    return predict_cells(handle, z_t, grid.cells_at(t), t)


def predict_noise_cfg(handle: nn.Module, z_t: torch.Tensor, grid: PromptGrid, t: int,
                      cfg: CfgConfig) -> torch.Tensor:
    if grid.dim != handle.dim or grid.tokens != handle.tokens:
        raise ValueError(f"grid cells {(grid.tokens, grid.dim)} do not match denoiser "
                         f"conditioning {(handle.tokens, handle.dim)}")
    return guided_prediction(handle, z_t, grid.cells_at(t), t, cfg)


def layer_group_of(block_index: int, handle: nn.Module) -> LayerGroup:
    tags = handle.layer_tags
    if not 0 <= block_index < len(tags):
        raise IndexError(f"block {block_index} out of range [0, {len(tags)})")
    return tags[block_index]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class LatentDataset:
    latents: torch.Tensor  # (N, C, H, W)
    prompts: list[str]

    def __post_init__(self):
        if len(self.prompts) != len(self.latents):
            raise ValueError("latents and prompts must have equal length")

    def __len__(self):
        return len(self.prompts)

    def split(self, n_holdout: int) -> tuple["LatentDataset", "LatentDataset"]:
        return (LatentDataset(self.latents[n_holdout:], self.prompts[n_holdout:]),
                LatentDataset(self.latents[:n_holdout], self.prompts[:n_holdout]))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    null_prob: float = 0.1
    num_train_steps: int = 1000
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    beta_schedule: str = "scaled_linear"
    width: int = 16
    levels: int = 4
    tokens: int = 8
    dim: int = 64


def _embed_prompts(prompts: Sequence[str], tokens: int, dim: int, dtype) -> torch.Tensor:
    cache: dict[str, torch.Tensor] = {}
    out = []
    for p in prompts:
        if p not in cache:
            cache[p] = encode_prompt(p, tokens, dim, dtype)
        out.append(cache[p])
    return torch.stack(out)


def denoising_loss(model: ToyDenoiser, z0: torch.Tensor, emb: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
    """Mean of ||eps - eps_theta(z_t, p, t)||^2 over the batch."""
    a = alpha_bar[t][:, None, None, None]
    zt = a.sqrt() * z0 + (1 - a).sqrt() * eps
    pred = model(zt, {g: emb for g in GROUPS}, t)
    return F.mse_loss(pred, eps)


@torch.no_grad()
def heldout_loss(model: ToyDenoiser, data: LatentDataset, seed: int = 1234, repeats: int = 4) -> float:
    """Noise-prediction loss on fixed (t, eps) draws, comparable across models."""
    dtype = next(model.parameters()).dtype
    params = model.schedule(1)
    num_train_steps = params.num_train_steps
    alpha_bar = torch.from_numpy(params.alpha_bar).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    z0 = data.latents.to(dtype)
    emb = _embed_prompts(data.prompts, model.tokens, model.dim, dtype)
    total = 0.0
    for _ in range(repeats):
        t = torch.randint(0, num_train_steps, (len(data),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(dtype)
        total += float(denoising_loss(model, z0, emb, t, eps, alpha_bar))
    return total / repeats


def build_toy_model(config: TrainConfig, resolution: int, in_channels: int, seed: int,
                    dtype: torch.dtype = torch.float64) -> ToyDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyDenoiser(in_channels, resolution, config.width, config.levels, config.tokens,
                            config.dim, num_train_steps=config.num_train_steps,
                            beta_start=config.beta_start, beta_end=config.beta_end,
                            beta_schedule=config.beta_schedule)
    return model.to(dtype)


def train_toy(dataset: LatentDataset, epochs: int = 100, seed: int = 0,
              config: TrainConfig | None = None, dtype: torch.dtype = torch.float64,
              log: list | None = None) -> ToyDenoiser:
    """Fit a ToyDenoiser with the standard noise-prediction objective.

    Conditioning is dropped to the null embedding with probability
    ``config.null_prob`` so the same weights serve guided sampling.
    Deterministic for a given seed.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    _, C, H, W = dataset.latents.shape
    model = build_toy_model(config, H, C, seed, dtype)
    params = model.schedule(1)
    alpha_bar = torch.from_numpy(params.alpha_bar).to(dtype)
    z_all = dataset.latents.to(dtype)
    emb_all = _embed_prompts(dataset.prompts, config.tokens, config.dim, dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * steps_per_epoch)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(dataset), generator=gen)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            z0 = z_all[idx]
            emb = emb_all[idx]
            drop = torch.rand(len(idx), generator=gen) < config.null_prob
            emb = torch.where(drop[:, None, None], model.null_embedding.unsqueeze(0).expand_as(emb), emb)
            t = torch.randint(0, config.num_train_steps, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(dtype)
            loss = denoising_loss(model, z0, emb, t, eps, alpha_bar)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item()
        mean = running / steps_per_epoch
        if not math.isfinite(mean):
            raise FloatingPointError(f"training loss became non-finite at epoch {epoch}")
        if log is not None:
            log.append({"epoch": epoch, "loss": mean})
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.info("epoch %d loss %.5f", epoch, mean)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# Weights file
# ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"TDWT"
WEIGHTS_VERSION = 1


def save_weights(model: ToyDenoiser, path: str | Path) -> None:
    """Magic, version, JSON header length, JSON header, little-endian tensors."""
    state = model.state_dict()
    dtype = next(iter(state.values())).dtype
    np_dtype = "<f8" if dtype == torch.float64 else "<f4"
    header = {
        "config": model.config,
        "layer_tags": [g.value for g in model.layer_tags],
        "dtype": np_dtype,
        "tensors": [[name, list(v.shape)] for name, v in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<II", WEIGHTS_VERSION, len(blob)))
    buf.write(blob)
    for v in state.values():
        buf.write(v.detach().cpu().numpy().astype(np_dtype).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: str | Path) -> ToyDenoiser:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weights file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    header = json.loads(raw[12:12 + n])
    cfg = header["config"]
    model = ToyDenoiser(**cfg)
    dtype = np.dtype(header["dtype"])
    model = model.to(torch.float64 if dtype.itemsize == 8 else torch.float32)
    if [g.value for g in model.layer_tags] != header["layer_tags"]:
        raise ValueError(f"{path}: layer tag table does not match the architecture")
    off = 12 + n
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype, count, off).reshape(shape)
        off += count * dtype.itemsize
        state[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")))
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model

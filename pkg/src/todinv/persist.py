"""On-disk formats for run artifacts.

Latent stacks are little-endian binaries with a magic/version header;
residual traces are tab-separated text.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

LATENT_MAGIC = b"TDLT"
LATENT_VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}
_TORCH = {4: torch.float32, 8: torch.float64}


def save_latents(latents: Sequence[torch.Tensor], path: str | Path) -> None:
    """Write a stack of equally shaped latents (e.g. an inversion trajectory)."""
    if not latents:
        raise ValueError("no latents to save")
    arr = torch.stack([z.detach().cpu() for z in latents]).numpy()
    width = arr.dtype.itemsize
    if width not in _DTYPES or arr.dtype.kind != "f":
        raise ValueError(f"unsupported latent dtype {arr.dtype}")
    header = struct.pack("<4sIII", LATENT_MAGIC, LATENT_VERSION, width, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=_DTYPES[width]).tobytes())


def load_latents(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: truncated latent file")
    magic, version, width, ndim = struct.unpack_from("<4sIII", data)
    if magic != LATENT_MAGIC:
        raise ValueError(f"{path}: not a latent file (magic {magic!r})")
    if version != LATENT_VERSION:
        raise ValueError(f"{path}: unsupported latent file version {version}")
    if width not in _DTYPES:
        raise ValueError(f"{path}: bad dtype width {width}")
    shape = struct.unpack_from(f"<{ndim}I", data, 16)
    offset = 16 + 4 * ndim
    count = int(np.prod(shape))
    if len(data) - offset != count * width:
        raise ValueError(f"{path}: payload size does not match header shape {shape}")
    arr = np.frombuffer(data, dtype=_DTYPES[width], count=count, offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))


def write_residual_table(path: str | Path, timesteps: Sequence[int], initial: Sequence[float],
                         traces: Sequence[Sequence[float]]) -> None:
    """One line per optimizer iterate; step 0 is the residual before any update."""
    lines = ["timestep\tstep\tresidual"]
    for t, r0, trace in zip(timesteps, initial, traces):
        lines.append(f"{t}\t0\t{r0!r}")
        lines.extend(f"{t}\t{k}\t{r!r}" for k, r in enumerate(trace, start=1))
    Path(path).write_text("\n".join(lines) + "\n")


def read_residual_table(path: str | Path) -> dict[int, list[float]]:
    out: dict[int, list[float]] = {}
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["timestep", "step", "residual"]:
        raise ValueError(f"{path}: missing residual table header")
    for line in lines[1:]:
        t, step, r = line.split("\t")
        seq = out.setdefault(int(t), [])
        if int(step) != len(seq):
            raise ValueError(f"{path}: steps out of order at timestep {t}")
        seq.append(float(r))
    return out

"""Synthetic shapes world: rendering, prompts, a classification probe and the
bundled 12-task manifest generator.

Latents are (4, R, R) arrays: three color channels and one shape-indicator
channel, each mapped from [0, 1] to [-1, 1].
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
BACKGROUNDS: dict[str, float] = {"light": 0.8, "dark": 0.15}
SHAPES = ("square", "disk")
RESOLUTION = 16
CHANNELS = 4
MARGIN = 3  # keeps shapes clear of the border under seeded shifts


@dataclass(frozen=True)
class Scene:
    shape: str | None
    color: str | None
    background: str
    cx: float = 8.0
    cy: float = 8.0
    size: float = 6.0

    @property
    def prompt(self) -> str:
        if self.shape is None:
            return f"a {self.background} background"
        return f"a {self.color} {self.shape} on a {self.background} background"

    def replace(self, **kw) -> "Scene":
        d = dict(self.__dict__)
        d.update(kw)
        return Scene(**d)


def object_mask(scene: Scene, resolution: int = RESOLUTION) -> np.ndarray:
    if scene.shape is None:
        return np.zeros((resolution, resolution), dtype=bool)
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    half = scene.size / 2
    if scene.shape == "square":
        return (np.abs(xx - scene.cx) <= half) & (np.abs(yy - scene.cy) <= half)
    if scene.shape == "disk":
        return (xx - scene.cx) ** 2 + (yy - scene.cy) ** 2 <= half ** 2
    raise ValueError(f"unknown shape {scene.shape!r}")


def render(scene: Scene, resolution: int = RESOLUTION) -> np.ndarray:
    """Image in [0, 1] with shape (4, R, R)."""
    img = np.full((CHANNELS, resolution, resolution), BACKGROUNDS[scene.background])
    img[3] = 0.0
    m = object_mask(scene, resolution)
    if scene.shape is not None:
        for c, v in enumerate(COLORS[scene.color]):
            img[c][m] = v
        img[3][m] = 1.0
    return img


def to_latent(img: np.ndarray) -> np.ndarray:
    return 2.0 * img - 1.0


def to_image(latent) -> np.ndarray:
    """Linear channel mapping back to [0, 1] (clipped)."""
    if isinstance(latent, torch.Tensor):
        latent = latent.detach().cpu().numpy()
    return np.clip((np.asarray(latent, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def to_rgb8(latent) -> np.ndarray:
    """(R, R, 3) uint8 rendering of the color channels."""
    img = to_image(latent)[:3].transpose(1, 2, 0)
    return np.round(img * 255).astype(np.uint8)


def random_scene(rng: np.random.Generator, resolution: int = RESOLUTION, p_empty: float = 0.1) -> Scene:
    background = str(rng.choice(list(BACKGROUNDS)))
    if rng.random() < p_empty:
        return Scene(None, None, background)
    size = float(rng.uniform(5.0, 7.0))
    lo, hi = size / 2 + MARGIN, resolution - size / 2 - MARGIN
    return Scene(str(rng.choice(SHAPES)), str(rng.choice(list(COLORS))), background,
                 float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)), size)


def shapes_dataset(n: int, seed: int = 0, resolution: int = RESOLUTION):
    """(latents (n, 4, R, R) float64 tensor, prompts list)."""
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng, resolution) for _ in range(n)]
    latents = np.stack([to_latent(render(s, resolution)) for s in scenes])
    return torch.from_numpy(latents), [s.prompt for s in scenes]


# ---------------------------------------------------------------------------
# Probe
# ---------------------------------------------------------------------------

def classify_latent(latent) -> dict[str, str | None]:
    """Read back (shape, color, background) from a latent."""
    img = to_image(latent)
    region = img[3] > 0.5
    bg = ~region
    bg_level = float(img[:3, bg].mean()) if bg.any() else float("nan")
    background = min(BACKGROUNDS, key=lambda k: abs(BACKGROUNDS[k] - bg_level))
    if region.sum() < 4:
        return {"shape": None, "color": None, "background": background}
    rgb = img[:3, region].mean(axis=1)
    color = min(COLORS, key=lambda k: float(np.sum((np.asarray(COLORS[k]) - rgb) ** 2)))
    ys, xs = np.nonzero(region)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = region.sum() / box
    shape = "square" if fill > 0.9 else "disk"
    return {"shape": shape, "color": color, "background": background}


# ---------------------------------------------------------------------------
# Bundled manifest
# ---------------------------------------------------------------------------

# (id, edit_type, multi_edit, source scene, target overrides)
_TOY_TASKS = [
    ("s01", "change content", False, Scene("square", "red", "light", 8.0, 8.0, 6.0), {"shape": "disk"}),
    ("s02", "change content", False, Scene("disk", "blue", "dark", 7.5, 8.5, 6.5), {"shape": "square"}),
    ("s03", "add object", False, Scene(None, None, "light", 8.0, 8.0, 6.0),
     {"shape": "disk", "color": "green"}),
    ("s04", "delete object", False, Scene("square", "yellow", "dark", 8.5, 7.5, 6.0),
     {"shape": None, "color": None}),
    ("a01", "change color", False, Scene("square", "red", "light", 8.0, 8.0, 6.0), {"color": "blue"}),
    ("a02", "change color", False, Scene("disk", "green", "dark", 8.0, 7.5, 6.5), {"color": "yellow"}),
    ("a03", "change color", False, Scene("square", "blue", "dark", 7.5, 8.0, 5.5), {"color": "red"}),
    ("a04", "change color", False, Scene("disk", "yellow", "light", 8.5, 8.5, 6.0), {"color": "green"}),
    ("g01", "change background", False, Scene("disk", "red", "light", 8.0, 8.0, 6.0), {"background": "dark"}),
    ("g02", "change background", False, Scene("square", "blue", "dark", 8.0, 8.5, 6.0), {"background": "light"}),
    ("g03", "change background", False, Scene("square", "green", "light", 7.5, 7.5, 6.5), {"background": "dark"}),
    ("g04", "change color", True, Scene("square", "yellow", "dark", 8.0, 8.0, 6.0),
     {"color": "red", "shape": "disk"}),
]


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def background_mask(source: Scene, target: Scene, edit_type: str, resolution: int = RESOLUTION) -> np.ndarray:
    """True where the edit should leave the image unchanged."""
    if edit_type == "change background":
        return object_mask(source, resolution)
    edited = _dilate(object_mask(source, resolution) | object_mask(target, resolution))
    return ~edited


def write_toy_manifest(out_dir: str | Path, resolution: int = RESOLUTION) -> Path:
    """Write images, masks and ``manifest.jsonl``; output is byte-deterministic."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"version": "1.0", "value_range": [0.0, 1.0], "resolution": resolution,
                         "channels": CHANNELS})]
    for task_id, edit_type, multi, source, overrides in _TOY_TASKS:
        target = source.replace(**overrides)
        image = render(source, resolution).astype("<f4")
        mask = background_mask(source, target, edit_type, resolution)
        np.save(out_dir / "images" / f"{task_id}.npy", image)
        np.save(out_dir / "masks" / f"{task_id}.npy", mask)
        lines.append(json.dumps({
            "id": task_id,
            "image": f"images/{task_id}.npy",
            "source_prompt": source.prompt,
            "target_prompt": target.prompt,
            "edit_type": edit_type,
            "multi_edit": multi,
            "mask": f"masks/{task_id}.npy",
        }))
    path = out_dir / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def toy_target_scene(task_id: str) -> Scene:
    for tid, _, _, source, overrides in _TOY_TASKS:
        if tid == task_id:
            return source.replace(**overrides)
    raise KeyError(task_id)


def toy_manifest_path() -> Path:
    return Path(__file__).parent / "data" / "toy_manifest" / "manifest.jsonl"

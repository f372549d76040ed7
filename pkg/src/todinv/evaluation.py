"""Benchmark manifests, masked background-preservation metrics, reports and
the ablation harness.

Masks follow one convention throughout: True marks a pixel that the edit
should leave untouched, and only those pixels enter a masked metric.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .denoiser import CfgConfig
from .editing import EditTask, edit, reconstruct
from .embedding_space import EDIT_TYPES, classify_edit
from .inversion import TodinvConfig, naive_ddim_invert, source_grid, todinv_invert

MANIFEST_VERSIONS = ("1.0",)
REPORT_VERSION = "1.0"
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
NOT_COMPUTED = "not computed"
# perceptual columns kept for schema parity with published tables
PLACEHOLDER_COLUMNS = ("clip_whole", "clip_edited", "lpips", "structure_distance")


class ManifestError(ValueError):
    pass


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- manifest

@dataclass
class BenchmarkManifest:
    entries: list[EditTask]
    version: str
    value_range: tuple[float, float] = (0.0, 1.0)
    root: Path = Path(".")
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def image(self, task_id: str) -> np.ndarray:
        return self.images[task_id]

    def task(self, task_id: str) -> EditTask:
        for e in self.entries:
            if e.id == task_id:
                return e
        raise KeyError(f"no task {task_id!r} in manifest")


_REQUIRED = ("id", "image", "source_prompt", "target_prompt", "edit_type", "mask")


def _load_array(path: Path, lineno: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise ManifestError(f"line {lineno}: {what} file not found: {path}")
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, OSError) as e:
        raise ManifestError(f"line {lineno}: cannot read {what} file {path}: {e}") from None


def load_manifest(path: str | os.PathLike) -> BenchmarkManifest:
    """Parse and fully validate a JSON-lines manifest.

    The first line is a header ``{"version", "value_range", ...}``; each further
    line is one task. Images and masks are ``.npy`` files relative to the
    manifest. Everything is checked up front, and the first problem is
    reported with its line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"line 1: malformed header: {e}") from None
    version = str(header.get("version", ""))
    if version not in MANIFEST_VERSIONS:
        raise ManifestError(f"line 1: unsupported manifest version {version!r}; supported {MANIFEST_VERSIONS}")
    lo, hi = (float(v) for v in header.get("value_range", (0.0, 1.0)))
    if not hi > lo:
        raise ManifestError(f"line 1: bad value_range [{lo}, {hi}]")

    root = path.parent
    entries, images, seen = [], {}, set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {lineno}: malformed record: {e}") from None
        if not isinstance(rec, dict):
            raise ManifestError(f"line {lineno}: record is not an object")
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise ManifestError(f"line {lineno}: missing field(s) {missing}")
        tid = str(rec["id"])
        if tid in seen:
            raise ManifestError(f"line {lineno}: duplicate id {tid!r}")
        seen.add(tid)
        multi = bool(rec.get("multi_edit", False))
        try:
            classify_edit(rec["edit_type"], multi)
        except ValueError:
            raise ManifestError(f"line {lineno}: entry {tid!r} has unknown edit_type {rec['edit_type']!r}; "
                                f"valid types: {list(EDIT_TYPES)}") from None
        image = _load_array(root / rec["image"], lineno, "image")
        mask = _load_array(root / rec["mask"], lineno, "mask")
        if mask.dtype != np.bool_:
            if not np.isin(mask, (0, 1)).all():
                raise ManifestError(f"line {lineno}: mask for {tid!r} is not binary")
            mask = mask.astype(bool)
        if mask.shape != image.shape[-2:]:
            raise ManifestError(f"line {lineno}: mask shape {mask.shape} does not match image "
                                f"shape {image.shape} for {tid!r}")
        entries.append(EditTask(tid, str(rec["image"]), str(rec["source_prompt"]),
                                str(rec["target_prompt"]), str(rec["edit_type"]), multi, mask))
        images[tid] = image
    return BenchmarkManifest(entries, version, (lo, hi), root, images)


# ---------------------------------------------------------------- metrics

def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _pixel_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        if not np.isin(m, (0, 1)).all():
            raise MetricError("mask must be binary")
        m = m.astype(bool)
    if m.shape != tuple(shape[-2:]):
        raise MetricError(f"mask shape {m.shape} does not match image spatial shape {shape[-2:]}")
    if not m.any():
        raise MetricError("mask selects no pixels")
    return m


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    m = _pixel_mask(mask, a.shape)
    sq = (a - b) ** 2
    if m is None:
        return float(sq.mean())
    return float(sq[..., m].mean())


def psnr(a, b, mask=None, value_range: tuple[float, float] = (0.0, 1.0)) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images agree."""
    err = mse(a, b, mask)
    if err == 0.0:
        return math.inf
    peak = value_range[1] - value_range[0]
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # valid-mode weighted window average over the last two axes
    win = np.lib.stride_tricks.sliding_window_view(img, w.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, w)


def ssim_map(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             value_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Per-window SSIM, shape (..., H - window + 1, W - window + 1)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < window:
        raise MetricError(f"image {a.shape} is smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    peak = value_range[1] - value_range[0]
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a ** 2
    var_b = _filter(b * b, w) - mu_b ** 2
    cov = _filter(a * b, w) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, mask=None, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         value_range: tuple[float, float] = (0.0, 1.0)) -> float:
    """Gaussian-window SSIM averaged over channels.

    With a mask, only windows centred on a masked pixel count.
    """
    a, b = _pair(a, b)
    smap = ssim_map(a, b, window, sigma, value_range)
    if smap.ndim > 2:
        smap = smap.reshape(-1, *smap.shape[-2:]).mean(axis=0)
    m = _pixel_mask(mask, a.shape)
    if m is None:
        return float(smap.mean())
    r = window // 2
    centres = m[r:m.shape[0] - r, r:m.shape[1] - r]
    if not centres.any():
        raise MetricError("mask selects no pixel far enough from the border for an SSIM window")
    return float(smap[centres].mean())


# ---------------------------------------------------------------- reports

@dataclass
class MetricRow:
    task_id: str
    edit_class: str
    psnr: float
    ssim: float
    mse: float
    recon_mse: float
    residual_mean: float
    residual_max: float
    steps_used: int
    optimized_cells: int


_ROW_FIELDS = [f for f in MetricRow.__dataclass_fields__]
_AGG_FIELDS = ("psnr", "ssim", "mse", "recon_mse", "residual_mean", "residual_max", "steps_used")


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "exact" if v > 0 else "-inf"
        return repr(v)
    return str(v)


@dataclass
class MetricReport:
    rows: list[MetricRow]
    variant: str = "default"
    seed: int = 0
    config: dict = field(default_factory=dict)
    value_range: tuple[float, float] = (0.0, 1.0)

    def aggregates(self) -> dict[str, dict[str, float]]:
        """Means per edit class and overall ("all")."""
        groups: dict[str, list[MetricRow]] = {"all": list(self.rows)}
        for r in self.rows:
            groups.setdefault(r.edit_class, []).append(r)
        return {name: {f: float(np.mean([getattr(r, f) for r in rows])) for f in _AGG_FIELDS}
                for name, rows in groups.items() if rows}

    def header(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "variant": self.variant,
            "seed": self.seed,
            "value_range": list(self.value_range),
            "ssim": {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2,
                     "channels": "mean"},
            "mask_semantics": "true = unedited region, metrics use those pixels only",
            "placeholders": {c: NOT_COMPUTED for c in PLACEHOLDER_COLUMNS},
            "config": self.config,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# report_version={REPORT_VERSION} variant={self.variant} seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_ROW_FIELDS + list(PLACEHOLDER_COLUMNS))
        for r in self.rows:
            w.writerow([_fmt(getattr(r, f)) for f in _ROW_FIELDS] + [NOT_COMPUTED] * len(PLACEHOLDER_COLUMNS))
        return buf.getvalue()

    def class_table_csv(self) -> str:
        """One line per edit class plus the overall mean."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edit_class", *_AGG_FIELDS])
        for name, agg in self.aggregates().items():
            w.writerow([name, *(_fmt(agg[f]) for f in _AGG_FIELDS)])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(v):
            return "exact" if isinstance(v, float) and math.isinf(v) and v > 0 else v
        payload = {
            **self.header(),
            "rows": [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows],
            "aggregates": {k: {f: clean(v) for f, v in agg.items()} for k, agg in self.aggregates().items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        if d.get("report_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('report_version')!r}")
        rows = [MetricRow(**{f: math.inf if r[f] == "exact" else r[f] for f in _ROW_FIELDS})
                for r in d["rows"]]
        return cls(rows, d["variant"], d["seed"], d.get("config", {}), tuple(d["value_range"]))

    def write(self, out_dir: str | os.PathLike, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        (out_dir / f"{stem}_by_class.csv").write_text(self.class_table_csv())
        return csv_path, json_path


# ---------------------------------------------------------------- running tasks

def seed_shift(seed: int, margin: int = 3) -> tuple[int, int]:
    """Integer translation used as the per-seed perturbation of a task.

    Seed 0 is the unshifted task; every other seed moves it.
    """
    if seed == 0:
        return 0, 0
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    while True:
        dy, dx = rng.integers(-margin, margin + 1, size=2)
        if dy or dx:
            return int(dy), int(dx)


def shifted(image: np.ndarray, mask: np.ndarray | None, seed: int, margin: int = 3):
    dy, dx = seed_shift(seed, margin)
    image = np.roll(image, (dy, dx), axis=(-2, -1))
    if mask is not None:
        mask = np.roll(mask, (dy, dx), axis=(-2, -1))
    return image, mask


def latent_to_image(latent, value_range=(0.0, 1.0)) -> np.ndarray:
    """Map a [-1, 1] latent back to the manifest's value range."""
    if isinstance(latent, torch.Tensor):
        latent = latent.detach().cpu().numpy()
    lo, hi = value_range
    return np.clip((np.asarray(latent, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0) * (hi - lo) + lo


def image_to_latent(image, value_range=(0.0, 1.0)) -> np.ndarray:
    lo, hi = value_range
    return 2.0 * (np.asarray(image, dtype=np.float64) - lo) / (hi - lo) - 1.0


@dataclass
class TaskOutcome:
    row: MetricRow
    reconstruction: np.ndarray
    edited: np.ndarray


def run_task(handle, task: EditTask, latent: np.ndarray, config: TodinvConfig, cfg: CfgConfig,
             hook: str = "word-replace", value_range=(0.0, 1.0), naive: bool = False,
             dtype: torch.dtype = torch.float64) -> TaskOutcome:
    """Invert, reconstruct and edit one task, then score the background.

    ``latent`` is in the model's [-1, 1] space. ``naive=True`` swaps in plain
    DDIM inversion (no cell optimization) as the baseline.
    """
    params = handle.schedule(config.T)
    z0 = torch.as_tensor(latent, dtype=dtype)
    if naive:
        grid = source_grid(task.source_prompt, params, handle, dtype, config.sharing_mode)
        res = naive_ddim_invert(z0, grid, params, handle, cfg, keep_trajectory=False)
        n_cells = 0
    else:
        res = todinv_invert(z0, task.source_prompt, task, config, params, handle, cfg, keep_trajectory=False)
        n_cells = len(TodinvConfig(**{**config.__dict__, "edit_class": task.edit_class}).mask())
    rec = reconstruct(res.z_T, res.grid, params, handle, cfg)
    out = edit(res.z_T, res.grid, task.target_prompt, hook, params, handle, cfg)
    src_img = latent_to_image(z0, value_range)
    edit_img = latent_to_image(out, value_range)
    m = task.background_mask
    row = MetricRow(
        task_id=task.id,
        edit_class=task.edit_class.value,
        psnr=psnr(src_img, edit_img, m, value_range),
        ssim=ssim(src_img, edit_img, m, value_range=value_range),
        mse=mse(src_img, edit_img, m),
        recon_mse=float(((rec - z0) ** 2).mean()),
        residual_mean=res.mean_final_residual,
        residual_max=max(res.final_residuals),
        steps_used=res.total_steps,
        optimized_cells=n_cells,
    )
    return TaskOutcome(row, rec.numpy(), out.numpy())


def evaluate_manifest(manifest: BenchmarkManifest, handle, config: TodinvConfig, cfg: CfgConfig,
                      seed: int = 0, hook: str = "word-replace", variant: str = "default",
                      naive: bool = False) -> MetricReport:
    rows = []
    for task in manifest.entries:
        img, mask = shifted(manifest.image(task.id), task.background_mask, seed)
        task_s = EditTask(task.id, task.image_ref, task.source_prompt, task.target_prompt,
                          task.edit_type, task.multi_edit, mask)
        latent = image_to_latent(img, manifest.value_range)
        rows.append(run_task(handle, task_s, latent, config, cfg, hook, manifest.value_range, naive).row)
    return MetricReport(rows, variant, seed, _config_dict(config, cfg), manifest.value_range)


def _config_dict(config: TodinvConfig, cfg: CfgConfig) -> dict:
    d = {k: (v.value if hasattr(v, "value") else v) for k, v in config.__dict__.items()}
    d["cfg_scale"] = cfg.scale
    d["cfg_negative"] = cfg.negative
    return d


# ---------------------------------------------------------------- ablation

@dataclass(frozen=True)
class Variant:
    """A named set of TodinvConfig overrides."""
    name: str
    overrides: tuple[tuple[str, object], ...] = ()

    @classmethod
    def of(cls, name: str, **overrides) -> "Variant":
        return cls(name, tuple(sorted(overrides.items())))

    def apply(self, base: TodinvConfig) -> TodinvConfig:
        d = dict(base.__dict__)
        for k, v in self.overrides:
            if k not in d:
                raise ValueError(f"variant {self.name!r}: unknown config field {k!r}")
            d[k] = v
        return TodinvConfig(**d)


def _ablation_job(args):
    manifest, handle, config, cfg, seed, hook, name = args
    torch.set_num_threads(1)
    return (name, seed), evaluate_manifest(manifest, handle, config, cfg, seed, hook, name)


def run_ablation(manifest: BenchmarkManifest, variants: Sequence[Variant], seeds: Iterable[int],
                 handle, cfg: CfgConfig, base: TodinvConfig | None = None, hook: str = "word-replace",
                 workers: int = 1) -> dict[tuple[str, int], MetricReport]:
    """One report per (variant, seed).

    All variants are validated before anything runs. Jobs are independent,
    so ``workers > 1`` fans them out to processes without changing results.
    """
    base = base or TodinvConfig()
    configs = [(v.name, v.apply(base)) for v in variants]
    names = [n for n, _ in configs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate variant names in {names}")
    jobs = [(manifest, handle, c, cfg, s, hook, n) for n, c in configs for s in seeds]
    if workers <= 1:
        results = [_ablation_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    return dict(results)


def ablation_summary(reports: dict[tuple[str, int], MetricReport]) -> dict[str, dict[str, float]]:
    """Per variant: overall aggregates averaged across seeds."""
    by_variant: dict[str, list[dict[str, float]]] = {}
    for (name, _), rep in reports.items():
        by_variant.setdefault(name, []).append(rep.aggregates()["all"])
    return {name: {f: float(np.mean([a[f] for a in aggs])) for f in _AGG_FIELDS}
            for name, aggs in by_variant.items()}

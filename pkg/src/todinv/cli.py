"""Command-line entry points.

Settings resolve in three layers: RunConfig defaults, then ``--config``
(a JSON file), then flags given on the command line. The resolved config is
written to ``config.json`` in every output directory.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import difflib
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import denoiser as dn
from .editing import EditTask, edit, list_hooks, reconstruct
from .embedding_space import SharingMode, load_grid, save_grid
from .evaluation import (BenchmarkManifest, Variant, ablation_summary, evaluate_manifest, image_to_latent,
                         load_manifest, run_ablation, shifted)
from .inversion import MaskOverride, NumericalError, TodinvConfig, todinv_invert
from .persist import load_latents, save_latents, write_residual_table
from .scheduler import BETA_SCHEDULES, ScheduleError, SchedulerParams
from .toydata import shapes_dataset, toy_manifest_path

logger = logging.getLogger("todinv")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
OUTPUT_ROOT_ENV = "TODINV_OUTPUT_ROOT"
PRECISIONS = {"float32": torch.float32, "float64": torch.float64}
# order fixes the derived seed of each component
SEED_COMPONENTS = ("data", "train")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # inversion
    T: int = 50
    K: int = 10
    delta: float = 5e-6
    lr: float = 1e-3
    sharing_mode: str = "P_STAR"
    mask_override: str = "none"
    weight_decay: float = 0.01
    reduction: str = "mean"
    guided_inversion: bool = False
    # guidance
    cfg_scale: float = 7.5
    cfg_negative: str = "source"
    # run
    seed: int = 0
    precision: str = "float64"
    task: str | None = None
    target_prompt: str | None = None
    hook: str = "word-replace"
    naive: bool = False
    # training
    epochs: int = 100
    n_images: int = 512
    holdout: int = 64
    train_precision: str = "float32"
    beta_start: float = dn.DEFAULT_BETA_START
    beta_end: float = dn.DEFAULT_BETA_END
    beta_schedule: str = "scaled_linear"
    # ablation
    seeds: list[int] = field(default_factory=lambda: [0])
    sweeps: list[str] = field(default_factory=list)
    workers: int = 1
    # paths
    weights: str | None = None
    manifest: str | None = None
    inversion: str | None = None
    output: str | None = None

    def validate(self) -> "RunConfig":
        try:
            SharingMode(self.sharing_mode)
            MaskOverride(self.mask_override)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.precision not in PRECISIONS or self.train_precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.beta_schedule not in BETA_SCHEDULES:
            raise ConfigError(f"beta_schedule must be one of {BETA_SCHEDULES}")
        if self.cfg_scale < 1:
            raise ConfigError(f"cfg_scale must be >= 1, got {self.cfg_scale}")
        if self.cfg_negative not in dn.NEGATIVE_MODES:
            raise ConfigError(f"cfg_negative must be one of {dn.NEGATIVE_MODES}")
        if self.hook not in list_hooks():
            raise ConfigError(f"unknown hook {self.hook!r}; registered: {list_hooks()}")
        if self.epochs < 1 or self.n_images <= self.holdout or self.holdout < 1:
            raise ConfigError("need epochs >= 1 and n_images > holdout >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.todinv()
        return self

    def todinv(self, **overrides) -> TodinvConfig:
        kw = dict(K=self.K, delta=self.delta, lr=self.lr, T=self.T, sharing_mode=self.sharing_mode,
                  mask_override=self.mask_override, weight_decay=self.weight_decay,
                  reduction=self.reduction, guided_inversion=self.guided_inversion)
        kw.update(overrides)
        try:
            return TodinvConfig(**kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_mapping(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {unknown}")
        return dataclasses.replace(base, **d)


def derive_seed(seed: int, component: str) -> int:
    """Per-component seed: ``SeedSequence(seed, spawn_key=(index,))``.

    The dataset draw and the training run get independent streams, so
    changing one never shifts the other. Inversion and sampling are
    deterministic; there the seed only picks the task replicate (see
    ``evaluation.seed_shift``).
    """
    idx = SEED_COMPONENTS.index(component)
    return int(np.random.SeedSequence(seed, spawn_key=(idx,)).generate_state(1)[0])


def output_dir(config: RunConfig, command: str) -> Path:
    if config.output:
        out = Path(config.output)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / (f"{command}-{config.task}" if config.task else command)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    (out / "config.json").write_text(config.to_json() + "\n")
    return out


def load_model(config: RunConfig) -> torch.nn.Module:
    if not config.weights:
        raise ConfigError("no weights given; pass --weights (train one with `todinv train-toy`)")
    path = Path(config.weights)
    if not path.is_file():
        raise ConfigError(f"weights file not found: {path}")
    return dn.load_weights(path).to(config.dtype)


def load_tasks(config: RunConfig) -> BenchmarkManifest:
    return load_manifest(config.manifest or toy_manifest_path())


def select_task(manifest: BenchmarkManifest, config: RunConfig) -> EditTask:
    if not config.task:
        raise ConfigError(f"--task is required; manifest ids: {[e.id for e in manifest.entries]}")
    try:
        return manifest.task(config.task)
    except KeyError:
        raise ConfigError(f"task {config.task!r} not in manifest; ids: {[e.id for e in manifest.entries]}") from None


def cfg_for(model, config: RunConfig) -> dn.CfgConfig:
    return dn.CfgConfig.for_handle(model, config.cfg_scale, config.cfg_negative)


def schedule_header(params: SchedulerParams) -> dict:
    return {
        "num_train_steps": params.num_train_steps,
        "beta_schedule": params.beta_schedule,
        "beta_start": params.beta_start,
        "beta_end": params.beta_end,
        "T": params.T,
        "inference_timesteps": list(params.inference_timesteps),
    }


def _header_text(h: dict) -> list[str]:
    return json.dumps(h, indent=1, sort_keys=True).splitlines()


# ---------------------------------------------------------------- commands

def cmd_train_toy(config: RunConfig) -> Path:
    out = output_dir(config, "train-toy")
    tcfg = dn.TrainConfig(epochs=config.epochs, beta_start=config.beta_start, beta_end=config.beta_end,
                          beta_schedule=config.beta_schedule)
    latents, prompts = shapes_dataset(config.n_images, derive_seed(config.seed, "data"))
    train, hold = dn.LatentDataset(latents, prompts).split(config.holdout)
    seed = derive_seed(config.seed, "train")
    tdtype = PRECISIONS[config.train_precision]
    baseline = dn.heldout_loss(dn.build_toy_model(tcfg, latents.shape[-1], latents.shape[1], seed,
                                                  torch.float64), hold)
    log: list[dict] = []
    model = dn.train_toy(train, config.epochs, seed, tcfg, tdtype, log).double()
    trained = dn.heldout_loss(model, hold)
    dn.save_weights(model, out / "weights.bin")
    (out / "train_log.tsv").write_text(
        "epoch\tloss\n" + "".join(f"{r['epoch']}\t{r['loss']!r}\n" for r in log))
    (out / "heldout.json").write_text(json.dumps(
        {"untrained": baseline, "trained": trained, "improvement": baseline - trained}, indent=2) + "\n")
    logger.info("held-out loss %.5f -> %.5f", baseline, trained)
    return out / "weights.bin"


def cmd_invert(config: RunConfig) -> Path:
    manifest = load_tasks(config)
    task = select_task(manifest, config)
    model = load_model(config)
    out = output_dir(config, "invert")
    params = model.schedule(config.T)
    image, mask = shifted(manifest.image(task.id), task.background_mask, config.seed)
    z0 = torch.as_tensor(image_to_latent(image, manifest.value_range), dtype=config.dtype)
    res = todinv_invert(z0, task.source_prompt, task, config.todinv(), params, model, cfg_for(model, config))
    save_grid(res.grid, out / "grid.bin")
    save_latents(res.trajectory, out / "trajectory.bin")
    np.save(out / "background_mask.npy", mask)
    write_residual_table(out / "residuals.tsv", res.timesteps, res.initial_residuals, res.residual_trace)
    (out / "schedule.json").write_text(json.dumps(schedule_header(params), indent=1, sort_keys=True) + "\n")
    (out / "result.json").write_text(json.dumps({
        "task": task.id,
        "edit_class": task.edit_class.value,
        "source_prompt": task.source_prompt,
        "target_prompt": task.target_prompt,
        "timesteps": list(res.timesteps),
        "steps_used": res.steps_used,
        "initial_residuals": res.initial_residuals,
        "final_residuals": res.final_residuals,
        "nan_flags": res.nan_flags,
        "mean_final_residual": res.mean_final_residual,
    }, indent=1) + "\n")
    logger.info("%s: mean final residual %.3e in %d updates", task.id, res.mean_final_residual,
                res.total_steps)
    return out


def _load_inversion(config: RunConfig):
    if not config.inversion:
        raise ConfigError("--inversion (an `invert` output directory) is required")
    inv = Path(config.inversion)
    for name in ("grid.bin", "trajectory.bin", "schedule.json", "result.json"):
        if not (inv / name).is_file():
            raise ConfigError(f"inversion artifact missing: {inv / name}")
    model = load_model(config)
    params = model.schedule(config.T)
    stored = json.loads((inv / "schedule.json").read_text())
    current = schedule_header(params)
    if stored != current:
        diff = "\n".join(difflib.unified_diff(_header_text(stored), _header_text(current),
                                              "inversion schedule", "requested schedule", lineterm=""))
        raise ScheduleError(f"schedule mismatch with {inv}; refusing to sample:\n{diff}")
    z_T = load_latents(inv / "trajectory.bin")[-1].to(config.dtype)
    grid = load_grid(inv / "grid.bin")
    if grid.dtype != config.dtype:
        grid = type(grid)(grid.slots.to(config.dtype), grid.layout, grid.sharing_mode,
                          grid.source_snapshot.to(config.dtype), grid.timesteps)
    result = json.loads((inv / "result.json").read_text())
    return model, params, z_T, grid, result


def _with_inversion_config(config: RunConfig, explicit: dict) -> RunConfig:
    """Inherit the inversion run's settings, keeping anything set explicitly."""
    path = Path(config.inversion or "") / "config.json"
    if not config.inversion or not path.is_file():
        return config
    stored = json.loads(path.read_text())
    keep = {k: v for k, v in stored.items() if k not in ("output", "inversion", "target_prompt", "hook")}
    base = RunConfig.from_mapping(keep)
    return RunConfig.from_mapping({k: getattr(config, k) for k in explicit}, base).validate()


def cmd_reconstruct(config: RunConfig) -> Path:
    model, params, z_T, grid, result = _load_inversion(config)
    out = output_dir(config, "reconstruct")
    rec = reconstruct(z_T, grid, params, model, cfg_for(model, config))
    np.save(out / "reconstruction.npy", rec.numpy())
    save_latents([rec], out / "reconstruction.bin")
    return out


def cmd_edit(config: RunConfig) -> Path:
    model, params, z_T, grid, result = _load_inversion(config)
    out = output_dir(config, "edit")
    cfg = cfg_for(model, config)
    target = config.target_prompt if config.target_prompt is not None else result["target_prompt"]
    rec = reconstruct(z_T, grid, params, model, cfg)
    edited = edit(z_T, grid, target, config.hook, params, model, cfg)
    np.save(out / "reconstruction.npy", rec.numpy())
    np.save(out / "edit.npy", edited.numpy())
    save_latents([rec], out / "reconstruction.bin")
    save_latents([edited], out / "edit.bin")
    (out / "edit.json").write_text(json.dumps({"target_prompt": target, "hook": config.hook}, indent=1) + "\n")
    return out


def cmd_eval(config: RunConfig) -> Path:
    manifest = load_tasks(config)
    model = load_model(config)
    out = output_dir(config, "eval")
    report = evaluate_manifest(manifest, model, config.todinv(), cfg_for(model, config), config.seed,
                               config.hook, "naive" if config.naive else "todinv", naive=config.naive)
    report.write(out)
    return out


def parse_sweeps(sweeps: list[str]) -> list[Variant]:
    """``["sharing_mode=P,P_STAR", "K=10,25"]`` -> the cartesian product of variants."""
    fields = {f.name: f for f in dataclasses.fields(TodinvConfig)}
    axes = []
    for s in sweeps:
        name, _, values = s.partition("=")
        name = name.strip()
        if name not in fields or not values:
            raise ConfigError(f"bad sweep {s!r}; expected FIELD=V1,V2 with FIELD in {sorted(fields)}")
        kind = type(getattr(TodinvConfig(), name))
        parsed = []
        for v in values.split(","):
            v = v.strip()
            try:
                parsed.append(int(v) if kind is int else float(v) if kind is float else v)
            except ValueError:
                raise ConfigError(f"sweep {name}: cannot parse {v!r}") from None
        axes.append([(name, v) for v in parsed])
    if not axes:
        return [Variant.of("default")]
    return [Variant.of("-".join(f"{k}={v}" for k, v in combo), **dict(combo))
            for combo in itertools.product(*axes)]


def cmd_ablate(config: RunConfig) -> Path:
    manifest = load_tasks(config)
    model = load_model(config)
    variants = parse_sweeps(config.sweeps)
    base = config.todinv()
    for v in variants:
        try:
            v.apply(base)
        except ValueError as e:
            raise ConfigError(f"variant {v.name}: {e}") from None
    out = output_dir(config, "ablate")
    reports = run_ablation(manifest, variants, config.seeds, model, cfg_for(model, config), base,
                           config.hook, config.workers)
    for (name, seed), rep in reports.items():
        rep.write(out / name / f"seed{seed}")
    (out / "summary.json").write_text(json.dumps(ablation_summary(reports), indent=2, sort_keys=True) + "\n")
    return out


COMMANDS = {
    "train-toy": cmd_train_toy,
    "invert": cmd_invert,
    "reconstruct": cmd_reconstruct,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------- argument parsing

def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file of RunConfig fields; flags given here still win")
    common.add_argument("--output", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=sorted(PRECISIONS))
    common.add_argument("-v", "--verbose", action="store_true", default=False)

    model = argparse.ArgumentParser(add_help=False, argument_default=S)
    model.add_argument("--weights")
    model.add_argument("--manifest", help="benchmark manifest (default: bundled toy manifest)")
    model.add_argument("--task")
    model.add_argument("--steps", dest="T", type=int, help="DDIM steps T")
    model.add_argument("--opt-steps", dest="K", type=int, help="max optimizer updates per timestep")
    model.add_argument("--delta", type=float, help="early-stop residual threshold")
    model.add_argument("--lr", type=float)
    model.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    model.add_argument("--cfg-negative", dest="cfg_negative", choices=dn.NEGATIVE_MODES)
    model.add_argument("--sharing-mode", dest="sharing_mode", choices=[m.value for m in SharingMode])
    model.add_argument("--mask-override", dest="mask_override", choices=[m.value for m in MaskOverride])
    model.add_argument("--hook")

    p = argparse.ArgumentParser(prog="todinv", description="Task-oriented diffusion inversion on a toy model.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train-toy", parents=[common], argument_default=S, help="train the toy denoiser")
    t.add_argument("--epochs", type=int)
    t.add_argument("--n-images", dest="n_images", type=int)
    t.add_argument("--holdout", type=int)
    t.add_argument("--train-precision", dest="train_precision", choices=sorted(PRECISIONS))
    t.add_argument("--beta-schedule", dest="beta_schedule", choices=BETA_SCHEDULES)
    sub.add_parser("invert", parents=[common, model], argument_default=S, help="invert one manifest task")
    for name in ("reconstruct", "edit"):
        q = sub.add_parser(name, parents=[common, model], argument_default=S,
                           help=f"{name} from an inversion directory")
        q.add_argument("--inversion", help="output directory of an `invert` run")
        if name == "edit":
            q.add_argument("--target-prompt", dest="target_prompt")
    e = sub.add_parser("eval", parents=[common, model], argument_default=S, help="score a manifest")
    e.add_argument("--naive", action="store_true", help="plain DDIM inversion baseline")
    a = sub.add_parser("ablate", parents=[common, model], argument_default=S, help="seeded variant sweeps")
    a.add_argument("--sweep", dest="sweeps", action="append", help="FIELD=V1,V2 (repeatable)")
    a.add_argument("--seeds", type=_int_list)
    a.add_argument("--workers", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    config = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        config = RunConfig.from_mapping(data, config)
    config = RunConfig.from_mapping(explicit, config).validate()
    if args.command in ("reconstruct", "edit"):
        config = _with_inversion_config(config, explicit)
    return config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        out = COMMANDS[args.command](config)
    except (NumericalError, FloatingPointError) as e:
        where = f" at timestep {e.timestep}" if getattr(e, "timestep", None) is not None else ""
        print(f"todinv: numerical failure{where}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as e:
        print(f"todinv: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

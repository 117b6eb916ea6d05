"""Command line entry point: ``refstyle {invert,stylize,sweep,grid}``.

Settings resolve as flag > ``--config`` JSON file > built-in default. The
config file is a flat object keyed by :class:`JobConfig` field names; flags
are the kebab-case spellings of the same names.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import codec as codec_mod
from .denoiser import ToyUNetConfig, build_toy_unet, resolve_adapter
from .errors import ConfigError, RefStyleError
from .evaluate import beta_sweep
from .pipeline import StylizeConfig, invert_pair, stylize
from .schedule import build_schedule, plan_timesteps

COMMANDS = ("invert", "stylize", "sweep", "grid")
TOY_FACTOR = 8


@dataclass
class JobConfig:
    content: Optional[object] = None
    style: Optional[object] = None
    out: Optional[str] = None
    alpha: float = 0.8
    beta: float = 0.2
    steps: int = 30
    cfg_inversion: float = 1.0
    cfg_forward: float = 5.0
    sites: str = "decoder"
    seed: int = 0
    size: int = 64
    backend: str = "toy"
    eps_guard: float = 1e-5
    dump_cache: Optional[str] = None
    betas: str = "0,0.2,0.5,0.8,1"

    def stylize_config(self) -> StylizeConfig:
        sites = self.sites
        if sites not in ("all", "decoder"):
            sites = tuple(s.strip() for s in sites.split(",") if s.strip())
        return StylizeConfig(
            alpha=self.alpha,
            beta=self.beta,
            steps=self.steps,
            cfg_inversion=self.cfg_inversion,
            cfg_forward=self.cfg_forward,
            injection_sites=sites,
            eps_guard=self.eps_guard,
            seed=self.seed,
        )

    def beta_list(self):
        try:
            return [float(b) for b in str(self.betas).split(",") if b.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse betas {self.betas!r}") from None


FIELD_NAMES = [f.name for f in fields(JobConfig)]
_TYPES = {"alpha": float, "beta": float, "steps": int, "cfg_inversion": float,
          "cfg_forward": float, "seed": int, "size": int, "eps_guard": float}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--out")
    shared.add_argument("--alpha", type=float)
    shared.add_argument("--beta", type=float)
    shared.add_argument("--steps", type=int)
    shared.add_argument("--cfg-inversion", type=float)
    shared.add_argument("--cfg-forward", type=float)
    shared.add_argument("--sites", help="'decoder', 'all', or comma-separated site ids")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--size", type=int, help="square working resolution in pixels")
    shared.add_argument("--backend", help="'toy' or 'adapter:<name>'")
    shared.add_argument("--config", help="flat JSON file of job settings")
    shared.add_argument("--dump-cache", help="write the feature cache to this path")
    shared.add_argument("--eps-guard", type=float)

    parser = argparse.ArgumentParser(prog="refstyle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("invert", "invert content (and style) and save the feature cache"),
        ("stylize", "stylize one content image with one style image"),
        ("sweep", "beta ablation sweep, written as CSV"),
        ("grid", "tile content/style/output triplets into one image"),
    ]:
        p = sub.add_parser(name, parents=[shared], help=help_)
        nargs = "+" if name == "grid" else None
        p.add_argument("--content", nargs=nargs)
        p.add_argument("--style", nargs=nargs)
        if name == "sweep":
            p.add_argument("--betas", help="comma-separated ascending betas")
    return parser


def resolve_job(args: argparse.Namespace) -> tuple[JobConfig, dict]:
    """Merge defaults, the config file and flags; returns the job and the
    layer each field came from."""
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a flat JSON object")
        unknown = sorted(set(file_values) - set(FIELD_NAMES))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    flag_values = {k: v for k, v in vars(args).items() if k in FIELD_NAMES and v is not None}

    job = JobConfig()
    source = {name: "default" for name in FIELD_NAMES}
    for layer, values in (("config", file_values), ("flag", flag_values)):
        for key, value in values.items():
            if key in _TYPES and value is not None:
                try:
                    value = _TYPES[key](value)
                except (TypeError, ValueError):
                    raise ConfigError(f"bad value for {key}: {value!r}") from None
            setattr(job, key, value)
            source[key] = layer

    rank = {"default": 0, "config": 1, "flag": 2}
    ra, rb = rank[source["alpha"]], rank[source["beta"]]
    if ra > rb:
        job.beta = 1.0 - job.alpha
    elif rb > ra:
        job.alpha = 1.0 - job.beta
    elif abs(job.alpha + job.beta - 1.0) > 1e-9:
        raise ConfigError(f"alpha + beta must equal 1, got {job.alpha} + {job.beta}")
    return job, source


def make_backend(job: JobConfig):
    """Returns (backend, codec) for the job's backend selection."""
    if job.backend == "toy":
        if job.size % (2 * TOY_FACTOR):
            raise ConfigError(f"toy backend needs --size divisible by {2 * TOY_FACTOR}, got {job.size}")
        codec = codec_mod.SpaceToDepth(TOY_FACTOR)
        cfg = ToyUNetConfig(latent_channels=codec.channels, latent_size=job.size // TOY_FACTOR, seed=job.seed)
        return build_toy_unet(cfg), codec
    if job.backend.startswith("adapter:"):
        backend = resolve_adapter(job.backend[len("adapter:"):])(job)
        return backend, getattr(backend, "codec", codec_mod.SpaceToDepth(TOY_FACTOR))
    raise ConfigError(f"unknown backend {job.backend!r}; use 'toy' or 'adapter:<name>'")


def _paths(value):
    if value is None:
        return []
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _load(path, job):
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return codec_mod.read_png(path, job.size)


def cmd_invert(job, backend, codec):
    x_c = codec.encode(_load(job.content, job))
    x_s = codec.encode(_load(job.style, job)) if job.style else x_c
    cfg = job.stylize_config()
    plan = plan_timesteps(build_schedule(), cfg.steps)
    store, _, _ = invert_pair(x_c, x_s, backend, plan, cfg)
    target = job.dump_cache or job.out
    store.save(target)
    print(f"wrote {len(store)} cache entries to {target}")


def cmd_stylize(job, backend, codec):
    result = stylize(_load(job.content, job), _load(job.style, job), backend,
                     job.stylize_config(), codec=codec)
    codec_mod.write_png(result.image, job.out)
    if job.dump_cache:
        result.store.save(job.dump_cache)
    print(f"wrote {job.out}")


def cmd_sweep(job, backend, codec):
    report = beta_sweep(_load(job.content, job), _load(job.style, job), backend,
                        job.beta_list(), job.stylize_config(), codec=codec)
    report.write_csv(job.out)
    print(f"wrote {len(report)} rows to {job.out}")


def cmd_grid(job, backend, codec):
    contents, styles = _paths(job.content), _paths(job.style)
    if len(styles) == 1:
        styles = styles * len(contents)
    elif len(contents) == 1:
        contents = contents * len(styles)
    if len(contents) != len(styles):
        raise ConfigError(f"{len(contents)} content images cannot pair with {len(styles)} styles")
    rows = []
    for c_path, s_path in zip(contents, styles):
        c_img, s_img = _load(c_path, job), _load(s_path, job)
        out = stylize(c_img, s_img, backend, job.stylize_config(), codec=codec).image
        rows.append(np.concatenate([c_img, s_img, out], axis=1))
    codec_mod.write_png(np.concatenate(rows, axis=0), job.out)
    print(f"wrote {len(rows)}-row grid to {job.out}")


HANDLERS = {"invert": cmd_invert, "stylize": cmd_stylize, "sweep": cmd_sweep, "grid": cmd_grid}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = sub.choices[args.command]
    try:
        job, _ = resolve_job(args)
    except RefStyleError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    if not job.content:
        sub.error("the following arguments are required: --content")
    if args.command in ("stylize", "sweep", "grid") and not job.style:
        sub.error("the following arguments are required: --style")
    if not (job.out or (args.command == "invert" and job.dump_cache)):
        sub.error("the following arguments are required: --out")
    try:
        backend, codec = make_backend(job)
        HANDLERS[args.command](job, backend, codec)
    except RefStyleError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: value: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line entry points.

    match run   --episode <dir> --out <dir> [--params <dir>] [options]
    match suite --config <file> --seeds a..b [--out <dir>]
    match synth --seed N --spec <file> --out <dir>

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 solver non-convergence.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from .errors import ConfigError, ConvergenceError, DataError, MatchError
from .flow import parse_flat_config
from .pipeline import (
    PipelineConfig,
    config_overrides,
    parse_suite_config,
    run_match,
    run_suite,
)
from .synth import EpisodeSpec, generate_synthetic_episode

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="match", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one episode end to end")
    run.add_argument("--episode", required=True, help="episode directory")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--params", help="message-flow parameter directory")
    run.add_argument("--config", help="flat key = value config file (flags override it)")
    run.add_argument("--lambda", dest="lam", type=float, help="matched-mass multiplier")
    run.add_argument("--tau", type=float, help="probability threshold")
    run.add_argument("--ot-mode", choices=("partial", "full"))
    run.add_argument("--mfm", type=_on_off, help="message flow on/off")
    run.add_argument("--prior-mask", dest="prior", type=_on_off, help="prior mask on/off")
    run.add_argument("--schedule", choices=("iterative", "stacked"))
    run.add_argument("--steps", type=int)
    run.add_argument("--neighborhood", type=int, choices=(4, 8))
    run.add_argument("--seed", type=int, help="seed for random parameter init")
    run.add_argument("--epsilon-scale", type=float)
    run.add_argument("--max-iters", type=int)
    run.add_argument("--tolerance", type=float)
    run.add_argument("--anneal-steps", type=int)
    run.add_argument("--figures", type=_on_off, help="render figures on/off")
    run.add_argument("--debug-dump", dest="debug", type=_on_off, help="dump the real-block plan")

    suite = sub.add_parser("suite", help="run variants over synthetic episodes")
    suite.add_argument("--config", required=True, help="suite config file")
    suite.add_argument("--seeds", required=True, help="a..b range or comma list")
    suite.add_argument("--out", help="override the config's output directory")

    synth = sub.add_parser("synth", help="generate one synthetic episode")
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--spec", required=True, help="episode spec file (h, w, c, fg_fraction, ...)")
    synth.add_argument("--out", required=True, help="episode output directory")
    return parser


def _parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigError(f"bad seed range {text!r}: {exc}") from exc
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}: {exc}") from exc


def _episode_spec_from_file(path: str) -> EpisodeSpec:
    pairs = parse_flat_config(Path(path).read_text())
    try:
        return EpisodeSpec(
            height=int(pairs["h"]),
            width=int(pairs["w"]),
            channels=int(pairs["c"]),
            fg_fraction=float(pairs["fg_fraction"]),
            separation=float(pairs.get("separation", "4.0")),
            noise=float(pairs.get("noise", "1.0")),
        )
    except KeyError as exc:
        raise ConfigError(f"episode spec missing key {exc}") from exc


def _run_command(args: argparse.Namespace) -> int:
    kwargs: dict = {}
    if args.config:
        kwargs.update(config_overrides(parse_flat_config(Path(args.config).read_text())))
    kwargs["episode_dir"] = Path(args.episode)
    kwargs["out_dir"] = Path(args.out)
    flag_map = {
        "params": "params_dir", "lam": "lam", "tau": "tau", "ot_mode": "ot_mode",
        "mfm": "mfm", "prior": "use_prior_mask", "schedule": "schedule_mode",
        "steps": "steps", "neighborhood": "neighborhood", "seed": "seed",
        "epsilon_scale": "epsilon_scale", "max_iters": "max_iters",
        "tolerance": "tolerance", "anneal_steps": "anneal_steps",
        "figures": "figures", "debug": "debug_dump",
    }
    for attr, field_name in flag_map.items():
        value = getattr(args, attr)
        if value is not None:
            kwargs[field_name] = Path(value) if field_name == "params_dir" else value
    result = run_match(PipelineConfig(**kwargs))
    report = result["report"]
    if report is not None:
        print(f"fbiou = {report.fbiou:.6f}")
        print(f"miou = {report.miou:.6f}")
    print(f"wrote {result['out_dir']}")
    return 0


def _suite_command(args: argparse.Namespace) -> int:
    spec, base, variants, out_dir = parse_suite_config(Path(args.config).read_text())
    if args.out:
        out_dir = Path(args.out)
    if out_dir is None:
        raise ConfigError("suite config must set 'out' (or pass --out)")
    seeds = _parse_seeds(args.seeds)
    text, failed = run_suite(spec, base, variants, seeds, out_dir)
    sys.stdout.write(text)
    return 1 if failed else 0


def _synth_command(args: argparse.Namespace) -> int:
    spec = _episode_spec_from_file(args.spec)
    out = generate_synthetic_episode(args.seed, spec, args.out)
    print(f"wrote {out}")
    return 0


def _error_location(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        if "otmatch" in frame.filename:
            return f"{Path(frame.filename).name}:{frame.lineno}"
    return f"{Path(tb[-1].filename).name}:{tb[-1].lineno}" if tb else "?"


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _run_command, "suite": _suite_command, "synth": _synth_command}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc} ({_error_location(exc)})", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: ConvergenceError: {exc} ({_error_location(exc)})", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc} ({_error_location(exc)})", file=sys.stderr)
        return EXIT_DATA
    except MatchError as exc:
        print(f"error: {type(exc).__name__}: {exc} ({_error_location(exc)})", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

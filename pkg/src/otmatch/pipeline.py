"""End-to-end episode runner and the batch suite driver.

run_match executes one episode: optional message flow, cosine cost, partial
(or full) transport solve, mask filtering, probability map, thresholded
prediction, metrics. All artifacts are computed first and written atomically
at the end (temp file + rename), so a failed run leaves no partial pred.cmt.

run_suite synthesizes one episode per seed and runs every configured variant
over all of them, aggregating FBIoU / mIoU into suite.txt, suite.csv and a
bar-chart figure.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import figures
from .correspond import (
    best_match_csv,
    best_match_map,
    filter_by_support_mask,
    foreground_probability_map,
    prior_mask,
    threshold_prediction,
)
from .errors import ConfigError, InvalidThreshold, MatchError, ShapeMismatch
from .flow import (
    FlowSchedule,
    ParameterStore,
    load_parameter_store,
    parse_flat_config,
    run_message_flow,
)
from .metrics import render_report, score_prediction
from .otcore import (
    SinkhornConfig,
    build_partial_problem,
    cosine_cost_matrix,
    sinkhorn_solve,
    strip_dummies,
    unit_weights,
)
from .synth import EpisodeSpec, generate_synthetic_episode
from .tensorio import BinaryMask, downsample_mask, read_episode, write_tensor


@dataclass
class PipelineConfig:
    episode_dir: Path
    out_dir: Path
    params_dir: Path | None = None
    lam: float = 1.0
    tau: float = 0.5
    ot_mode: str = "partial"
    mfm: bool | None = None  # None: enabled iff a parameter dir is given
    use_prior_mask: bool = True
    schedule_mode: str | None = None
    steps: int | None = None
    neighborhood: int | None = None
    seed: int = 0
    epsilon_scale: float = 0.05
    max_iters: int = 10000
    tolerance: float = 1e-5
    anneal_steps: int = 3
    figures: bool = True
    debug_dump: bool = False

    def __post_init__(self):
        self.episode_dir = Path(self.episode_dir)
        self.out_dir = Path(self.out_dir)
        if self.params_dir is not None:
            self.params_dir = Path(self.params_dir)
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidThreshold(f"tau must be in [0, 1], got {self.tau}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.ot_mode not in ("partial", "full"):
            raise ConfigError(f"ot_mode must be partial or full, got {self.ot_mode!r}")

    @property
    def mfm_enabled(self) -> bool:
        return self.params_dir is not None if self.mfm is None else self.mfm

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(
            epsilon_scale=self.epsilon_scale,
            max_iters=self.max_iters,
            tolerance=self.tolerance,
            anneal_steps=self.anneal_steps,
        )


_BOOL_WORDS = {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}


def _parse_bool(value: str, key: str) -> bool:
    try:
        return _BOOL_WORDS[value.lower()]
    except KeyError:
        raise ConfigError(f"{key} must be on or off, got {value!r}") from None


_CONFIG_KEYS = {
    "episode": ("episode_dir", Path),
    "params": ("params_dir", Path),
    "out": ("out_dir", Path),
    "lambda": ("lam", float),
    "tau": ("tau", float),
    "ot_mode": ("ot_mode", str),
    "mfm": ("mfm", "bool"),
    "prior_mask": ("use_prior_mask", "bool"),
    "schedule": ("schedule_mode", str),
    "steps": ("steps", int),
    "neighborhood": ("neighborhood", int),
    "seed": ("seed", int),
    "epsilon_scale": ("epsilon_scale", float),
    "max_iters": ("max_iters", int),
    "tolerance": ("tolerance", float),
    "anneal_steps": ("anneal_steps", int),
    "figures": ("figures", "bool"),
    "debug_dump": ("debug_dump", "bool"),
}


def config_overrides(pairs: dict[str, str]) -> dict:
    """Translate flat-config key/value strings into PipelineConfig kwargs."""
    kwargs = {}
    for key, raw in pairs.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        field_name, conv = _CONFIG_KEYS[key]
        kwargs[field_name] = _parse_bool(raw, key) if conv == "bool" else conv(raw)
    return kwargs


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _atomic_write_tensor(path: Path, arr: np.ndarray) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(fd)
    try:
        write_tensor(arr, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _to_feature_resolution(mask: BinaryMask, height: int, width: int, name: str) -> BinaryMask:
    if (mask.height, mask.width) == (height, width):
        return mask
    if mask.height < height or mask.width < width:
        raise ShapeMismatch(
            f"{name} is {mask.height}x{mask.width}, below feature grid {height}x{width}"
        )
    return downsample_mask(mask, height, width)


def _resolve_flow(config: PipelineConfig, channels: int) -> tuple[FlowSchedule, ParameterStore] | None:
    if not config.mfm_enabled:
        return None
    if config.params_dir is not None:
        store = load_parameter_store(config.params_dir)
        schedule = FlowSchedule(
            mode=config.schedule_mode or store.schedule.mode,
            steps=config.steps if config.steps is not None else store.schedule.steps,
            neighborhood=(
                config.neighborhood
                if config.neighborhood is not None
                else store.schedule.neighborhood
            ),
        )
        return schedule, store
    schedule = FlowSchedule(
        mode=config.schedule_mode or "iterative",
        steps=config.steps if config.steps is not None else 1,
        neighborhood=config.neighborhood if config.neighborhood is not None else 8,
    )
    store = ParameterStore.random(config.seed, channels, schedule)
    return schedule, store


def _config_echo(config: PipelineConfig, flow: tuple[str, int, int]) -> list[str]:
    return [
        f"episode = {config.episode_dir}",
        f"params = {config.params_dir if config.params_dir else 'none'}",
        f"out = {config.out_dir}",
        f"lambda = {config.lam}",
        f"tau = {config.tau}",
        f"ot_mode = {config.ot_mode}",
        f"mfm = {'on' if config.mfm_enabled else 'off'}",
        f"prior_mask = {'on' if config.use_prior_mask else 'off'}",
        f"schedule = {flow[0]}",
        f"steps = {flow[1]}",
        f"neighborhood = {flow[2]}",
        f"seed = {config.seed}",
        f"epsilon_scale = {config.epsilon_scale}",
        f"max_iters = {config.max_iters}",
        f"tolerance = {config.tolerance}",
        f"anneal_steps = {config.anneal_steps}",
        f"figures = {'on' if config.figures else 'off'}",
        f"debug_dump = {'on' if config.debug_dump else 'off'}",
    ]


def _schedule_echo(config: PipelineConfig) -> tuple[str, int, int]:
    return (
        config.schedule_mode or "iterative",
        config.steps if config.steps is not None else 1,
        config.neighborhood if config.neighborhood is not None else 8,
    )


def run_match(config: PipelineConfig) -> dict:
    """Run one episode end to end; returns artifact paths and diagnostics."""
    support, query, raw_mask, raw_gt = read_episode(config.episode_dir)
    feat_mask = _to_feature_resolution(raw_mask, support.height, support.width, "support mask")
    gt = (
        _to_feature_resolution(raw_gt, query.height, query.width, "query gt")
        if raw_gt is not None
        else None
    )

    flow_cfg = _resolve_flow(config, support.channels)
    if flow_cfg is not None:
        schedule, store = flow_cfg
        query_f, support_f = run_message_flow(query, support, schedule, store)
        flow_echo = (schedule.mode, schedule.steps, schedule.neighborhood)
    else:
        query_f, support_f = query, support
        flow_echo = _schedule_echo(config)

    cost = cosine_cost_matrix(support_f, query_f)
    m = support.height * support.width
    k = query.height * query.width
    fg_count = feat_mask.foreground_count()
    if config.ot_mode == "full":
        matched = float(min(m, k))
    else:
        matched = float(np.clip(round(config.lam * fg_count), 1, min(m, k)))
    weights = unit_weights(m, k, matched)
    problem = build_partial_problem(weights, cost)
    plan = sinkhorn_solve(problem, config.sinkhorn_config())
    real = strip_dummies(plan, m, k)

    filtered = filter_by_support_mask(real, feat_mask)
    prob = foreground_probability_map(filtered, weights, query.height, query.width)
    pred = threshold_prediction(prob, config.tau)
    best = best_match_map(real, query.height, query.width)
    csv_text = best_match_csv(best, support.width)
    prior = (
        prior_mask(query_f, support_f, feat_mask) if config.use_prior_mask else None
    )
    report = None
    if gt is not None:
        report = score_prediction(pred, gt)
        report.header.append("per-class values macro-average over episodes when aggregated")

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    log_lines = ["# match run log", f"# written {datetime.now(timezone.utc).isoformat()}"]
    log_lines += _config_echo(config, flow_echo)
    log_lines += [
        f"suppliers = {m}",
        f"demanders = {k}",
        f"foreground_nodes = {fg_count}",
        f"matched_mass = {matched}",
        f"sinkhorn_iterations = {plan.iterations}",
        f"marginal_defect = {plan.marginal_defect:.3e}",
        f"achieved_cost = {plan.cost:.9f}",
        f"real_block_flow = {float(real.flows.sum()):.9f}",
    ]

    _atomic_write_tensor(out / "prob.cmt", prob)
    _atomic_write_tensor(out / "pred.cmt", pred.values)
    # float32 carrier: indices are small integers, -1 marks unmatched nodes
    _atomic_write_tensor(out / "best_match.cmt", best.astype(np.float32))
    _atomic_write_text(out / "best_match.csv", csv_text)
    if prior is not None:
        _atomic_write_tensor(out / "prior.cmt", prior)
    if report is not None:
        _atomic_write_text(out / "metrics.txt", render_report(report))
    if config.debug_dump:
        _atomic_write_tensor(out / "plan.cmt", real.flows.astype(np.float32))
    _atomic_write_text(out / "run.log", "\n".join(log_lines) + "\n")
    if config.figures:
        figures.probability_figure(prob, out / "prob.png")
        figures.prediction_figure(
            pred.values, gt.values if gt is not None else None, out / "pred.png"
        )
        figures.best_match_figure(best, support.height, support.width, out / "best_match.png")
        if prior is not None:
            figures.probability_figure(prior, out / "prior.png", title="prior mask")

    return {
        "out_dir": out,
        "prob": prob,
        "pred": pred,
        "best_match": best,
        "plan": real,
        "matched_mass": matched,
        "iterations": plan.iterations,
        "marginal_defect": plan.marginal_defect,
        "achieved_cost": plan.cost,
        "report": report,
    }


@dataclass
class SuiteVariant:
    name: str
    overrides: dict


def parse_suite_config(text: str) -> tuple[EpisodeSpec, dict, list[SuiteVariant], Path | None]:
    """Split a suite config into episode spec, base run kwargs, and variants.

    Variant overrides use dotted keys (`fot.ot_mode = full`); `variants`
    names the variant list. Episode keys: h, w, c, fg_fraction, separation,
    noise.
    """
    pairs = parse_flat_config(text)
    episode_keys = {"h": "height", "w": "width", "c": "channels",
                    "fg_fraction": "fg_fraction", "separation": "separation", "noise": "noise"}
    spec_kwargs = {}
    out_dir = None
    variant_names: list[str] = []
    dotted: dict[str, dict[str, str]] = {}
    base_pairs: dict[str, str] = {}
    for key, value in pairs.items():
        if key in episode_keys:
            conv = int if key in ("h", "w", "c") else float
            spec_kwargs[episode_keys[key]] = conv(value)
        elif key == "out":
            out_dir = Path(value)
        elif key == "variants":
            variant_names = [v.strip() for v in value.split(",") if v.strip()]
        elif "." in key:
            name, sub = key.split(".", 1)
            dotted.setdefault(name, {})[sub] = value
        else:
            base_pairs[key] = value
    missing = {"height", "width", "channels", "fg_fraction"} - spec_kwargs.keys()
    if missing:
        raise ConfigError(f"suite config missing episode keys: {sorted(missing)}")
    spec = EpisodeSpec(**spec_kwargs)
    base = config_overrides(base_pairs)
    if not variant_names:
        variants = [SuiteVariant("default", {})]
    else:
        variants = []
        for name in variant_names:
            if name not in dotted:
                variants.append(SuiteVariant(name, {}))
            else:
                variants.append(SuiteVariant(name, config_overrides(dotted[name])))
    unknown = set(dotted) - {v.name for v in variants}
    if unknown:
        raise ConfigError(f"overrides for undeclared variants: {sorted(unknown)}")
    return spec, base, variants, out_dir


def run_suite(
    spec: EpisodeSpec,
    base_kwargs: dict,
    variants: list[SuiteVariant],
    seeds: list[int],
    out_dir: Path,
) -> tuple[str, int]:
    """Run every variant over one synthetic episode per seed.

    Child failures are recorded and the suite continues; the failure count is
    returned so the CLI can exit nonzero.
    """
    if not seeds:
        raise ConfigError("suite needs at least one seed")
    out_dir = Path(out_dir)
    episodes_dir = out_dir / "episodes"
    for seed in seeds:
        generate_synthetic_episode(seed, spec, episodes_dir / f"seed_{seed}")

    rows = []
    csv_lines = ["variant,seed,fbiou,miou"]
    failures: list[str] = []
    for variant in variants:
        scores = []
        for seed in seeds:
            kwargs = dict(base_kwargs)
            kwargs.update(variant.overrides)
            kwargs["episode_dir"] = episodes_dir / f"seed_{seed}"
            kwargs["out_dir"] = out_dir / variant.name / f"seed_{seed}"
            try:
                result = run_match(PipelineConfig(**kwargs))
            except MatchError as exc:
                failures.append(f"{variant.name}/seed_{seed}: {type(exc).__name__}: {exc}")
                continue
            report = result["report"]
            if report is None:
                failures.append(f"{variant.name}/seed_{seed}: episode lacks ground truth")
                continue
            scores.append((report.fbiou, report.miou))
            csv_lines.append(f"{variant.name},{seed},{report.fbiou:.6f},{report.miou:.6f}")
        if scores:
            fb = np.array([s[0] for s in scores])
            mi = np.array([s[1] for s in scores])
            rows.append({
                "variant": variant.name,
                "episodes": len(scores),
                "fbiou_mean": float(fb.mean()),
                "fbiou_std": float(fb.std()),
                "miou_mean": float(mi.mean()),
                "miou_std": float(mi.std()),
            })

    lines = [
        "# suite report",
        "# per-class IoU macro-averages over episodes",
        f"seeds = {','.join(str(s) for s in seeds)}",
        f"failed = {len(failures)}",
    ]
    for failure in failures:
        lines.append(f"# failure: {failure}")
    for row in rows:
        lines += [
            f"[{row['variant']}]",
            f"episodes = {row['episodes']}",
            f"fbiou_mean = {row['fbiou_mean']:.6f}",
            f"fbiou_std = {row['fbiou_std']:.6f}",
            f"miou_mean = {row['miou_mean']:.6f}",
            f"miou_std = {row['miou_std']:.6f}",
        ]
    text = "\n".join(lines) + "\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out_dir / "suite.txt", text)
    _atomic_write_text(out_dir / "suite.csv", "\n".join(csv_lines) + "\n")
    if rows and base_kwargs.get("figures", True):
        figures.suite_figure(rows, out_dir / "suite.png")
    return text, len(failures)

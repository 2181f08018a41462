"""Command-line driver: ``dpn collect | train | eval | rl | plot``.

Exit codes: 0 success, 2 invalid flags, 3 I/O failure, 4 shape or config
mismatch, 5 malformed input data.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .envs import (DatasetFormatError, atomic_write, collect_random, load_dataset,
                   move_distractor, random_state, render, save_dataset, step, true_distance)
from .metric import GoalMetric, latent_distance_trace, metric_correlation, straight_line_states
from .rl import (evaluate_policy, goal_state, metric_reward_fn, oracle_reward_fn, sac_train,
                 scripted_controller)
from .training import TrainingDiverged, history_csv, train, train_baseline
from .weights import load_weights, save_weights

log = logging.getLogger("dpn")

EXIT_OK, EXIT_FLAGS, EXIT_IO, EXIT_MISMATCH, EXIT_DATA = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise CliError(EXIT_IO, f"cannot read config {path}: {err.strerror}") from None
        try:
            cfg = RunConfig.from_json(text)
        except ConfigError as err:
            raise CliError(EXIT_DATA, f"{path}: {err}") from None
        data = cfg.to_dict()
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return RunConfig.from_dict(data)
    except ConfigError as err:
        raise CliError(EXIT_FLAGS, str(err)) from None


def _write_text(path: Path, text: str) -> None:
    try:
        atomic_write(path, text.encode())
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot write {path}: {err.strerror}") from None


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot create {out}: {err.strerror}") from None
    return out


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _load_weights(path: str):
    try:
        return load_weights(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"weights file not found: {path}") from None
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read {path}: {err.strerror}") from None
    except (DatasetFormatError, ConfigError, ValueError) as err:
        raise CliError(EXIT_DATA, f"{path}: {err}") from None


def _positive(name: str):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {value}")
        return value
    return parse


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_collect(args) -> int:
    overrides = {"env": args.env}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.distractor:
        overrides["render.distractor"] = True
    cfg = _load_config(args.config, overrides)
    ds = collect_random(cfg.env, args.episodes, args.horizon, cfg.render, cfg.seed)
    out = Path(args.out)
    try:
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        crc = save_dataset(ds, out)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot write {out}: {err.strerror}") from None
    _write_text(out.parent / "run_config.json", cfg.to_json())
    size = out.stat().st_size
    print(f"episodes={len(ds.episodes)} bytes={size} crc=0x{crc:08x} path={out}")
    return EXIT_OK


def _read_dataset(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"dataset not found: {path}") from None
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read {path}: {err.strerror}") from None
    except DatasetFormatError as err:
        raise CliError(EXIT_DATA, f"{path}: {err}") from None


def cmd_train(args) -> int:
    ds = _read_dataset(args.data)
    overrides = {"env": ds.kind, "render.distractor": ds.distractor}
    if args.iterations is not None:
        overrides["train.iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train.seed"] = args.seed
        overrides["rl.seed"] = args.seed
    cfg = _load_config(args.config, overrides)
    if tuple(ds.obs_shape) != cfg.render.obs_shape:
        raise CliError(EXIT_MISMATCH,
                       f"dataset observations have shape {tuple(ds.obs_shape)} but the config "
                       f"renders {cfg.render.obs_shape}")
    out = _out_dir(args.out)
    try:
        if args.model == "dpn":
            model, history = train(ds, cfg.train)
        else:
            model, history = train_baseline(args.model, ds, cfg.train)
    except TrainingDiverged as err:
        raise CliError(EXIT_DATA, str(err)) from None
    except ValueError as err:
        raise CliError(EXIT_MISMATCH, str(err)) from None
    try:
        save_weights(model, cfg, out / "model.dpnw")
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot write weights: {err.strerror}") from None
    _write_text(out / "loss.csv", history_csv(history))
    _write_text(out / "run_config.json", cfg.to_json())
    last = history[-1]["total"] if history else float("nan")
    print(f"model={args.model} iterations={len(history)} final_loss={last:.6g} out={out}")
    return EXIT_OK


def _trace_states(env_kind: str, seed: int, steps: int, distractor: bool):
    rng = np.random.default_rng([seed, 1])
    start = random_state(env_kind, rng, distractor)
    goal = random_state(env_kind, rng, distractor)
    return straight_line_states(start, goal, steps), goal


def cmd_eval(args) -> int:
    models = [_load_weights(p) for p in args.weights or []]
    cfg = models[0][1] if models else _load_config(args.config)
    if args.config is not None and models:
        cfg = _load_config(args.config)
    env = args.env or cfg.env
    metrics: list[GoalMetric] = [GoalMetric("pixel", delta=cfg.metric.delta)]
    for path, (kind, mcfg, model) in zip(args.weights or [], models):
        if mcfg.render.obs_shape != cfg.render.obs_shape:
            raise CliError(EXIT_MISMATCH, f"{path} expects observations {mcfg.render.obs_shape}, "
                                          f"evaluation renders {cfg.render.obs_shape}")
        metrics.append(GoalMetric(kind, model, delta=cfg.metric.delta))
    out = _out_dir(args.out_dir)
    states, goal = _trace_states(env, args.seed, cfg.rl.horizon, cfg.render.distractor)
    frames = np.stack([render(s, cfg.render) for s in states])
    goal_obs = render(goal, cfg.render)
    true_trace = [true_distance(s, goal) for s in states]
    summary = []
    seen: dict[str, int] = {}
    for metric in metrics:
        seen[metric.kind] = seen.get(metric.kind, 0) + 1
        name = metric.kind if seen[metric.kind] == 1 else f"{metric.kind}_{seen[metric.kind]}"
        res = metric_correlation(metric, env, args.pairs, args.seed, cfg.render)
        _write_text(out / f"correlation_{name}.csv",
                    _csv(["pair", "value", "true_distance", "kind", "seed"],
                         [(i, v, d, name, args.seed) for i, v, d in res.rows()]))
        trace = latent_distance_trace(frames, metric, goal_obs)
        _write_text(out / f"trace_{name}.csv",
                    _csv(["step", "value", "true_distance", "normalized", "kind", "seed"],
                         [(t, v, d, int(trace.normalized), name, args.seed)
                          for t, (v, d) in enumerate(zip(trace.values, true_trace))]))
        summary.append((name, res.rho, int(res.degenerate), args.pairs, args.seed))
        print(f"metric={name} spearman={res.rho:.4f}" + (" (degenerate)" if res.degenerate else ""))
    _write_text(out / "summary.csv", _csv(["metric", "spearman", "degenerate", "pairs", "seed"],
                                          summary))
    _write_text(out / "run_config.json", cfg.to_json())
    return EXIT_OK


def cmd_rl(args) -> int:
    if args.metric == "oracle" or args.metric == "pixel":
        if args.weights is not None:
            raise CliError(EXIT_FLAGS, f"--metric {args.metric} takes no --weights")
        cfg = _load_config(args.config)
        model = None
    else:
        if args.weights is None:
            raise CliError(EXIT_FLAGS, f"--metric {args.metric} needs --weights")
        kind, cfg, model = _load_weights(args.weights)
        if args.config is not None:
            cfg = _load_config(args.config)
        if kind != args.metric:
            raise CliError(EXIT_MISMATCH, f"{args.weights} holds a {kind} model, "
                                          f"--metric asks for {args.metric}")
    overrides = cfg.to_dict()
    overrides["env"] = args.env or cfg.env
    if args.episodes is not None:
        overrides["rl"]["episodes"] = args.episodes
    if args.seed is not None:
        overrides["rl"]["seed"] = args.seed
    try:
        cfg = RunConfig.from_dict(overrides)
    except ConfigError as err:
        raise CliError(EXIT_FLAGS, str(err)) from None
    rc, env = cfg.rl, cfg.env
    distractor = cfg.render.distractor
    goal = goal_state(env, args.goal_seed, distractor)
    out = _out_dir(args.out_dir)
    eval_seed = rc.seed + 1_000_003

    if args.metric == "oracle":
        policy = scripted_controller(goal)
        reward = oracle_reward_fn(goal, cfg.metric.delta)
        curve = []
        rng = np.random.default_rng(rc.seed)
        for ep in range(rc.episodes):
            s = random_state(env, rng, distractor)
            ret = 0.0
            for _ in range(rc.horizon):
                s = move_distractor(step(s, policy(s)), rng)
                ret += reward(s)
            curve.append((ep, ret, true_distance(s, goal)))
    else:
        metric = GoalMetric(args.metric, model, delta=cfg.metric.delta)
        reward = metric_reward_fn(metric, goal, cfg.render)
        agent, records = sac_train(env, goal, reward, rc, distractor)
        policy = agent.policy()
        curve = [(r.episode, r.ret, r.final_distance) for r in records]
        if metric.clamp_count:
            print(f"warning: reward clamp triggered {metric.clamp_count} times", file=sys.stderr)

    finals = evaluate_policy(policy, env, goal, args.eval_episodes, eval_seed, rc.horizon,
                             distractor)
    _write_text(out / "learning_curve.csv",
                _csv(["episode", "value", "final_distance", "kind", "seed"],
                     [(ep, ret, d, args.metric, rc.seed) for ep, ret, d in curve]))
    _write_text(out / "final_distance.csv",
                _csv(["episode", "value", "kind", "seed"],
                     [(i, d, args.metric, rc.seed) for i, d in enumerate(finals)]))
    _write_text(out / "run_config.json", cfg.to_json())
    print(f"metric={args.metric} env={env} median_final_distance={float(np.median(finals)):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
WIDTH, HEIGHT, MARGIN = 640, 400, 60


def read_series(path: str) -> tuple[list[str], np.ndarray]:
    """Header and (x, y) rows of a CSV.

    x is the first column; y is the ``value`` column if present, else the second.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"input not found: {path}") from None
    except (OSError, UnicodeDecodeError) as err:
        raise CliError(EXIT_DATA if isinstance(err, UnicodeDecodeError) else EXIT_IO,
                       f"cannot read {path}: {err}") from None
    if not rows:
        raise CliError(EXIT_DATA, f"{path}:1: empty file, expected a header row")
    header = rows[0]
    if len(header) < 2:
        raise CliError(EXIT_DATA, f"{path}:1: header needs at least two columns")
    yi = header.index("value") if "value" in header else 1
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CliError(EXIT_DATA, f"{path}:{lineno}: expected {len(header)} fields, "
                                      f"got {len(row)}")
        try:
            x, y = float(row[0]), float(row[yi])
        except ValueError:
            raise CliError(EXIT_DATA, f"{path}:{lineno}: non-numeric value in {row!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise CliError(EXIT_DATA, f"{path}:{lineno}: non-finite value in {row!r}")
        values.append((x, y))
    return header, np.array(values, dtype=np.float64).reshape(-1, 2)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _num(v: float) -> str:
    return f"{v:.4g}"


def render_svg(series: list[tuple[str, list[str], np.ndarray]]) -> str:
    """Deterministic SVG 1.1 line chart, one polyline per series."""
    pts = [d for _, _, d in series if len(d)]
    allv = np.concatenate(pts) if pts else np.zeros((1, 2))
    x0, y0 = allv.min(axis=0)
    x1, y1 = allv.max(axis=0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def sx(x):
        return MARGIN + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph

    xlabel = series[0][1][0] if series else "x"
    ylabel = _ylabel(series[0][1]) if series else "y"
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
           f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<g stroke="black" stroke-width="1">'
           f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}"/>'
           f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}"/></g>',
           '<g font-family="sans-serif" font-size="10" fill="black">']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.2f}" y="{HEIGHT - MARGIN + 14}" '
                   f'text-anchor="middle">{_num(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{MARGIN - 6}" y="{sy(t) + 3:.2f}" text-anchor="end">{_num(t)}</text>')
    out.append(f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle" '
               f'font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="15" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 15 {HEIGHT / 2:.1f})">{_esc(ylabel)}</text>')
    out.append("</g>")
    for i, (label, _, data) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in data)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = MARGIN + 14 * i
        out.append(f'<text x="{WIDTH - MARGIN + 4}" y="{ly}" font-family="sans-serif" '
                   f'font-size="10" fill="{color}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ylabel(header: list[str]) -> str:
    return "value" if "value" in header else header[1]


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def cmd_plot(args) -> int:
    series = []
    for path in args.inputs:
        header, data = read_series(path)
        series.append((Path(path).stem, header, data))
    out = Path(args.out)
    _write_text(out, render_svg(series))
    print(f"series={len(series)} out={out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpn", description="Goal metrics from planning networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="record random-action episodes to a DPND file")
    c.add_argument("--env", choices=("pointmass", "reacher"), required=True)
    c.add_argument("--episodes", type=_positive("--episodes"), required=True)
    c.add_argument("--horizon", type=_positive("--horizon"), required=True)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", required=True)
    c.add_argument("--distractor", action="store_true")
    c.add_argument("--config", default=None, help="RunConfig JSON (render settings)")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train DPN or a baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--model", choices=("dpn", "vae", "inverse", "upn"), default="dpn")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--iterations", type=_positive("--iterations"), default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="correlation and distance traces per metric")
    e.add_argument("--weights", nargs="*", default=[])
    e.add_argument("--env", choices=("pointmass", "reacher"), default=None)
    e.add_argument("--pairs", type=_positive("--pairs"), default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--config", default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rl", help="train the actor-critic against a metric reward")
    r.add_argument("--weights", default=None)
    r.add_argument("--metric", choices=("dpn", "inverse", "vae", "upn", "pixel", "oracle"),
                   required=True)
    r.add_argument("--env", choices=("pointmass", "reacher"), default=None)
    r.add_argument("--goal-seed", type=int, default=0)
    r.add_argument("--episodes", type=_positive("--episodes"), default=None)
    r.add_argument("--eval-episodes", type=_positive("--eval-episodes"), default=10)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--config", default=None)
    r.set_defaults(func=cmd_rl)

    pl = sub.add_parser("plot", help="line chart of CSV series as SVG")
    pl.add_argument("--in", dest="inputs", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.pairs < 10:
        print("dpn eval: error: --pairs must be >= 10", file=sys.stderr)
        return EXIT_FLAGS
    try:
        return args.func(args)
    except CliError as err:
        print(f"dpn {args.command}: error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())

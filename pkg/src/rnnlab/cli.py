"""Command-line experiment runner: train, eval, lemma1, plot and manifest verbs.

Exit status 0 means success, 2 a usage, config or data error, and 3 a
numeric failure (non-finite training values, or a checkpoint that does not
fit its model).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, plotting
from .config import (ConfigError, RunConfig, format_config, load_config, parse_assignment, parse_config,
                     preset_dir, preset_path)
from .trainer import (
    METRICS_HEADER,
    CheckpointError,
    CheckpointShapeError,
    DatasetError,
    MetricsWriter,
    evaluate,
    format_summary,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad arguments; reported on stderr with exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config resolution ---------------------------------------------------------------------

def parse_overrides(items) -> dict:
    """``section.key=value`` strings to typed config values."""
    out = {}
    for item in items or ():
        key, value = parse_assignment(item)
        out[key] = value
    return out


def resolve_config(path: str | None, preset: str | None, overrides: dict) -> RunConfig:
    """Load ``path``; with ``preset``, ``path`` names a shipped experiment instead.

    A path that does not exist also falls back to the shipped preset
    directory, so ``--config addition_desk.cfg`` works from any directory.
    """
    if path is None:
        raise ConfigError("--config is required")
    if preset is not None:
        stem = Path(path).name
        stem = stem[:-4] if stem.endswith(".cfg") else stem
        for scale in ("_desk", "_paper"):
            if stem.endswith(scale):
                stem = stem[:-len(scale)]
        return load_config(preset_path(stem, preset), overrides)
    p = Path(path)
    if not p.exists() and (preset_dir() / p.name).exists():
        p = preset_dir() / p.name
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    return load_config(p, overrides)


# -- train ------------------------------------------------------------------------------------

def run_training(config: RunConfig, out: Path, resume: Path | None = None) -> tuple[int, dict]:
    """Train one run into ``out/<name>/``; returns ``(exit status, summary)``."""
    run_dir = out / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(resume) if resume is not None else None
    if ckpt is not None and format_config(ckpt.config.replace(max_steps=config.max_steps)) != \
            format_config(config):
        raise ConfigError("checkpoint was written by a different config (only train.max_steps may change)")
    with MetricsWriter(run_dir / "metrics.csv", append=ckpt is not None) as sink:
        result = train(config, sink, ckpt)
    save_checkpoint(run_dir / "final.ckpt", result.checkpoint)
    (run_dir / "summary.txt").write_text(format_summary(result.summary, config), encoding="utf-8")
    status = EXIT_NUMERIC if result.summary["status"] == "aborted" else EXIT_OK
    return status, result.summary


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = resolve_config(args.config, args.preset, overrides)
    status, summary = run_training(config, Path(args.out), Path(args.resume) if args.resume else None)
    for key, value in summary.items():
        print(f"{key}: {value}")
    print(f"artifacts: {Path(args.out) / config.name}")
    if status == EXIT_NUMERIC:
        print(f"error: {summary.get('message', 'numeric failure')}", file=sys.stderr)
    return status


# -- eval -------------------------------------------------------------------------------------

TABLE_HEADER = "| run | task | cell | split | metric | value |\n|---|---|---|---|---|---|\n"


def append_table_row(path: Path, cells) -> None:
    fresh = not path.exists()
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if fresh:
            fh.write(TABLE_HEADER)
        fh.write("| " + " | ".join(str(c) for c in cells) + " |\n")


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint {ckpt_path} not found")
    ckpt = load_checkpoint(ckpt_path)
    if args.config:
        ckpt.config = resolve_config(args.config, None, parse_overrides(args.set))
    metrics = evaluate(ckpt, args.split, args.data)
    config = ckpt.config
    for key, value in metrics.items():
        print(f"{key}: {value}")
    name = "bpc" if "bpc" in metrics else ("accuracy" if metrics.get("accuracy") is not None else "loss")
    table = Path(args.table) if args.table else ckpt_path.parent / "eval_table.md"
    append_table_row(table, [config.name, config.task, config.cell, args.split, name, repr(metrics[name])])
    return EXIT_OK


# -- lemma1 -------------------------------------------------------------------------------------

def cmd_lemma1(args) -> int:
    out = Path(args.out) if args.out else None
    if args.mode == "analytic":
        if not 0.0 < args.c < 1.0:
            raise ConfigError(f"--c must lie in (0, 1), got {args.c}")
        if args.steps < 1:
            raise ConfigError("--steps must be positive")
        rng = np.random.default_rng(args.seed)
        if args.z == "feasible":
            z = analysis.feasible_z_sequence(rng, args.steps, args.c, args.z_max)
            report = analysis.lemma1_analytic_probe(args.c, z, z_max=args.z_max)
        elif args.z == "uniform":
            z = rng.uniform(-args.z_max, args.z_max, size=args.steps)
            report = analysis.lemma1_analytic_probe(args.c, z, z_max=args.z_max)
        else:
            z = np.full(args.steps, args.z_max)
            report = analysis.lemma1_analytic_probe(args.c, z, z_max=args.z_max, orient=True)
        text = report.summary()
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "lemma1.csv").write_text(report.to_csv(), encoding="utf-8")
            (out / "lemma1_summary.txt").write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(report.to_csv())
            print()
        sys.stdout.write(text)
        return EXIT_OK if not report.violated else EXIT_NUMERIC
    if not 0.0 <= args.c < 1.0:
        raise ConfigError(f"--c must lie in [0, 1) for training, got {args.c}")
    cells = args.cell or ["rwa", "rda-sigmoid-id"]
    summaries = []
    for cell in cells:
        cfg = analysis.parity_config(cell, seed=args.seed, c=args.c, length=args.length,
                                     hidden=args.hidden, max_steps=args.steps)
        sink = None
        if out is not None:
            cfg = cfg.replace(name=f"parity-{cell}-s{args.seed}")
            (out / cfg.name).mkdir(parents=True, exist_ok=True)
            sink = MetricsWriter(out / cfg.name / "metrics.csv")
        try:
            s = analysis.parity_training_probe(cell, cfg, sink)
        finally:
            if sink is not None:
                sink.close()
        if out is not None:
            (out / cfg.name / "summary.txt").write_text(s.text(), encoding="utf-8")
        summaries.append(s)
        sys.stdout.write(s.text() + "\n")
    print("| cell | final MSE | steps to MSE < 0.01 | max attention | clamp events |")
    print("|---|---|---|---|---|")
    for s in summaries:
        att = "n/a" if s.max_attention is None else f"{s.max_attention:.4g}"
        reached = s.steps_to_threshold if s.steps_to_threshold is not None else "not reached"
        print(f"| {s.cell} | {s.final_mse:.4g} | {reached} | {att} | {s.clamp_count} |")
    return EXIT_NUMERIC if any(s.status == "aborted" for s in summaries) else EXIT_OK


# -- plot -------------------------------------------------------------------------------------

def cmd_plot(args) -> int:
    if args.column not in METRICS_HEADER.split(","):
        raise ConfigError(f"unknown column {args.column!r}; choose from {METRICS_HEADER}")
    series = []
    names = []
    for path in args.metrics:
        p = Path(path)
        try:
            rows = read_metrics(p)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read metrics {p}: {exc}") from None
        if not rows:
            raise ConfigError(f"{p} has no rows beyond the header")
        pts = [(r.step, getattr(r, args.column)) for r in rows if getattr(r, args.column) is not None]
        if not pts:
            raise ConfigError(f"{p} has no values in column {args.column}")
        if args.log and any(v <= 0 for _, v in pts):
            raise ConfigError(f"{p}: log scale needs positive {args.column} values, found values <= 0")
        series.append(pts)
        name = p.parent.name if p.name == "metrics.csv" and p.parent.name else p.stem
        names.append(name)
    svg = plotting.line_chart(series, names, x_label="step", y_label=args.column, log_y=args.log,
                              title=args.title or args.column)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(f"wrote {args.out} ({len(series)} series)")
    return EXIT_OK


# -- manifest ---------------------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    """Runs sharing one output directory and a seed policy (``fixed`` or ``offset``)."""

    runs: list[RunConfig]
    out: Path
    seed_policy: str = "fixed"
    seed: int = 0
    sources: list[str] = field(default_factory=list)


def parse_manifest(text: str, base: Path, out: str | None = None) -> ExperimentManifest:
    """Manifest lines: ``out = DIR``, ``seed_policy = fixed|offset``, ``seed = N`` and
    ``run = CONFIG [section.key=value ...] [seeds=0,1,2]``.

    ``seeds=`` expands a line into one run per seed named ``<name>-s<seed>``.
    With the ``offset`` policy the i-th run (in file order) gets seed
    ``seed + i`` unless its line sets one explicitly.
    """
    settings = {"out": "runs", "seed_policy": "fixed", "seed": "0"}
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", number)
        if key == "run":
            entries.append((number, value.split()))
        elif key in settings:
            settings[key] = value
        else:
            raise ConfigError(f"unknown manifest key {key!r}", number)
    if settings["seed_policy"] not in ("fixed", "offset"):
        raise ConfigError(f"seed_policy must be fixed or offset, got {settings['seed_policy']!r}")
    try:
        base_seed = int(settings["seed"])
    except ValueError:
        raise ConfigError(f"manifest seed {settings['seed']!r} is not an integer") from None
    runs, sources = [], []
    for number, tokens in entries:
        if not tokens:
            raise ConfigError("run needs a config path", number)
        cfg_path = tokens[0] if Path(tokens[0]).is_absolute() else str(base / tokens[0])
        if not Path(cfg_path).exists():
            cfg_path = tokens[0]
        seeds = None
        sets = []
        for tok in tokens[1:]:
            if tok.startswith("seeds="):
                try:
                    seeds = [int(s) for s in tok[len("seeds="):].split(",")]
                except ValueError:
                    raise ConfigError(f"bad seed list {tok!r}", number) from None
            else:
                sets.append(tok)
        try:
            over = parse_overrides(sets)
            cfg = resolve_config(cfg_path, None, over)
        except ConfigError as exc:
            raise ConfigError(f"run on line {number}: {exc}") from None
        if seeds is None:
            if "seed" not in over:
                offset = len(runs) if settings["seed_policy"] == "offset" else 0
                cfg = cfg.replace(seed=base_seed + offset)
            runs.append(cfg)
            sources.append(tokens[0])
        else:
            for s in seeds:
                runs.append(cfg.replace(seed=s, name=f"{cfg.name}-s{s}"))
                sources.append(tokens[0])
    names = [r.name for r in runs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"run names must be unique within a manifest; repeated: {', '.join(dupes)}")
    return ExperimentManifest(runs, Path(out or settings["out"]), settings["seed_policy"], base_seed, sources)


def _manifest_job(config_text: str, out: str):
    config = parse_config(config_text)
    try:
        status, summary = run_training(config, Path(out))
    except (ConfigError, DatasetError, CheckpointError) as exc:
        return config.name, EXIT_USAGE, {"status": "error", "message": str(exc)}
    return config.name, status, summary


def summary_table(runs: list[RunConfig], summaries: dict) -> str:
    lines = ["| run | task | cell | seed | status | steps to threshold | smoothed train loss |",
             "|---|---|---|---|---|---|---|"]
    for cfg in runs:
        s = summaries.get(cfg.name, {})
        loss = s.get("smoothed_train_loss")
        loss_txt = "" if loss is None else f"{loss:.4g}"
        lines.append(f"| {cfg.name} | {cfg.task} | {cfg.cell} | {cfg.seed} | {s.get('status', '')} | "
                     f"{s.get('steps_to_threshold', '')} | {loss_txt} |")
    return "\n".join(lines) + "\n"


def cmd_manifest(args) -> int:
    path = Path(args.manifest)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc.strerror}") from None
    manifest = parse_manifest(text, path.parent, args.out)
    manifest.out.mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    results = {}
    if jobs == 1:
        outcomes = [_manifest_job(format_config(c), str(manifest.out)) for c in manifest.runs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_manifest_job, format_config(c), str(manifest.out)) for c in manifest.runs]
            outcomes = [f.result() for f in futures]
    worst = EXIT_OK
    for name, status, summary in outcomes:
        results[name] = summary
        worst = max(worst, status)
    table = summary_table(manifest.runs, results)
    (manifest.out / "manifest_summary.md").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return worst


# -- entry point --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rnnlab", description="Recurrent attention cell experiments.")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)

    p = sub.add_parser("train", help="train one configured run")
    p.add_argument("--config", help="config file, or experiment name with --preset")
    p.add_argument("--preset", choices=("desk", "paper"), help="use the shipped preset at this scale")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs")
    p.add_argument("--resume", help="continue from this checkpoint; rows are appended")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config to evaluate under (defaults to the checkpoint's own)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--data", help="override task.data")
    p.add_argument("--table", help="summary table file to append to")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lemma1", help="attention growth probe")
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--mode", choices=("analytic", "train"), default="analytic")
    p.add_argument("--cell", action="append", choices=("rwa", "rda-exp-tanh", "rda-sigmoid-id", "lstm", "gru"))
    p.add_argument("--z", choices=("feasible", "uniform", "constant"), default="feasible",
                   help="analytic feature sequence: random feasible, uniform on [-z_max, z_max], "
                        "or constant magnitude z_max pointing at each target")
    p.add_argument("--z-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--out", help="directory for report files")
    p.set_defaults(func=cmd_lemma1)

    p = sub.add_parser("plot", help="learning curves as SVG")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", action="store_true", help="logarithmic y axis")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("manifest", help="run every config listed in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="override the manifest's output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_manifest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

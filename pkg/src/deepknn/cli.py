"""Command-line entry point.

Every subcommand reads an optional ``key = value`` config file, applies
``--set`` overrides and the dedicated flags on top (flags win), and writes its
outputs into ``--out``.  Wall-clock information goes to ``metadata.json`` only,
so the remaining files are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .dataset import DatasetFormatError, FeatureDataset, Space, load_dataset, save_dataset, stack
from .filters import FilterReport
from .harness import (
    ConfigError,
    ExperimentConfig,
    World,
    build_config,
    build_scenarios,
    emit_projection,
    parse_config_text,
    run_experiment,
    sweep_imbalance,
    sweep_normalized_k,
    write_reports,
)
from .victim import train_head

log = logging.getLogger("deepknn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value experiment file")
    common.add_argument("--seed", type=int, help="master seed (config key: seed)")
    common.add_argument("--jobs", type=int, help="worker processes (config key: jobs)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="row file format")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="deepknn", description="Feature-space poisoning defenses on synthetic data.")
    p.add_argument("--version", action="version", version=f"deepknn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("craft", parents=[common], help="craft poisons and write per-trial datasets")
    d = sub.add_parser("defend", parents=[common], help="filter a feature-space dataset file")
    d.add_argument("--input", type=Path, required=True, help="dataset file (csv or binary)")
    d.add_argument("--input-format", choices=("csv", "binary"), help="default: from the extension")
    sub.add_parser("evaluate", parents=[common], help="run trials end to end")
    sub.add_parser("sweep-k", parents=[common], help="Deep k-NN over the normalized-k grid")
    sub.add_parser("sweep-imbalance", parents=[common], help="target-class imbalance with and without replication")
    pr = sub.add_parser("project", parents=[common], help="2-D projection coordinates for one trial")
    pr.add_argument("--trial", type=int, default=0)
    return p


def _resolve(args) -> tuple[ExperimentConfig, int]:
    values: dict[str, str] = {}
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        values.update(parse_config_text(text))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.jobs is not None:
        values["jobs"] = str(args.jobs)
    try:
        jobs = int(values.get("jobs", 1))
    except ValueError as exc:
        raise ConfigError(f"bad value for jobs: {values['jobs']!r}") from exc
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return build_config(values), jobs


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_craft(cfg: ExperimentConfig, jobs: int, args) -> list[Path]:
    scenarios, failures = build_scenarios(cfg, jobs)
    world = World.create(cfg)
    out: Path = args.out
    paths = []
    for t, sc in scenarios.items():
        inputs = sc.trial_inputs(world.extractor, cfg.imbalance_ratio)
        craft_path = out / f"craft_{t:03d}.json"
        _write_json(craft_path, sc.craft.to_dict())
        # --format json keeps the compact binary layout for the datasets
        ext, fmt = ("csv", "csv") if args.format == "csv" else ("bin", "binary")
        data_path = out / f"train_{t:03d}.{ext}"
        save_dataset(inputs.train, data_path, fmt)
        paths += [craft_path, data_path]
    (out / "failures.log").write_text("".join(f"trial={f['trial']} stage={f['stage']} {f['error']}\n" for f in failures), encoding="utf-8")
    return paths


def _cmd_defend(cfg: ExperimentConfig, args) -> list[Path]:
    fmt = args.input_format or ("csv" if args.input.suffix.lower() == ".csv" else "binary")
    ds = load_dataset(args.input, fmt)
    if ds.space is not Space.FEATURE:
        raise ConfigError("defend needs a feature-space dataset")
    report: FilterReport = cfg.defense.build()(ds)
    path = args.out / "filter_report.json"
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    return [path]


def _cmd_project(cfg: ExperimentConfig, args) -> list[Path]:
    one = replace(cfg, trials=args.trial + 1)
    scenarios, failures = build_scenarios(one)
    if args.trial not in scenarios:
        raise RuntimeError(f"trial {args.trial} could not be crafted: {failures[-1]['error']}")
    sc = scenarios[args.trial]
    world = World.create(cfg)
    inputs = sc.trial_inputs(world.extractor, cfg.imbalance_ratio)
    report = cfg.defense.build()(inputs.train)
    head = train_head(report.apply(inputs.train), cfg.victim)
    target = FeatureDataset(
        np.atleast_2d(inputs.target_feature), [sc.target_label], [sc.target_id], Space.FEATURE, inputs.train.num_classes
    )
    pts = emit_projection(stack([inputs.train, target]), sc.target_id, sc.base_label, sc.target_label, head)
    lines = ["id,label,role,kept,u,v"]
    for p in pts:
        if p["id"] == sc.target_id:
            role, kept = "target", ""
        else:
            role = "poison" if p["id"] in inputs.ledger.poison_ids else "clean"
            kept = "1" if p["id"] in report.kept_ids else "0"
        lines.append(f"{p['id']},{p['label']},{role},{kept},{p['u']!r},{p['v']!r}")
    path = args.out / "projection.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [path]


def _run(args) -> list[Path]:
    cfg, jobs = _resolve(args)
    if args.command == "craft":
        return _cmd_craft(cfg, jobs, args)
    if args.command == "defend":
        return _cmd_defend(cfg, args)
    if args.command == "project":
        return _cmd_project(cfg, args)
    if args.command == "evaluate":
        reports = [run_experiment(cfg, jobs)]
    elif args.command == "sweep-k":
        reports = sweep_normalized_k(cfg, jobs=jobs)
    else:
        reports = sweep_imbalance(cfg, jobs=jobs)
    paths = write_reports(reports, args.out, args.format)
    if not any(rep.rows for rep in reports):
        raise RuntimeError("every trial failed; see failures.log")
    return list(paths.values())


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = _dt.datetime.now(_dt.timezone.utc)
    code, error, paths = EXIT_OK, None, []
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        paths = _run(args)
    except (ConfigError, DatasetFormatError) as exc:
        code, error = EXIT_CONFIG, str(exc)
    except Exception as exc:
        code, error = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    if error:
        print(f"deepknn {args.command}: {error}", file=sys.stderr)
    if args.out.is_dir():
        _write_json(
            args.out / "metadata.json",
            {
                "command": args.command,
                "argv": list(sys.argv[1:] if argv is None else argv),
                "version": __version__,
                "started": started.isoformat(),
                "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "exit_code": code,
                "error": error,
                "outputs": sorted(p.name for p in paths),
            },
        )
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``hetapprox <command> [options]``.

Every command reads one JSON config (``--config``), applies ``--set key=value``
overrides and writes its reports below the output root. The root is taken from
``--out-dir``, else the ``HETAPPROX_OUTPUT_ROOT`` environment variable, else the
config's ``output_dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import approx_mult, error_model, pipeline
from .agn_search import write_search_log
from .config import RunConfig, load_config
from .errors import ConfigError, DataFormatError, NumericalError
from .matching import Assignment, check_feasible, reduction_pct
from .nn.network import QuantNetwork

log = logging.getLogger("hetapprox")

OUTPUT_ROOT_ENV = "HETAPPROX_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = dict(_parse_override(s) for s in args.set or [])
    return cfg.with_overrides(overrides) if overrides else cfg


def _output_root(args, cfg: RunConfig) -> Path:
    root = args.out_dir or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_checkpoint(path) -> QuantNetwork:
    try:
        return QuantNetwork.load(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise DataFormatError(f"checkpoint {path} is malformed: {exc}") from None


def _load_assignment(path) -> Assignment:
    try:
        return Assignment.load(path)
    except FileNotFoundError:
        raise ConfigError(f"assignment {path} not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise DataFormatError(f"assignment {path} is malformed: {exc}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_multgen(args) -> int:
    if args.kind == "builtin":
        approx_mult.save_library(approx_mult.builtin_library(), args.out)
        print(f"wrote builtin library to {args.out}")
        return EXIT_OK
    if args.kind == "accurate":
        emap = approx_mult.gen_accurate()
    elif args.kind == "trunc":
        if args.t is None:
            raise ConfigError("multgen trunc needs --t")
        energy = args.energy if args.energy is not None else approx_mult.BUILTIN_ENERGY.get(f"trunc{args.t}", 1.0)
        try:
            emap = approx_mult.gen_truncated(args.t, energy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        energy = args.energy if args.energy is not None else approx_mult.BUILTIN_ENERGY["mitchell"]
        emap = approx_mult.gen_mitchell(energy)
    approx_mult.save_error_map(emap, args.out)
    print(f"wrote {emap.name} (energy_rel {emap.energy_rel:g}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _output_root(args, cfg) / "baseline"
    out.mkdir(parents=True, exist_ok=True)
    splits = pipeline.load_data(cfg)
    net, summary = pipeline.train_baseline(cfg, splits)
    net.save(out / "checkpoint.json")
    _write_json(out / "train_summary.json", summary)
    print(f"float val acc {summary['float_val_acc']:.4f}, int8 val acc {summary['int_val_acc']:.4f}; "
          f"checkpoint {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _config(args)
    if args.lam is not None:
        cfg = cfg.with_overrides({"noise.lam": args.lam})
    out = _output_root(args, cfg) / f"search_lambda_{cfg.noise.lam:.2f}"
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = {"config": cfg.to_dict(), "checkpoint": str(Path(args.checkpoint).resolve())}
    stamp = out / "search_config.json"
    if stamp.exists() and json.loads(stamp.read_text()) != run_cfg and not args.force:
        raise ConfigError(f"{out} holds a search with a different config; refusing to resume (use --force)")
    _write_json(stamp, run_cfg)
    net = _load_checkpoint(args.checkpoint)
    splits = pipeline.load_data(cfg)
    try:
        result = pipeline.run_search(cfg, net, splits)
    except NumericalError as exc:
        if exc.state is not None:
            exc.state.save(out / "last_good.json")
        raise
    write_search_log(result.log, out / "search_log.csv", len(result.net.sigma))
    result.net.save(out / "checkpoint.json")
    sigma = ", ".join(f"{n}={s:.4f}" for n, s in zip(result.net.layer_names, result.net.sigma))
    print(f"lambda {cfg.noise.lam:g}: sigma {sigma}; mean |sigma| {abs(result.net.sigma).mean():.4f}")
    return EXIT_OK


def _characterize(cfg, net, library, splits, within):
    rows = pipeline.characterize_net(net, library, splits.calib, cfg.k_samples, cfg.seed, within)
    return rows, error_model.summarize(rows)


def cmd_characterize(args) -> int:
    cfg = _config(args)
    out = _output_root(args, cfg)
    net = _load_checkpoint(args.checkpoint)
    library = pipeline.load_multipliers(args.library or cfg.library)
    splits = pipeline.load_data(cfg)
    rows, s = _characterize(cfg, net, library, splits, args.within)
    path = out / "characterize.csv"
    error_model.write_report(rows, path)
    m, single = s["multi"], s["single"]
    print(f"pearson {m['pearson']:.4f}, median rel. error {100 * m['median_rel_err']:.2f}% "
          f"(IQR {100 * m['iqr']:.2f}%); single-distribution median {100 * single['median_rel_err']:.2f}%; "
          f"MRE pearson {s['mre_pearson']:.4f}; {path}")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _config(args)
    out = _output_root(args, cfg)
    net = _load_checkpoint(args.checkpoint)
    library = pipeline.load_multipliers(args.library or cfg.library)
    splits = pipeline.load_data(cfg)
    rows, _ = _characterize(cfg, net, library, splits, "joint")
    assignment, profile, table = pipeline.match(net, library, splits.calib, rows, cfg.noise.lam)
    if not check_feasible(assignment, profile, table):
        raise NumericalError("matched assignment violates a layer threshold")
    path = Path(args.output) if args.output else out / "assignment.json"
    assignment.save(path)
    layers = ", ".join(f"{n}:{m}" for n, m in assignment.layers.items())
    print(f"energy_rel {assignment.energy_total_rel:.4f} ({reduction_pct(assignment.energy_total_rel):.1f}% "
          f"reduction); {layers}; {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _output_root(args, cfg)
    net = _load_checkpoint(args.checkpoint)
    assignment = _load_assignment(args.assignment)
    library = pipeline.load_multipliers(args.library or cfg.library)
    splits = pipeline.load_data(cfg)
    metrics, trained = pipeline.simulate(cfg, net, assignment, library, splits, retrain=not args.no_retrain)
    metrics["energy_rel"] = pipeline.energy_total(assignment, net, library)
    _write_json(out / "simulate_metrics.json", metrics)
    if not args.no_retrain:
        trained.save(out / "retrained_checkpoint.json")
    msg = f"approx acc {metrics['approx_acc']:.4f}"
    if "retrained_acc" in metrics:
        msg += f", after retraining {metrics['retrained_acc']:.4f}"
    print(f"{msg}; energy_rel {metrics['energy_rel']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _output_root(args, cfg) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    library = pipeline.load_multipliers(args.library or cfg.library)
    splits = pipeline.load_data(cfg)
    if args.checkpoint:
        baseline = _load_checkpoint(args.checkpoint)
    else:
        baseline, summary = pipeline.train_baseline(cfg, splits)
        baseline.save(out / "baseline_checkpoint.json")
        _write_json(out / "train_summary.json", summary)
    _write_json(out / "config.json", cfg.to_dict())
    result = pipeline.pareto_sweep(cfg, baseline, library, splits, out)
    print(f"baseline int8 acc {result.baseline_acc:.4f}")
    for p in result.points:
        print(f"lambda {p['lambda']:.2f}: energy {p['energy_rel']:.4f}, retrained acc {p['retrained_acc']:.4f}"
              f"{' *' if p['front'] else ''}")
    print(f"pareto table {out / 'pareto.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetapprox", description="Heterogeneous approximate-multiplier assignment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, checkpoint=False, library=False):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. noise.lam=0.3 (value parsed as JSON)")
        p.add_argument("--out-dir", help=f"output root (overrides ${OUTPUT_ROOT_ENV} and the config)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="network checkpoint JSON")
        if library:
            p.add_argument("--library", help="'builtin' or an error-map library directory")

    p = sub.add_parser("multgen", help="write builtin error maps")
    p.add_argument("kind", choices=["accurate", "trunc", "mitchell", "builtin"])
    p.add_argument("--t", type=int, help="truncated low bits for kind=trunc")
    p.add_argument("--energy", type=float, help="relative energy stored in the header")
    p.add_argument("--out", required=True, help="output file (a directory for kind=builtin)")
    p.set_defaults(func=cmd_multgen)

    p = sub.add_parser("train", help="train and calibrate a baseline network")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="learn per-layer noise tolerances")
    common(p, checkpoint=True)
    p.add_argument("--lam", type=float, help="noise-loss weight (overrides noise.lam)")
    p.add_argument("--force", action="store_true", help="overwrite a search run with a different config")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("characterize", help="predict and measure per-layer error statistics")
    common(p, checkpoint=True, library=True)
    p.add_argument("--within", choices=["joint", "conditional"], default="conditional")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("match", help="assign multipliers to layers")
    common(p, checkpoint=True, library=True)
    p.add_argument("--output", help="assignment file (default <root>/assignment.json)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("simulate", help="evaluate an assignment, optionally with retraining")
    common(p, checkpoint=True, library=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--no-retrain", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="full lambda sweep with Pareto front")
    common(p, library=True)
    p.add_argument("--checkpoint", help="reuse a trained baseline instead of training one")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

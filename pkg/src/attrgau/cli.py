"""Command-line pipeline: synth, preprocess, build-graph, train, evaluate, analyze-attributes, robustness.

Exit codes: 0 success, 1 usage error, 2 data or runtime error.

Config precedence (lowest to highest): built-in defaults, ``--config`` file,
``--set key=value`` flags, then dedicated flags such as ``--seed`` and
``--variant``.

Relative paths are resolved against ``$ATTRGAU_DATA_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .backbone import BackboneParams
from .data import (TEST_WINDOWS_MS, load_bundle, load_events, preprocess, save_bundle, subsample_train,
                   synth_generate, write_events)
from .errors import AttrGAUError, ConfigError
from .evaluation import (attribute_proximity_mrr, grouped_metrics, inject_noise, popularity_groups,
                         write_plot_data)
from .graph import build_graph, load_graph, read_attributes, save_graph, write_attributes
from .trainer import TrainConfig, ablation_switches, evaluate, fit, iter_scores, prepare_examples, seed_stream

logger = logging.getLogger("attrgau")

DATA_DIR_ENV = "ATTRGAU_DATA_DIR"
EVENTS_FILE = "events.tsv"
ATTRIBUTES_FILE = "attributes.tsv"

FORMATS = """file formats:
  events      TSV lines session_id<TAB>timestamp_ms<TAB>item_id; '#' lines are comments
  attributes  header '#items=N parents=P leaves=Q', then TSV lines item<TAB>parent<TAB>leaf
  config      flat 'key = value' lines; '#' starts a comment
  bundle      .npz cache written by 'preprocess'
  graph       .npz cache written by 'build-graph'
  checkpoint  binary parameter file written by 'train --checkpoint'
  report      JSON lines, one record per epoch plus a summary record
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _path(raw: str | None) -> Path | None:
    if raw is None:
        return None
    p = Path(raw)
    base = os.environ.get(DATA_DIR_ENV)
    return p if p.is_absolute() or not base else Path(base) / p


def _floats(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}")


def _ints(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")


def _key_value(raw: str) -> tuple[str, str]:
    if "=" not in raw:
        raise argparse.ArgumentTypeError(f"expected key=value, got {raw!r}")
    key, value = raw.split("=", 1)
    return key.strip(), value.strip()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable; beats --config)")
    p.add_argument("--variant", help="full, vanilla, wo_ccr, wo_align or wo_uniform")
    p.add_argument("--seed", type=int, help="master seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attrgau", description=__doc__, epilog=FORMATS,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=FORMATS,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = verb("synth", "write a synthetic events file and attributes file")
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--parents", type=int, default=4)
    p.add_argument("--leaves", type=int, default=10)
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--coherence", type=float, required=True, help="probability the next click shares the leaf")
    p.add_argument("--mean-length", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = verb("preprocess", "filter, split and remap raw events into a bundle")
    p.add_argument("--events", required=True)
    p.add_argument("--attributes", help="attribute triples keyed by raw item id")
    p.add_argument("--out", required=True, help="bundle path (.npz)")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--gap-minutes", type=float, help="split sessions at idle gaps longer than this")
    p.add_argument("--test-window-ms", type=int, help="sessions ending in the final window form the test set")
    p.add_argument("--test-window", choices=sorted(TEST_WINDOWS_MS),
                   help="named default window: dressipi 30 days, diginetica 7 days, retailrocket 2 days")
    p.add_argument("--test-fraction", type=float, default=0.1, help="used when no window is given")

    p = verb("build-graph", "build the normalized attributed graph of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="graph path (.npz)")

    p = verb("train", "train a model and write its report")
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", help="cached graph from build-graph")
    _add_config_flags(p)
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of training sessions to keep")
    p.add_argument("--report", help="report path (JSON lines)")
    p.add_argument("--checkpoint", help="write best parameters here")
    p.add_argument("--timing", action="store_true", help="include wall-clock fields in the report")

    p = verb("evaluate", "score a checkpoint on the test split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph")
    p.add_argument("--noise-ratio", type=float, help="insert this ratio of noise items into test prefixes")
    p.add_argument("--seed", type=int, help="noise seed (defaults to the checkpoint's seed)")
    p.add_argument("--groups", type=int, help="also report metrics per target-popularity group")
    p.add_argument("--plot-data", help="write per-group HR@5/MRR@5 columns here (needs --groups)")
    p.add_argument("--out", help="metrics path (JSON); stdout when omitted")

    p = verb("analyze-attributes", "MRR of the latest prefix item sharing the target's attribute")
    p.add_argument("--bundle", required=True)
    p.add_argument("--level", choices=("parent", "leaf", "both"), default="both")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")

    p = verb("robustness", "sparsity, noise and depth sweeps against the vanilla backbone")
    p.add_argument("--bundle", required=True)
    _add_config_flags(p)
    p.add_argument("--fractions", type=_floats, help="training fractions, e.g. 0.25,0.5,0.75")
    p.add_argument("--noise-ratios", type=_floats, help="test noise ratios, e.g. 0.25,0.5,0.75")
    p.add_argument("--depths", type=_ints, help="graph layer counts, e.g. 1,2,3,4")
    p.add_argument("--no-baseline", action="store_true", help="skip the vanilla runs")
    p.add_argument("--out", required=True, help="output directory for reports and plot data")
    return parser


# -- helpers ----------------------------------------------------------------------------------
def _config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        path = _path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
    try:
        if args.config:
            config = TrainConfig.from_file(path)
        config = config.with_overrides(dict(args.overrides))
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        if args.variant:
            config = ablation_switches(config, args.variant)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return config


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _frac_tag(x: float) -> str:
    return f"{x:g}"


def _emit(obj: dict, out: Path | None = None) -> None:
    text = json.dumps(obj, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        _write_text(out, text)


# -- verbs ------------------------------------------------------------------------------------
def cmd_synth(args) -> None:
    # the master seed feeds the generator through its own named stream
    seed = int(seed_stream(args.seed, "synth").integers(2**63 - 1))
    events, records = synth_generate(args.items, args.parents, args.leaves, args.sessions, args.coherence,
                                     seed, mean_length=args.mean_length)
    out = _path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / EVENTS_FILE, events)
    write_attributes(out / ATTRIBUTES_FILE, records)
    logger.info("wrote %d events to %s", len(events), out)


def cmd_preprocess(args) -> None:
    events = load_events(_path(args.events))
    attrs = read_attributes(_path(args.attributes)) if args.attributes else None
    if args.test_window and args.test_window_ms is not None:
        raise UsageError("give --test-window or --test-window-ms, not both")
    window = TEST_WINDOWS_MS[args.test_window] if args.test_window else args.test_window_ms
    bundle = preprocess(events, min_item_count=args.min_count, session_gap_minutes=args.gap_minutes,
                        test_window_ms=window, test_fraction=args.test_fraction, attributes=attrs)
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(out, bundle)
    _emit(bundle.stats)


def cmd_build_graph(args) -> None:
    bundle = load_bundle(_path(args.bundle))
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(out, build_graph(bundle.attributes))


def _load_graph(raw: str | None, config: TrainConfig):
    return load_graph(_path(raw), config.num_layers) if raw else None


def cmd_train(args) -> None:
    config = _config(args)
    bundle = subsample_train(load_bundle(_path(args.bundle)), args.fraction, config.seed)
    params, report = fit(bundle, config, _load_graph(args.graph, config))
    logger.info("finished in %.1fs, best epoch %d", report.wall_clock_seconds, report.best_epoch)
    if args.report:
        _write_text(_path(args.report), report.to_jsonl(include_timing=args.timing))
    if args.checkpoint:
        path = _path(args.checkpoint)
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, params.arrays(), {"config": config.to_dict(), "best_epoch": report.best_epoch})
    _emit({"best_epoch": report.best_epoch, **report.best_metrics})


def cmd_evaluate(args) -> None:
    if args.plot_data and not args.groups:
        raise UsageError("--plot-data needs --groups")
    arrays, meta = checkpoint.load(_path(args.checkpoint))
    config = TrainConfig().with_overrides({k: str(v) for k, v in meta.get("config", {}).items()})
    params = BackboneParams.from_arrays(arrays)
    bundle = load_bundle(_path(args.bundle))
    graph = _load_graph(args.graph, config)
    if graph is None and config.use_attributes:
        graph = build_graph(bundle.attributes, config.num_layers)
    test = bundle.test
    if args.noise_ratio:
        seed = config.seed if args.seed is None else args.seed
        noise_seed = int(seed_stream(seed, "noise").integers(2**63 - 1))
        test = inject_noise(test, args.noise_ratio, noise_seed, bundle.num_items)
    report = evaluate(params, graph, test, config)
    if args.groups:
        prepared = prepare_examples(test, config.max_session_len)
        scores, targets = zip(*iter_scores(params, graph, prepared, config))
        groups = popularity_groups(test, bundle.train_item_counts(), args.groups)
        report.groups = grouped_metrics(np.concatenate(scores), np.concatenate(targets), groups)
        if args.plot_data:
            write_plot_data(_path(args.plot_data), "group", [g["group"] for g in report.groups],
                            {k: [g[k] for g in report.groups] for k in ("HR@5", "MRR@5")})
    _emit(report.as_dict(), _path(args.out))


def cmd_analyze(args) -> None:
    bundle = load_bundle(_path(args.bundle))
    examples = {"train": bundle.train, "test": bundle.test, "all": bundle.train + bundle.test}[args.split]
    levels = ("parent", "leaf") if args.level == "both" else (args.level,)
    _emit({f"{lvl}_MRR": attribute_proximity_mrr(examples, bundle.attributes, lvl) for lvl in levels}
          | {"count": len(examples), "split": args.split})


def cmd_robustness(args) -> None:
    if not (args.fractions or args.noise_ratios or args.depths):
        raise UsageError("give at least one of --fractions, --noise-ratios, --depths")
    config = _config(args)
    bundle = load_bundle(_path(args.bundle))
    out = _path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arms = {"enhanced": config}
    if not args.no_baseline:
        arms["vanilla"] = ablation_switches(config, "vanilla")
    summary: dict = {}

    if args.fractions:
        series = {name: [] for name in arms}
        for frac in args.fractions:
            sub = subsample_train(bundle, frac, config.seed)
            for name, cfg in arms.items():
                _, report = fit(sub, cfg)
                _write_text(out / f"fraction_{_frac_tag(frac)}_{name}.jsonl", report.to_jsonl(include_timing=False))
                series[name].append(report.best_metrics["MRR@5"])
        write_plot_data(out / "fractions.dat", "fraction", args.fractions, series)
        summary["fractions"] = series

    if args.noise_ratios:
        series = {name: [] for name in arms}
        noise_seed = int(seed_stream(config.seed, "noise").integers(2**63 - 1))
        noisy = {r: inject_noise(bundle.test, r, noise_seed, bundle.num_items) for r in args.noise_ratios}
        for name, cfg in arms.items():
            params, report = fit(bundle, cfg)
            _write_text(out / f"noise_base_{name}.jsonl", report.to_jsonl(include_timing=False))
            graph = build_graph(bundle.attributes, cfg.num_layers) if cfg.use_attributes else None
            for r in args.noise_ratios:
                series[name].append(evaluate(params, graph, noisy[r], cfg).mrr[5])
        write_plot_data(out / "noise.dat", "ratio", args.noise_ratios, series)
        summary["noise"] = series

    if args.depths:
        series = {"enhanced": []}
        for depth in args.depths:
            _, report = fit(bundle, config.replace(num_layers=depth))
            _write_text(out / f"depth_{depth}.jsonl", report.to_jsonl(include_timing=False))
            series["enhanced"].append(report.best_metrics["MRR@5"])
        write_plot_data(out / "depths.dat", "layers", args.depths, series)
        summary["depths"] = series
    _emit(summary)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze-attributes": cmd_analyze,
    "robustness": cmd_robustness,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        COMMANDS[args.verb](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (AttrGAUError, ValueError, OSError) as exc:
        print(f"attrgau: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())

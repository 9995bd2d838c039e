"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 run failure, 4 report failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, _int_list, load_config, parse_strategies
from .continual import Strategy
from .dataio import DatasetManifest, ManifestEntry, save_session, synth_generate, write_manifest
from .otta import OttaFlags
from .report import ReportError, make_report
from .runner import ABLATION_FLAGS, RunFailure, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_REPORT = 0, 2, 3, 4

log = logging.getLogger("micl")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "strategies", None):
        cfg = replace(cfg, strategies=parse_strategies(args.strategies))
    if getattr(args, "otta", None):
        try:
            cfg = replace(cfg, otta=OttaFlags.parse(args.otta))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if getattr(args, "buffer", None):
        cfg = replace(cfg, buffers=_int_list(args.buffer, "--buffer"))
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if args.out:
        cfg = replace(cfg, out=args.out)
    try:
        cfg.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_synth(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    sessions = synth_generate(cfg.synth)
    entries = []
    for s in sessions:
        name = f"sub-{s.subject_id:03d}_ses-{s.session_idx:02d}_{s.paradigm}.micl"
        save_session(s, data_dir / name)
        entries.append(ManifestEntry(s.subject_id, s.session_idx, s.paradigm, data_dir / name))
    manifest = DatasetManifest(entries, [f"ch{i}" for i in range(cfg.synth.n_channels)])
    write_manifest(manifest, out / "manifest.csv")
    print(f"wrote {len(sessions)} sessions for {cfg.synth.n_subjects} subjects "
          f"({sum(len(s.trials) for s in sessions)} trials) to {data_dir}")
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def _run(cfg: ExperimentConfig, **kw) -> int:
    result = run_experiment(cfg, cfg.out, **kw)
    print(f"{len(result.rows)} result rows written to {Path(cfg.out) / 'results.csv'}")
    for r in result.accuracy_table()["summary"]:
        p = f"  p={float(r['p_vs_source']):.4f}" if r["p_vs_source"] else ""
        print(f"  {r['paradigm']} {r['strategy']:<12} [{r['flags']}] "
              f"{float(r['mean']):6.2f} +- {float(r['std']):5.2f}{p}")
    if result.failures:
        print(f"warning: {len(result.failures)} subject(s) failed within tolerance", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(_load(args))


def cmd_ablate_buffer(args) -> int:
    cfg = _load(args)
    buffers = cfg.buffers or (2, 3, 4)
    cfg = replace(cfg, strategies=(Strategy.parse("ef-seq"), Strategy.parse("joint-seq")), buffers=buffers)
    return _run(cfg)


def cmd_ablate_otta(args) -> int:
    return _run(_load(args), flag_sets=ABLATION_FLAGS, source_only=True)


def cmd_report(args) -> int:
    run_dir = args.run_dir or args.out
    if not run_dir:
        if not args.config:
            print("error: report needs a run directory (positional or --out)", file=sys.stderr)
            return EXIT_CONFIG
        run_dir = _load(args).out
    paths = make_report(run_dir)
    print(f"wrote {len(paths)} report files to {paths[0].parent}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micl", description="Pseudo-online continual learning for MI-EEG decoding")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_flags=True):
        sp.add_argument("--config", help="sectioned key=value experiment file")
        sp.add_argument("--out", help="output directory (overrides [experiment] out)")
        sp.add_argument("--seed", type=int, help="root seed (overrides config)")
        if run_flags:
            sp.add_argument("--strategies", help="comma list, e.g. ef-ind,joint-seq or 'all'")
            sp.add_argument("--otta", help="ea,adabn | ea | adabn | off")
            sp.add_argument("--buffer", help="comma list of last-k buffer sizes, e.g. 2,3,4")
            sp.add_argument("--jobs", type=int, help="parallel subject workers")

    common(sub.add_parser("synth", help="generate a synthetic cohort and manifest"), run_flags=False)
    common(sub.add_parser("run", help="pre-train, fine-tune and evaluate all strategies"))
    rp = sub.add_parser("report", help="render tables and SVG figures for a run directory")
    rp.add_argument("run_dir", nargs="?")
    common(rp, run_flags=False)
    common(sub.add_parser("ablate-buffer", help="last-k buffer ablation for sequential fine-tuning"))
    common(sub.add_parser("ablate-otta", help="EA / AdaBN ablation for the source model"))
    return p


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "report": cmd_report,
            "ablate-buffer": cmd_ablate_buffer, "ablate-otta": cmd_ablate_otta}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    except (RunFailure, FileNotFoundError, ValueError) as exc:
        if args.command == "report":
            print(f"report error: {exc}", file=sys.stderr)
            return EXIT_REPORT
        if args.command == "synth" and isinstance(exc, ValueError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``repil <command> ...``.

Exit status is 0 only when every requested run completes.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..dataio import read_dataset, stacked_observations
from ..evalstat import LABELERS, export_embeddings, saliency_map, write_pgm
from ..models import load_encoder, save_encoder
from ..repl import train_repl, write_loss_history
from .config import OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig
from .pipelines import load_data, run_experiment, stage_rngs
from .suite import SuiteConfig, report_suite, run_suite

log = logging.getLogger("repil")


def _load(path) -> ExperimentConfig:
    return ExperimentConfig.load(path)


def cmd_repl_train(args) -> int:
    cfg = _load(args.config)
    if cfg.repl is None:
        raise ConfigError("repl-train needs a [repl] section")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.toml")
    _, repl_data = load_data(cfg)
    encoder, history = train_repl(cfg.repl, repl_data, stage_rngs(cfg.seed)["repl"], seed=cfg.seed)
    write_loss_history(run_dir / "repl_loss.csv", history)
    save_encoder(run_dir / "encoder.ckpt", encoder, {"algorithm": cfg.repl.name})
    print(f"encoder written to {run_dir / 'encoder.ckpt'}")
    return 0


def _cmd_il(kind):
    def run(args) -> int:
        cfg = _load(args.config)
        if cfg.il != kind:
            raise ConfigError(f"config trains {cfg.il}, not {kind}")
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        art = run_experiment(cfg)
        for rec in art.results:
            print(f"{rec.task}\t{rec.algorithm}\tseed {rec.seed}\treturn {rec.mean_return:.3f}")
        print(f"outputs in {art.run_dir}")
        return 0
    return run


def cmd_suite(args) -> int:
    suite = SuiteConfig.load(args.config)
    result = run_suite(suite, n_seeds=args.seeds)
    print(result.table.to_markdown())
    for name, seed, err in result.failures:
        print(f"FAILED {name} seed {seed}: {err}", file=sys.stderr)
    print(f"{result.n_runs - len(result.failures)}/{result.n_runs} runs completed; "
          f"table in {suite.suite_dir}")
    return 0 if result.ok else 1


def cmd_report(args) -> int:
    table, missing = report_suite(args.results_dir)
    print(table.to_markdown())
    for name, seed in missing:
        print(f"missing {name} seed {seed}", file=sys.stderr)
    return 0 if not missing else 1


def cmd_saliency(args) -> int:
    encoder = load_encoder(args.checkpoint)
    obs, _, _, _ = stacked_observations(read_dataset(args.dataset))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(min(args.frames, len(obs))):
        write_pgm(out / f"saliency_{i}.pgm", saliency_map(encoder, obs[i]))
    print(f"wrote {min(args.frames, len(obs))} saliency maps to {out}")
    return 0


def cmd_embeddings(args) -> int:
    encoder = load_encoder(args.checkpoint)
    n = export_embeddings(encoder, read_dataset(args.dataset), args.labels, args.out,
                          gamma=args.gamma, lam=args.lam)
    print(f"wrote {n} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="repil", description="Representation learning for image-based imitation.",
        epilog=f"Relative output directories are placed under ${OUTPUT_ROOT_ENV} (default ./runs).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("repl-train", help="pretrain an encoder only")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_repl_train)

    for kind in ("bc", "gail"):
        s = sub.add_parser(kind, help=f"run one {kind.upper()} experiment (any regime)")
        s.add_argument("config")
        s.add_argument("--seed", type=int)
        s.set_defaults(fn=_cmd_il(kind))

    s = sub.add_parser("suite", help="run experiments x seeds and build the comparison table")
    s.add_argument("config")
    s.add_argument("--seeds", type=int, help="number of seeds (default: from the suite file)")
    s.set_defaults(fn=cmd_suite)

    s = sub.add_parser("report", help="rebuild the comparison table of a suite directory")
    s.add_argument("results_dir")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("analyze", help="saliency maps or embedding export")
    an = s.add_subparsers(dest="analysis", required=True)
    a = an.add_parser("saliency")
    a.add_argument("checkpoint")
    a.add_argument("dataset")
    a.add_argument("--out", default="saliency")
    a.add_argument("--frames", type=int, default=8)
    a.set_defaults(fn=cmd_saliency)
    a = an.add_parser("embeddings")
    a.add_argument("checkpoint")
    a.add_argument("dataset")
    a.add_argument("--out", default="embeddings.csv")
    a.add_argument("--labels", nargs="+", default=list(LABELERS), choices=LABELERS)
    a.add_argument("--gamma", type=float, default=0.99)
    a.add_argument("--lam", type=float, default=0.95)
    a.set_defaults(fn=cmd_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

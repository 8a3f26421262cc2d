"""``roklab`` command line.

Every subcommand reads one flat JSON config (``--config``) with ``--set
key=value`` overrides and works inside the configured artifact directory.
Failures print one line ``error: <category>: <message>`` to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline as P
from .config import ConfigError, RunConfig

EXIT_CODES = {"config": 2, "missing-artifact": 3, "io": 4}
DEFAULT_EXIT = 1

COMMANDS = {
    "gen-data": "generate (or import) the dataset",
    "pretrain-teacher": "train the retrieval teacher and export knowledge targets",
    "build-kb": "distil the knowledge base from the teacher's targets",
    "train-backbone": "train the configured backbone",
    "eval": "test-split metrics for every trained model",
    "bench": "per-sample latency of the knowledge path vs the retrieval path",
    "export-knowledge": "write knowledge vectors of the test split to CSV",
    "sweep-alpha": "train one knowledge base and backbone per alpha",
    "ablate-strategies": "compare knowledge-base update strategies",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roklab", description=__doc__.split("\n")[0])
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective config and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (JSON value or bare string); repeatable")
        p.add_argument("--artifacts", help="artifact directory (overrides artifact_dir)")
        if name in ("train-backbone", "eval", "bench"):
            p.add_argument("--baseline", action="store_true",
                           help="use the plain backbone: both integration modes off")
    return parser


def _run(args) -> str:
    overrides = list(args.set)
    if args.artifacts:
        overrides.append(f"artifact_dir={args.artifacts}")
    cfg = RunConfig.load(args.config, overrides)
    flags = {}
    if getattr(args, "baseline", False):
        flags = {"feature_wise": False, "instance_wise": False}
    art = P.Artifacts(cfg.artifact_dir)
    cmd = args.command
    if cmd == "gen-data":
        ds = P.gen_data(cfg)
        return f"wrote {len(ds)} samples to {art.data}"
    if cmd == "pretrain-teacher":
        P.pretrain_teacher(cfg)
        return f"wrote {art.teacher} and {art.targets}"
    if cmd == "build-kb":
        P.build_kb(cfg)
        return f"wrote {art.kb}"
    if cmd == "train-backbone":
        model, trace = P.train_backbone(cfg, **flags)
        last = trace[-1] if trace else {}
        auc = last.get("valid_auc")
        suffix = f" (test AUC {auc:.4f})" if auc is not None else ""
        return f"wrote {art.backbone(model.cfg.tag)}{suffix}"
    if cmd == "eval":
        reports = P.evaluate(cfg, **flags)
        lines = [f"{r.model:28s} auc={r.auc:.4f} logloss={r.logloss:.4f}"
                 + (f" rel_impr={r.rel_impr:.2f}%" if r.rel_impr is not None else "")
                 for r in reports]
        return "\n".join(lines + [f"wrote {art.reports / 'metrics.csv'}"])
    if cmd == "bench":
        report = P.run_bench(cfg, **flags)
        lines = [f"{t.path:18s} pool={t.pool_size:<7d} threads={t.threads} mean={t.mean_ms:.4f}ms"
                 for t in report.timings]
        return "\n".join(lines + [f"wrote {art.reports / 'latency.csv'}"])
    if cmd == "export-knowledge":
        return f"wrote {P.export_knowledge(cfg)}"
    if cmd == "sweep-alpha":
        rows = P.sweep_alpha(cfg)
        return "\n".join([f"{r['setting']:10s} auc={r['auc']:.4f}" for r in rows]
                         + [f"wrote {art.reports / 'sweep_alpha.csv'}"])
    if cmd == "ablate-strategies":
        rows = P.ablate_strategies(cfg)
        return "\n".join([f"{r['setting']:8s} auc={r['auc']:.4f}" for r in rows]
                         + [f"wrote {art.reports / 'ablate_strategies.csv'}"])
    raise AssertionError(cmd)


def _category(exc: BaseException) -> str:
    if isinstance(exc, P.PipelineError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    for cls, name in P.CATEGORIES:
        if isinstance(exc, cls):
            return name
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_config:
        sys.stdout.write(RunConfig().dumps())
        return 0
    if not args.command:
        parser.print_help()
        return EXIT_CODES["config"]
    try:
        print(_run(args))
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorized line
        category = _category(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        return EXIT_CODES.get(category, DEFAULT_EXIT)
    return 0


if __name__ == "__main__":
    sys.exit(main())

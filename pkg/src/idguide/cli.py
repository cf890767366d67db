"""``idguide`` command line.

Exit codes: 0 success (warnings allowed), 1 usage error, 2 data error,
3 provider error after retries.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import stages
from .enhance.pipeline import EnhancementError
from .enhance.providers import ProviderError
from .guidance import GuidanceConfig
from .metrics import MetricError
from .selector import SelectionError
from .testbed import ConditionError, ParameterError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which means data error here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--output-dir", "-o", help="run directory (default: run)")
    p.add_argument("--seed", type=int, help="64-bit run seed")
    p.add_argument("--force", action="store_true", help="overwrite this stage's existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idguide", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("enhance", help="prompt and reference-image enhancement over a manifest")
    _common(p)
    p.add_argument("--manifest", help="input manifest JSONL")
    p.add_argument("--cache-dir", help="response cache directory (default: <output-dir>/cache)")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--provider-config", help="text provider JSON (endpoint, model, timeout, params)")
    p.add_argument("--blacklist", help="facial-attribute blacklist JSON")
    p.add_argument("--strict-providers", action="store_true", help="exit 3 if any provider call failed after retries")

    p = sub.add_parser("sample", help="guided sampling on the analytic testbed")
    _common(p)
    p.add_argument("--manifest", help="manifest to sample (default: enhanced manifest in the run directory)")
    p.add_argument("--wi-sweep", help="comma-separated identity-guidance weights, one method per value")
    p.add_argument("--traces", action="store_true", help="write per-step JSONL traces")

    p = sub.add_parser("score", help="compute metric vectors for every candidate")
    _common(p)
    p.add_argument("--ingest", help="external metrics JSONL to merge")
    p.add_argument("--prefer-local", action="store_true", help="locally computed values win on conflict")

    p = sub.add_parser("select", help="per-sample best-of-N selection")
    _common(p)
    p.add_argument("--weights", help="weights JSON, or 'uniform' (default: bundled calibration)")
    p.add_argument("--tie-break", help="comma-separated method priority for exact ties")
    p.add_argument("--exclusions-fatal", action="store_true")
    p.add_argument("--metrics", help="metrics JSONL (default: <output-dir>/metrics.jsonl)")

    p = sub.add_parser("calibrate", help="fit metric weights to published overall scores")
    _common(p)
    p.add_argument("--rows", help="rows JSON (default: bundled published rows)")

    p = sub.add_parser("report", help="render selection tables")
    _common(p)
    p.add_argument("--published", action="store_true", help="append published rows recomputed under the weights")
    return parser


def _config(args: argparse.Namespace) -> stages.RunConfig:
    overrides = {
        "output_dir": args.output_dir,
        "seed": args.seed,
        "manifest_path": getattr(args, "manifest", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "parallelism": getattr(args, "parallelism", None),
        "weights_path": getattr(args, "weights", None),
        "blacklist_path": getattr(args, "blacklist", None),
    }
    if getattr(args, "tie_break", None):
        overrides["tie_break"] = [m.strip() for m in args.tie_break.split(",") if m.strip()]
    cfg = stages.RunConfig.load(args.config, **overrides)
    if getattr(args, "provider_config", None):
        with open(args.provider_config) as fh:
            cfg.providers = {**cfg.providers, "text": {"kind": "http", **json.load(fh)}}
    if getattr(args, "wi_sweep", None):
        try:
            values = [float(v) for v in args.wi_sweep.split(",")]
        except ValueError:
            raise stages.UsageError(f"bad --wi-sweep {args.wi_sweep!r}") from None
        base = cfg.guidance.to_dict()
        cfg.methods = {f"wi={v:g}": GuidanceConfig.from_dict({**base, "w_i": v}) for v in values}
    return cfg


def _dispatch(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.command == "enhance":
        s = stages.run_enhance(cfg, force=args.force)
        print(f"enhanced {s.samples} samples, {s.warnings} warnings, {s.provider_failures} provider failures")
        if args.strict_providers and s.provider_failures:
            return EXIT_PROVIDER
    elif args.command == "sample":
        summary = stages.run_sample(cfg, force=args.force, traces=args.traces)
        print(stages.render_hit_rates(summary))
    elif args.command == "score":
        table = stages.run_score(cfg, force=args.force, ingest=args.ingest, prefer_local=args.prefer_local)
        print(f"scored {sum(len(m) for m in table.values())} candidates over {len(table)} samples")
    elif args.command == "select":
        report = stages.run_select(cfg, force=args.force, exclusions_fatal=args.exclusions_fatal, metrics_path=args.metrics)
        usage = ", ".join(f"{k}: {v}" for k, v in sorted(report.method_usage.items()))
        print(f"selected {len(report.per_sample)} samples; mean overall {report.aggregate['overall']:.4f}; usage {usage}")
    elif args.command == "calibrate":
        rows, _ = stages.load_calibration_rows(args.rows)
        report = stages.run_calibrate(cfg, force=args.force, rows_path=args.rows)
        print(stages.render_calibration(report, rows))
    elif args.command == "report":
        print(stages.run_report(cfg, force=args.force, published=args.published), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except stages.UsageError as exc:
        print(f"idguide: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProviderError as exc:
        print(f"idguide: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (
        stages.StageError,
        MetricError,
        SelectionError,
        EnhancementError,
        ParameterError,
        ConditionError,
        json.JSONDecodeError,
        FileNotFoundError,
        KeyError,
    ) as exc:
        print(f"idguide: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

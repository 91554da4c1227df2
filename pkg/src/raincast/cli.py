"""``forecast`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, backend
from .evt import EvtError
from .graph import GraphError
from .ingest import IngestError
from .metrics import MetricError
from .physics import PhysicsError
from .pipeline import STAGES, ConfigError, MissingArtifact, PipelineConfig, StageConflict, run_stage
from .recurrent import RecurrentError
from .trainer import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("raincast")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forecast", description="Teleconnection graph rainfall forecasting pipeline.")
    p.add_argument("stage", choices=[*STAGES, "all", "synth"],
                   help="pipeline stage to run; 'all' runs every stage, 'synth' writes the bundled dataset")
    p.add_argument("--config", help="pipeline config JSON (for 'synth': output directory)")
    p.add_argument("--force", action="store_true", help="rebuild even when artifacts exist")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    if args.stage == "synth":
        from .synthetic import write_dataset

        path = write_dataset(args.config, seed=0 if args.seed is None else args.seed)
        print(path)
        return EXIT_OK
    try:
        cfg = PipelineConfig.load(args.config)
        log.info("kernel backend: %s", backend())
        stages = STAGES if args.stage == "all" else [args.stage]
        for s in stages:
            status = run_stage(s, cfg, force=args.force, seed=args.seed)
            print(f"{s}: {status}")
    except (ConfigError, StageConflict) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError, EvtError, MetricError, RecurrentError) as exc:
        print(f"numerical failure: {exc or type(exc).__name__}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, GraphError, PhysicsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

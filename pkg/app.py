"""
Command-line entry point for the dynamic neural SLAM toolkit.

Subcommands:
    simulate        render a scenario (or a scene file) into a dataset directory
    run             run tracking, mapping and motion classification on a dataset
    eval            ATE RMS between an estimated and a ground-truth trajectory
    gradcheck       finite-difference checks of the analytic gradients
    ablate          paired runs on one scenario, summarized in ablation.csv
    pretrain-prior  train a prior motion classifier on category embeddings

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from models.config import SlamConfig, settings
from models.exceptions import (
    ConfigurationError,
    DatasetError,
    InsufficientDataError,
    NonFiniteGradientError,
    NumericalFailureError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _out_dir(value: str | None, name: str) -> Path:
    return Path(value) if value else Path(settings.OUTPUT_ROOT) / name


def _load_config(path: str | None) -> SlamConfig:
    return SlamConfig.from_json_file(path) if path else SlamConfig()


# ============================================================================
# Commands
# ============================================================================

def cmd_simulate(args: argparse.Namespace) -> int:
    from logic.scenarios import SCENARIOS, build_scenario
    from storage.dataset import write_dataset

    if args.scene not in SCENARIOS and not Path(args.scene).is_file():
        raise UsageError(f"unknown scene {args.scene!r}; expected one of {sorted(SCENARIOS)} or a scene file")
    script = build_scenario(args.scene, seed=args.seed, n_frames=args.frames)
    if args.embedding_noise is not None:
        script = script.model_copy(update={"embedding_noise": args.embedding_noise})
    root = write_dataset(script, _out_dir(args.out, script.name))
    print(root)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    from logic.slam import run_slam
    from storage.dataset import load_dataset

    config = _load_config(args.config)
    overrides = {}
    if args.no_classifier:
        overrides["use_classifier"] = False
    if args.no_replay:
        overrides["use_replay"] = False
    if args.position_mode:
        overrides["position_mode"] = True
    if args.prior:
        overrides["prior_path"] = args.prior
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = config.model_copy(update=overrides)

    dataset = load_dataset(args.data)
    result = run_slam(dataset, config, _out_dir(args.out, dataset.script.name), progress=not args.quiet)
    if result.report.ate_rms is not None:
        print(f"ate_rms {result.report.ate_rms:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    import numpy as np

    from logic.evaluation import ate_errors
    from models.reports import RunReport
    from storage.dataset import read_tum_trajectory

    est = read_tum_trajectory(args.est)
    gt = read_tum_trajectory(args.gt)
    errors = ate_errors(est, gt)
    ate = float(np.sqrt(np.mean(np.square(list(errors.values())))))
    print(f"ate_rms {ate:.6f}")
    if args.report:
        RunReport(ate_rms=ate, frame_errors=errors, n_frames=len(est)).to_json_file(args.report)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from logic.gradcheck import run_gradcheck

    results = run_gradcheck([args.module], seed=args.seed)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.suite}/{result.name}: {result.report.max_rel_error:.3e} {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_ablate(args: argparse.Namespace) -> int:
    from logic.ablation import run_ablation
    from logic.scenarios import SCENARIOS

    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; expected one of {sorted(SCENARIOS)}")
    table = run_ablation(
        args.scenario,
        _load_config(args.config),
        _out_dir(args.out, f"ablate_{args.scenario}"),
        seed=args.seed,
        n_frames=args.frames,
    )
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_pretrain_prior(args: argparse.Namespace) -> int:
    from logic.classifier import pretrain_prior
    from logic.scene_sim import CATEGORIES
    from storage.checkpoints import save_prior

    config = _load_config(args.config)
    movable = args.movable or ["person", "balloon"]
    static = args.static or [c for c in CATEGORIES if c not in movable]
    prior = pretrain_prior(config, movable, static, args.seed, steps=args.steps)
    print(save_prior(prior, args.out))
    return EXIT_OK


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neurodyn", description="Continual-learning dynamic neural RGB-D SLAM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scenario into a dataset directory")
    p.add_argument("--scene", required=True, help="scenario name or scene JSON file")
    p.add_argument("--out", help="dataset directory (default: OUTPUT_ROOT/<scene>)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, default=None, help="override the number of frames")
    p.add_argument("--embedding-noise", type=float, default=None, help="per-view embedding noise std")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run SLAM on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config file (default: built-in defaults)")
    p.add_argument("--out", help="run directory (default: OUTPUT_ROOT/<scene>)")
    p.add_argument("--no-classifier", action="store_true", help="treat every pixel as static")
    p.add_argument("--position-mode", action="store_true", help="concatenate object positions to embeddings")
    p.add_argument("--prior", help="prior classifier checkpoint")
    p.add_argument("--no-replay", action="store_true", help="disable classifier experience replay")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="ATE RMS of an estimated trajectory")
    p.add_argument("--est", required=True, help="estimated TUM trajectory")
    p.add_argument("--gt", required=True, help="ground-truth TUM trajectory")
    p.add_argument("--report", help="also write a JSON run report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=["all", "map", "renderer", "classifier", "pose"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired runs on one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--config", help="JSON config file shared by every variant")
    p.add_argument("--out", help="output directory (default: OUTPUT_ROOT/ablate_<scenario>)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pretrain-prior", help="train a prior motion classifier")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON config file (embedding_dim, classifier_hidden, classifier_lr)")
    p.add_argument("--movable", nargs="+", help="categories labeled dynamic")
    p.add_argument("--static", nargs="+", help="categories labeled static")
    p.add_argument("--steps", type=int, default=500)
    p.set_defaults(func=cmd_pretrain_prior)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ConfigurationError, InsufficientDataError) as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except (NumericalFailureError, NonFiniteGradientError) as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

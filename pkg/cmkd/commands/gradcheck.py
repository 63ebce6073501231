import argparse
import logging

from cmkd.exceptions import EXIT_RUNTIME
from cmkd.gradcheck import CHECKS, MIN_INSTANCES, TOLERANCE, run_gradcheck

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "gradcheck", help="compare loss gradients with finite differences"
    )
    parser.add_argument("--instances", type=int, default=MIN_INSTANCES)
    parser.add_argument("--seed", type=int, default=0)
    # negative control for tests: perturb one check's analytic gradient
    parser.add_argument("--corrupt", choices=list(CHECKS), help=argparse.SUPPRESS)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    results = run_gradcheck(args.instances, args.seed, corrupt=args.corrupt)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{status}  {r.name:<11} max_rel_err={r.max_rel_error:.3e} "
            f"instances={r.instances}"
        )
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(
            "gradient check failed for %s (tolerance %g)", ", ".join(failed), TOLERANCE
        )
        return EXIT_RUNTIME
    return 0

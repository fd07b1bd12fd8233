"""Check every analytic gradient in the package against finite differences.

Runs the three 64-bit central-difference suites (fully-connected
distortion gradient, convolutional distortion gradient, weight backprop)
and prints their worst relative errors.  Everything should land around
1e-7, far under the 1e-5 gate the `gradcheck` subcommand enforces.
"""

import argparse
import time

from disoutlab import run_backprop_suite, run_conv_suite, run_fc_suite


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--instances", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    suites = (
        ("fc distortion", run_fc_suite, 1000),
        ("conv distortion", run_conv_suite, 2000),
        ("weight backprop", run_backprop_suite, 3000),
    )
    print(f"{'suite':<16} {'max rel err':>12} {'coords':>8} "
          f"{'skipped':>8} {'time':>7}")
    for label, runner, base_seed in suites:
        start = time.perf_counter()
        res = runner(instances=args.instances, seed=base_seed + args.seed)
        took = time.perf_counter() - start
        print(f"{label:<16} {res.max_rel_err:>12.3e} {res.checked:>8} "
              f"{res.skipped:>8} {took:>6.1f}s")
        assert res.ok(1e-5), f"{label} exceeded 1e-5 (seed {res.worst_seed})"
    print("all suites below 1e-5")


if __name__ == "__main__":
    main()

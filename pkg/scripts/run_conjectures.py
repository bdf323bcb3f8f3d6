"""Run the toy suite: tune alpha on held-out seeds, then paired vanilla/SVSL runs.

    python3 scripts/run_conjectures.py [--seeds 0 1 2 3 4] [--alpha 0.1]

Prints, per seed, the vanilla IT epoch, EOT accuracies, the layer-ordering and
IT->EOT checks, and the SVSL deltas (mismatch: vanilla - svsl, accuracy: svsl - vanilla).
"""

import argparse
import time

import numpy as np

from svsl.experiments import ALPHA_GRID, EVAL_SEEDS, TUNING_SEEDS, SeedOutcome, ToySuite, tune_alpha


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(EVAL_SEEDS))
    ap.add_argument("--alpha", type=float, default=None, help="skip tuning and use this alpha")
    ap.add_argument("--gamma", type=int, default=1)
    args = ap.parse_args()

    suite = ToySuite()
    t0 = time.perf_counter()
    if args.alpha is None:
        alpha, scores = tune_alpha(suite, TUNING_SEEDS, ALPHA_GRID, args.gamma)
        print("tuning seeds", TUNING_SEEDS, "mean EOT test-acc gain:",
              ", ".join(f"{a:g}: {v:+.4f}" for a, v in scores.items()), "-> alpha", alpha)
    else:
        alpha = args.alpha

    print(f"{'seed':>4} {'IT':>4} {'van_test':>8} {'svsl_test':>9} {'order':>5} {'it>eot':>6} "
          f"{'d_lambda':>8} {'d_acc':>7}")
    outs = []
    for s in args.seeds:
        o = SeedOutcome(s, suite.run(s), suite.run(s, alpha, args.gamma))
        c = o.comparison
        outs.append(o)
        print(f"{s:>4} {str(o.vanilla.it_epoch):>4} {o.vanilla.eot.test_accuracy:>8.4f} "
              f"{o.svsl.eot.test_accuracy:>9.4f} {str(all(o.ordering.values())):>5} "
              f"{str(o.it_to_eot.holds):>6} {c.mean_intermediate_test_delta():>+8.4f} "
              f"{c.eot_test_accuracy_delta:>+7.4f}")
    d = [o.comparison.eot_test_accuracy_delta for o in outs]
    print(f"mean d_acc {np.mean(d):+.4f}  min {min(d):+.4f}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()

"""Untargeted transfer from the substitute to the victim, per attack and epsilon.

Every attack sees the same images with the same per-image seeds, so the rates
are paired. Usage::

    python3 scripts/transfer_ordering.py --eps 0.05 0.08 0.12 --images 200
"""

import argparse
import time

import numpy as np

from gsattack import zoo
from gsattack.attacks import ATTACK_NAMES, preset, run_attack
from gsattack.model import LossSpec, Network, predict


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.05, 0.08, 0.10, 0.12])
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--images", type=int, default=200)
    ap.add_argument("--attacks", nargs="+", default=list(ATTACK_NAMES))
    args = ap.parse_args()

    t0 = time.perf_counter()
    victim = zoo.victim(args.seed)
    substitute, curve = zoo.substitute(args.seed)
    print(f"models ready in {time.perf_counter() - t0:.0f}s; "
          f"substitute held-out agreement {curve[-1]['heldout_agreement']:.3f}")
    xs, ys = zoo.dataset(args.seed).split("heldout")
    xs, ys = xs[:args.images], ys[:args.images]
    net = Network(substitute)

    print(f"{'eps':>6}  " + "  ".join(f"{a:>9}" for a in args.attacks))
    for eps in args.eps:
        row = []
        for name in args.attacks:
            advs = [run_attack(net, x, preset(name, eps, args.iterations, loss=LossSpec.cross_entropy(int(y)),
                                              seed=i)).adversarial
                    for i, (x, y) in enumerate(zip(xs, ys))]
            row.append(float((predict(victim, np.stack(advs)) != ys).mean()))
        print(f"{eps:6.3f}  " + "  ".join(f"{r:9.3f}" for r in row))


if __name__ == "__main__":
    main()

"""Show that the five named attacks collapse onto each other as mu, p and N shrink.

Prints the L-inf distance between each pair that should coincide; every line
should read 0.
"""

import numpy as np

from gsattack import zoo
from gsattack.attacks import AttackConfig, fgsm, preset, run_attack
from gsattack.model import LossSpec, Network


def main(seed=0, eps=0.03, n=10):
    ds = zoo.dataset(seed)
    sub, _ = zoo.substitute(seed)
    net = Network(sub)
    k = ds.indices("attack-source")[0]
    x, loss = ds.images[k], LossSpec.cross_entropy(int(ds.labels[k]))

    def run(name, **kw):
        return run_attack(net, x, preset(name, eps, n, loss=loss, seed=seed, **kw)).adversarial

    pairs = {
        "p=0:  mdi2fgsm vs mifgsm": (run("mdi2fgsm", p=0.0), run("mifgsm")),
        "p=0:  di2fgsm vs ifgsm": (run("di2fgsm", p=0.0), run("ifgsm")),
        "mu=0: mdi2fgsm vs di2fgsm": (run("mdi2fgsm", mu=0.0), run("di2fgsm")),
        "mu=0: mifgsm vs ifgsm": (run("mifgsm", mu=0.0), run("ifgsm")),
        "N=1, alpha=eps: ifgsm vs fgsm": (
            run_attack(net, x, AttackConfig(eps, 1, alpha=eps, loss=loss)).adversarial,
            fgsm(net, x, preset("fgsm", eps, loss=loss)).adversarial),
        "control: mdi2fgsm vs ifgsm": (run("mdi2fgsm"), run("ifgsm")),
    }
    for label, (a, b) in pairs.items():
        print(f"{label:34s} max |diff| = {np.max(np.abs(a - b)):.3g}")


if __name__ == "__main__":
    main()

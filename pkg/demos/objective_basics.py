"""Walk through the selection objective on a handful of hand-made samples.

Run with ``python3 demos/objective_basics.py``.
"""

import numpy as np

from sievestream.objective import (
    KernelSpec,
    ObjectiveSpec,
    Sample,
    SelectionState,
    objective_gain,
    objective_value,
    selection_commit,
)


def main():
    spec = ObjectiveSpec(lambda_i=1.0, lambda_d=1.0, alpha=1.0, kernel=KernelSpec("polynomial-features"))
    confident = [0.97, 0.01, 0.01, 0.01]
    unsure = [0.3, 0.3, 0.2, 0.2]
    samples = [
        Sample("a", seq=0, softmax=unsure, features=[1.0, 0.0, 0.0]),
        Sample("a-copy", seq=1, softmax=unsure, features=[1.0, 0.0, 0.0]),
        Sample("b", seq=2, softmax=unsure, features=[0.0, 1.0, 0.0]),
        Sample("c", seq=3, softmax=confident, features=[0.0, 0.0, 1.0]),
    ]

    print("singleton values f({e}):")
    for s in samples:
        print(f"  {s.id:7s} {objective_value([s], spec):.4f}")

    # the copy of "a" gains much less once "a" is in the set
    state = SelectionState(spec)
    selection_commit(state, samples[0], spec)
    print("\nmarginal gains after selecting 'a':")
    for s in samples[1:]:
        print(f"  {s.id:7s} {objective_gain(state, s, spec):.4f}")

    print("\nf({a, a-copy}) =", round(objective_value(samples[:2], spec), 4))
    print("f({a, b})      =", round(objective_value([samples[0], samples[2]], spec), 4))

    # with the diversity term off the objective is a plain sum of entropies
    modular = ObjectiveSpec(lambda_d=0.0)
    total = objective_value(samples, modular)
    print("\nentropy-only value of all four:", round(total, 4))
    assert np.isclose(total, sum(objective_value([s], modular) for s in samples))


if __name__ == "__main__":
    main()

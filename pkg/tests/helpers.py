"""Small builders shared by the test modules."""

import numpy as np

from sievestream.objective import KERNEL_KINDS, KernelSpec, ObjectiveSpec, Sample


def make_pool(rng, n, classes=4, dim=3, prefix="s"):
    P = rng.dirichlet(np.ones(classes), size=n)
    X = rng.normal(size=(n, dim))
    return [Sample(id=f"{prefix}{i:03d}", seq=i, softmax=P[i], features=X[i]) for i in range(n)]


def modular_pool(scores, prefix="s"):
    return [Sample(id=f"{prefix}{i}", seq=i, score=float(v)) for i, v in enumerate(scores)]


def spec_for(kind, lambda_i=1.0, lambda_d=1.0, alpha=1.0, beta=1.0):
    return ObjectiveSpec(lambda_i=lambda_i, lambda_d=lambda_d, alpha=alpha,
                         kernel=KernelSpec(kind, beta=beta))


def direct_kernel(a, b, kind, beta=1.0):
    """Straight numpy formulas, independent of the numba loops."""
    if kind == "polynomial-features":
        return float(np.dot(a.features, b.features))
    if kind == "rbf-l1-raw":
        return float(np.exp(-beta * np.abs(a.features - b.features).sum()))
    if kind == "rbf-l2-features":
        return float(np.exp(-beta * np.linalg.norm(a.features - b.features)))
    p, q = a.softmax, b.softmax
    m = (p + q) / 2

    def kl(x, y):
        mask = x > 0
        return float(np.sum(x[mask] * np.log(x[mask] / y[mask])))

    return float(np.exp(-beta * (0.5 * kl(p, m) + 0.5 * kl(q, m))))


def direct_value(samples, spec):
    """f(S) from scratch with a dense determinant."""
    if not samples:
        return 0.0
    kind = spec.kernel.kind
    g = 0.0
    for s in samples:
        if spec.informativeness == "softmax-entropy":
            p = s.softmax[s.softmax > 0]
            g += float(-(p * np.log(p)).sum())
        else:
            g += s.score
    n = len(samples)
    M = np.array([[direct_kernel(a, b, kind, spec.kernel.beta) for b in samples] for a in samples])
    logdet = np.log(np.linalg.det(np.eye(n) + spec.alpha * M)) if spec.lambda_d > 0 else 0.0
    return spec.lambda_i * g + spec.lambda_d * 0.5 * logdet


ALL_KERNELS = KERNEL_KINDS

"""Shared test helpers: finite-difference gradient checking and small
fixtures used across the suite."""

import numpy as np
import pytest

from forgenas.cdc import DEFAULT_OP_NAMES, OperatorRegistry
from forgenas.estimator import Genotype


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    tag = getattr(getattr(item, "function", None), "_acceptance", None)
    if tag is not None and report.when == "call":
        report._acceptance = tag


def pytest_runtest_logreport(report):
    """One PASS/FAIL line per acceptance criterion, printed outside test
    capture so it survives pytest's default fd-level capturing."""
    tag = getattr(report, "_acceptance", None)
    if tag is not None:
        num, desc = tag
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE {num:>2}] {verdict}  {desc}", flush=True)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a) + abs(b), 1e-8)


def fd_gradients(make_loss, leaves, h=1e-5, entries_per_leaf=6, rng=None):
    """Check analytic gradients of a scalar loss against central finite
    differences on a random subset of entries of each leaf tensor.

    make_loss() must rebuild the graph from the (mutated) leaf .data arrays
    and return a scalar Tensor. Returns the worst relative error seen.

    Entries where the loss is locally non-smooth (a relu kink inside the
    FD stencil, detected by disagreement between the h and 2h central
    differences) are skipped: the finite difference is meaningless there,
    while at smooth points a wrong analytic gradient still fails because
    both FD estimates agree with each other.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    loss = make_loss()
    loss.backward(retain_grads=True)
    worst = 0.0
    checked = 0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        flat = leaf.data.reshape(-1)
        gflat = leaf.grad.reshape(-1)
        k = min(entries_per_leaf, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for idx in picks:
            orig = flat[idx]

            def central(step):
                flat[idx] = orig + step
                up = float(make_loss().data)
                flat[idx] = orig - step
                down = float(make_loss().data)
                flat[idx] = orig
                return (up - down) / (2.0 * step)

            numeric = central(h)
            if rel_err(numeric, central(2.0 * h)) > 1e-4:
                continue  # kink inside the stencil; FD invalid here
            checked += 1
            worst = max(worst, rel_err(float(gflat[idx]), numeric))
    assert checked > 0, "all sampled entries sat on non-smooth points"
    for leaf in leaves:
        leaf.grad = None
    return worst


@pytest.fixture
def registry():
    return OperatorRegistry(DEFAULT_OP_NAMES)


def hand_genotype(registry_names=DEFAULT_OP_NAMES):
    """A small fixed genotype valid under the default registry."""
    normal = (
        ("SepCDC_3x3_0.7", 0), ("skip_connect", 1),
        ("SepCDC_3x3_1.0", 0), ("DilCDC_3x3_0.7", 2),
        ("SepCDC_5x5_0.7", 1), ("skip_connect", 3),
        ("DilCDC_5x5_0.7", 0), ("SepCDC_3x3_0.0", 4),
    )
    reduction = (
        ("SepCDC_3x3_0.5", 0), ("SepCDC_3x3_0.7", 1),
        ("skip_connect", 1), ("DilCDC_3x3_0.5", 2),
        ("SepCDC_3x3_1.0", 2), ("skip_connect", 3),
        ("SepCDC_5x5_0.7", 0), ("DilCDC_3x3_0.7", 4),
    )
    g = Genotype(registry_names=tuple(registry_names), normal=normal,
                 reduction=reduction, meta={})
    g.validate()
    return g


@pytest.fixture
def genotype():
    return hand_genotype()

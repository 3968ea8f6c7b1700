import numpy as np
import pytest
from hypothesis import settings

from protoflow import numerics as nx
from protoflow.numerics import Tape, Tensor

settings.register_profile("protoflow", deadline=None, max_examples=50, database=None)
settings.load_profile("protoflow")

FD_STEP = 1e-6
GRAD_TOL = 1e-6


def autodiff_vs_fd(loss_fn, tensors, h=FD_STEP):
    """Max relative error between tape gradients and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    nx.backward(loss, tape)
    worst = 0.0
    for t in tensors:
        fd = nx.numeric_grad(lambda: loss_fn().item(), t.data, h)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, nx.rel_error(got, fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


# acceptance criteria report: (number, passed, detail), printed once at the end of the session
ACCEPTANCE = []


def report_criterion(num, passed, detail):
    ACCEPTANCE.append((num, bool(passed), detail))
    print(f"criterion {num}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if passed else 'FAIL'} | {detail}")

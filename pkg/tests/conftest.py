import math

import numpy as np
import pytest

from eqplan import model as md
from eqplan import tensor as tn
from eqplan.scene import GeneratorConfig, Scene, generate_synthetic


def central_diff(f, x, h=1e-6):
    """Central finite differences of scalar f at array x (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_op_grad(op, *arrays, weights=None, seed=0):
    """Compare reverse-mode and finite-difference gradients of sum(w * op(x...))."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[tn.const(a) for a in arrays]).shape
    w = rng.uniform(-1, 1, size=out_shape) if weights is None else weights

    def scalar():
        return float((op(*[tn.const(a) for a in arrays]).data * w).sum())

    tape = tn.Tape()
    ts = [tape.param(a, f"x{i}") for i, a in enumerate(arrays)]
    out = op(*ts)
    loss = tn.sum(tn.reshape(out * tn.const(w), (-1,)), axis=0)
    grads = tn.backward(tape, loss)
    errs = []
    for i, a in enumerate(arrays):
        fd = central_diff(scalar, a)
        errs.append(rel_err(grads[f"x{i}"], fd))
    return max(errs)


def random_scene(rng, m=4, t_past=4, t_future=6, spread=20.0):
    past = rng.uniform(-spread, spread, size=(m, t_past, 2))
    future = rng.uniform(-spread, spread, size=(m, t_future, 2))
    route = np.cumsum(rng.uniform(-5, 5, size=(8, 2)), axis=0)
    return Scene(past=past, future=future, route=route)


def random_transform(rng):
    return rng.uniform(-math.pi, math.pi), rng.uniform(-100, 100, size=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return md.ModelConfig(C=8, D=8, Q=3, K=3, N=2)


@pytest.fixture(scope="session")
def small_params(small_cfg):
    return md.init_params(small_cfg, seed=5)


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic(GeneratorConfig(num_scenes=24, noise_std=0.05), seed=11)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)

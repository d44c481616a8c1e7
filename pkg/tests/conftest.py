import itertools

import numpy as np
import pytest

from voxelrec.tensor import Tensor, backward, reduce_sum, mul


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def gradcheck(op, arrays, rng, eps=1e-6):
    """Largest relative error between analytic and numeric gradients.

    The scalar probed is ``sum(op(*tensors) * R)`` for a fixed random R.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weight = rng.normal(size=out.shape)
    backward(reduce_sum(mul(out, Tensor(weight))))
    analytic = [t.grad for t in tensors]

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weight).sum())

    numeric = numeric_grad(scalar, arrays, eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def conv_loop(x, w, b=None, stride=1, padding=0):
    """Direct nested-loop convolution (cross-correlation) for any rank."""
    rank = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * rank)
    k = w.shape[2:]
    out_sp = [(xp.shape[2 + d] - k[d]) // stride + 1 for d in range(rank)]
    out = np.zeros((x.shape[0], w.shape[0], *out_sp))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in itertools.product(*[range(s) for s in out_sp]):
                sl = tuple(slice(p * stride, p * stride + k[d]) for d, p in enumerate(pos))
                out[(n, o, *pos)] = (xp[(n, slice(None), *sl)] * w[o]).sum() + (0 if b is None else b[o])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if failed or (rep.when == "call" and rep.passed):
        prev = _CRITERIA.get(number, (title, "PASS"))[1]
        _CRITERIA[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {title}: {status}")

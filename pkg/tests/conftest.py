import contextlib
import logging

import numpy as np
import pytest

from slimdet.executor import Tensor

logging.getLogger("slimdet").setLevel(logging.ERROR)

# Acceptance-criterion bookkeeping: each criterion test wraps its body in
# criterion(n, desc) and the terminal summary prints one line per criterion.
_CRITERIA: dict[int, tuple[str, str]] = {}


@contextlib.contextmanager
def criterion(num: int, desc: str):
    try:
        yield
    except Exception:
        _CRITERIA[num] = (desc, "FAIL")
        raise
    else:
        _CRITERIA[num] = (desc, "PASS")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        desc, status = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {desc}")


def rand_tensor(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor((scale * rng.standard_normal(shape.as_tuple())).astype(np.float32))


def max_output_diff(outs_a, outs_b):
    return max(float(np.abs(outs_a[k].data.astype(np.float64)
                            - outs_b[k].data.astype(np.float64)).max(initial=0.0))
               for k in outs_a)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

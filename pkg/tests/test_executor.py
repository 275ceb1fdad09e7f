import threading
import time

import pytest

from executor import CaseExecutor, map_cases


def test_results_keep_input_order():
    def slow_square(x):
        time.sleep(0.01 * (5 - x))
        return x * x

    assert map_cases(slow_square, list(range(5)), workers=4) == [0, 1, 4, 9, 16]


def test_concurrency_is_bounded():
    lock = threading.Lock()
    active, peak = [0], [0]

    def work(_):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1

    CaseExecutor(max_concurrency=2).map_cases(work, list(range(8)))
    assert 1 <= peak[0] <= 2


def test_single_worker_runs_inline():
    caller = threading.get_ident()
    assert map_cases(lambda _: threading.get_ident(), [1, 2], workers=1) == [caller, caller]


def test_errors_propagate():
    def boom(x):
        if x == 2:
            raise RuntimeError("case 2 failed")
        return x

    with pytest.raises(RuntimeError, match="case 2"):
        map_cases(boom, [1, 2, 3], workers=2)


def test_executor_rejects_zero_slots():
    with pytest.raises(ValueError):
        CaseExecutor(max_concurrency=0)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def flood_fill_components(labels: np.ndarray, value: int, conn: int = 6) -> int:
    """Count connected components of ``labels == value`` with a plain BFS."""
    from collections import deque

    sel = labels == value
    seen = np.zeros_like(sel)
    if conn == 6:
        offs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        offs = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    shape = sel.shape
    n = 0
    for start in zip(*np.nonzero(sel)):
        if seen[start]:
            continue
        n += 1
        seen[start] = True
        q = deque([start])
        while q:
            x, y, z = q.popleft()
            for dx, dy, dz in offs:
                p = (x + dx, y + dy, z + dz)
                if 0 <= p[0] < shape[0] and 0 <= p[1] < shape[1] and 0 <= p[2] < shape[2]:
                    if sel[p] and not seen[p]:
                        seen[p] = True
                        q.append(p)
    return n


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)

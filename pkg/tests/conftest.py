import numpy as np
import pytest

HEADER = "t,ax,ay,az,gx,gy,gz,label"


def write_csv(path, t, channels, labels, header=HEADER):
    lines = [header]
    for ti, row, lab in zip(t, channels, labels):
        lines.append(",".join([repr(float(ti)), *(repr(float(v)) for v in row), lab]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

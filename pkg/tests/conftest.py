import numpy as np
import pytest

from cmbpipe.catalog import SubjectRecord, Volume


def make_subject(sid="101", shape=(4, 16, 16), seed=0, annotation=True, spacing=(3.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    vols = [Volume(rng.normal(100, 10, shape).astype(np.float32), spacing) for _ in range(3)]
    ann = None
    if annotation:
        a = np.zeros(shape, np.uint8)
        a[shape[0] // 2, 3:5, 3:5] = 1
        ann = Volume(a, spacing)
    return SubjectRecord(sid, *vols, annotation=ann)


@pytest.fixture
def subject_factory():
    return make_subject


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(number, name, passed, detail=""):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        lines.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

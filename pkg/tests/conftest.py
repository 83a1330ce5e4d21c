import numpy as np
import pytest

from quadtrack.kinematics import default_morphology


@pytest.fixture(scope="session")
def morph():
    return default_morphology()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` registers a criterion as failed; ``.done(ok, detail)`` records the outcome."""

    class Rec:
        def __call__(self, num, title):
            self.num, self.title = num, title
            ACCEPTANCE[num] = (title, False, f"did not complete ({request.node.name})")
            return self

        def done(self, ok, detail=""):
            ACCEPTANCE[self.num] = (self.title, bool(ok), detail)
            print(f"ACCEPTANCE {self.num} {'PASS' if ok else 'FAIL'}: {self.title} {detail}")
            return ok

    return Rec()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")

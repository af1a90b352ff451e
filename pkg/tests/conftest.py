import pytest

# acceptance outcomes, printed as one line per criterion after the run
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def record():
    """``record(n, title)`` returns a context manager that logs pass/fail."""

    class _Rec:
        def __init__(self, n, title):
            self.n, self.title, self.detail = n, title, ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            ok = exc_type is None
            detail = self.detail if ok else f"{exc_type.__name__}: {exc}".splitlines()[0][:200]
            CRITERIA[self.n] = (self.title, ok, detail)
            return False

    return _Rec

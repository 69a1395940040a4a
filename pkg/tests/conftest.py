import pytest

_VERDICTS = pytest.StashKey[dict]()


class Criterion:
    """Collects named checks for one acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.checks = []
        self.done = False

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def passed(self):
        return self.done and bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def failures(self):
        return [f"{n}: {d}" for n, ok, d in self.checks if not ok]

    def summary(self):
        if not self.done:
            return "did not complete"
        return "; ".join(f"{n} {d}".strip() for n, _, d in self.checks)


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def criterion(request):
    """Factory: ``c = criterion(n, title)``; call ``c.check`` then ``c.verdict()``."""
    verdicts = request.config.stash[_VERDICTS]

    def make(number, title):
        c = Criterion(number, title)
        # registered up front so a crash still reports FAIL
        verdicts[number] = c

        def verdict():
            c.done = True
            assert c.passed, "; ".join(c.failures())
        c.verdict = verdict
        return c
    return make


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        c = verdicts[number]
        tag = "PASS" if c.passed else "FAIL"
        terminalreporter.write_line(f"{tag} criterion {number} ({c.title}): {c.summary()}")

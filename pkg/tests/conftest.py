import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)

from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Run one acceptance check and record a PASS/FAIL line; the test fails with it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, name: str, check):
        try:
            ok, detail = check()
        except Exception as e:  # noqa: BLE001 - a crash is a FAIL with the reason
            ok, detail = False, f"{type(e).__name__}: {e}"
        line = f"{'PASS' if ok else 'FAIL'} {number:2d} {name}: {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

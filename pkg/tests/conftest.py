import pytest

from diffmi.benchmark import build_benchmark

ACCEPTANCE_LINES: list[str] = []
_BENCHMARKS = {}


def standard_benchmark(seed: int):
    """Standard benchmark per seed, built once per test session."""
    if seed not in _BENCHMARKS:
        _BENCHMARKS[seed] = build_benchmark(seed=seed)
    return _BENCHMARKS[seed]


@pytest.fixture
def acceptance():
    def report(criterion: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

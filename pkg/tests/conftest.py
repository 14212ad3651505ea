import time

import pytest

from pdmkin import TerrainModel, flipper_preset, reduce_model

_GATE: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Collect one check; parametrized checks of a criterion share its line."""
    _GATE.setdefault(number, []).append((passed, detail))
    print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance gate")
    for number in sorted(_GATE):
        checks = _GATE[number]
        passed = all(ok for ok, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def flipper():
    return flipper_preset()


@pytest.fixture(scope="session")
def flat_reduction(flipper):
    start = time.perf_counter()
    samples, model, kin = reduce_model(flipper, TerrainModel.flat_smooth())
    return samples, model, kin, time.perf_counter() - start


@pytest.fixture(scope="session")
def grouser_reduction(flipper):
    start = time.perf_counter()
    samples, model, kin = reduce_model(flipper, TerrainModel.flat_grousers())
    return samples, model, kin, time.perf_counter() - start

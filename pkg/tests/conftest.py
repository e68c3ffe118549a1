import os
from pathlib import Path

import pytest

# Fall back to a checkout-adjacent data directory when MORPHKIT_MNIST_DIR is unset.
_REPO = Path(__file__).resolve().parent.parent
for _cand in (_REPO / "data" / "mnist", _REPO.parent / "data" / "mnist"):
    if "MORPHKIT_MNIST_DIR" not in os.environ and _cand.is_dir():
        os.environ["MORPHKIT_MNIST_DIR"] = str(_cand)

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

import numpy as np
import pytest

from festaseg.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def t64(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# -- acceptance verdicts ----------------------------------------------------------------

_ACCEPTANCE: dict[int, list[tuple[bool, str, str | None]]] = {}


def record_acceptance(number: int, ok: bool, detail: str, part: str | None = None) -> None:
    _ACCEPTANCE.setdefault(number, []).append((ok, detail, part))


def acceptance_lines() -> list[str]:
    lines = []
    for number in sorted(_ACCEPTANCE):
        parts = _ACCEPTANCE[number]
        ok = all(p[0] for p in parts)
        text = "; ".join((f"[{part} {'pass' if pok else 'FAIL'}] " if part else "") + detail
                         for pok, detail, part in parts)
        lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {text}")
    return lines


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

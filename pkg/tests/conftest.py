import re

import numpy as np
import pytest

from tetraloc.geometry import build_rta


def crc16_bitwise(data: bytes) -> int:
    "Reference CRC-16/CCITT-FALSE, one bit at a time."
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
    return crc


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def angle_between(a, b) -> np.ndarray:
    "Angle in radians between (batches of) vectors, accurate near zero."
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


@pytest.fixture
def rta():
    return build_rta()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance report: one PASS/FAIL line per criterion in the terminal summary.

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_acceptance: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or "test_acceptance.py" not in report.nodeid:
        return
    entry = _acceptance.setdefault(int(m.group(1)), {"failed": False, "ran": False, "details": []})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] = True
    if report.outcome == "failed":
        entry["failed"] = True
    if report.when == "call":
        entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        entry = _acceptance.get(n)
        status = "NOT RUN" if not entry or not entry["ran"] else ("FAIL" if entry["failed"] else "PASS")
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
        for d in entry["details"] if entry else []:
            terminalreporter.write_line(f"    {d}")

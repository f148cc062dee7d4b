"""Shared fixtures: toy models and a deterministic calibration corpus."""

from __future__ import annotations

import pytest

from layercollapse import CalibrationSet, ModelConfig, init_random, tokenize_bytes

SUBJECTS = (
    "the engineer", "a quiet library", "the northern river", "an old compiler",
    "the night train", "a copper kettle", "the harbor master", "a painted door",
)
VERBS = (
    "measured", "restarted", "followed", "sketched",
    "balanced", "repaired", "counted", "observed",
)
OBJECTS = (
    "the signal drift", "every loose bolt", "the morning schedule", "a faded map",
    "the tide tables", "its own reflection", "the last argument", "a row of lanterns",
)
TAILS = (
    "before dawn", "without complaint", "for the third time", "under a paper lamp",
)


def corpus_lines(n: int) -> list[str]:
    """First ``n`` sentences of a fixed combinatorial corpus (up to 2048)."""
    lines = []
    for s in SUBJECTS:
        for v in VERBS:
            for o in OBJECTS:
                for t in TAILS:
                    lines.append(f"{s} {v} {o} {t}.")
                    if len(lines) == n:
                        return lines
    raise ValueError(f"corpus holds at most {len(lines)} lines, asked for {n}")


def make_calibration(n: int = 64, max_len: int = 32) -> CalibrationSet:
    return CalibrationSet(
        sequences=tuple(tokenize_bytes(line, max_len) for line in corpus_lines(n))
    )


# one verdict line per acceptance criterion, echoed after the test summary so
# they stay visible under output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_model():
    """The standard acceptance-scale model: 8 layers, width 64."""
    config = ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, max_seq_len=64)
    return init_random(config, seed=1)


@pytest.fixture(scope="session")
def small_model():
    """A cheaper 4-layer model for unit-level checks."""
    config = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=24, max_seq_len=32)
    return init_random(config, seed=7)


@pytest.fixture(scope="session")
def calibration():
    return make_calibration()


@pytest.fixture(scope="session")
def calibration_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("calib") / "calibration.txt"
    path.write_text("\n".join(corpus_lines(256)) + "\n", encoding="utf-8")
    return path

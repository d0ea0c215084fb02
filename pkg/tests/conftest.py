from pathlib import Path

import pytest
from hypothesis import settings

from tracelab.config import parse_config

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

SMALL = """\
seed: 0
out: {out}
dsm: {{steps: 300}}
init: {{n_particles: 8}}
distill: {{total_iterations: 40, stage_boundary: 20, eval_every: 10, n_prior_samples: 300}}
sweep: {{methods: [sds, trace], cfg_weights: [7.5, 20.0], seeds: [0, 1]}}
"""


@pytest.fixture
def small_yaml(tmp_path) -> Path:
    path = tmp_path / "small.yaml"
    path.write_text(SMALL.format(out=tmp_path / "out"))
    return path


@pytest.fixture
def small_cfg(small_yaml):
    return parse_config(small_yaml.read_text())


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""

    def log(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)

import pytest

from containerkt.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_users=12, n_questions=40, n_lectures=6, n_tags=10, events_per_user=(20, 60), lecture_prob=0.1, seed=3))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import pytest

from pvda.config import ToyConfig
from pvda.dataset import generate_toy_dataset


@pytest.fixture(scope="session")
def toy_small():
    """A small synthetic benchmark: 6 train locations, 3 unseen eval locations, 2 distractors."""
    return generate_toy_dataset(ToyConfig(num_locations=6, uav_per_location=3, num_eval_locations=3,
                                          num_distractors=2, seed=5))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

import pytest

from mtlvad.core import RunConfig
from mtlvad.synthdata import make_benchmark

TINY = RunConfig(input_size=32, unet_depth=2, base_width=8, epochs=3, batch_size=8, loss="cross_entropy")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two short normal training videos and six short test videos (two per split tag) at 32 px."""
    root = tmp_path_factory.mktemp("tiny_ds")
    make_benchmark(11, TINY, root, n_train=2, n_test=6, train_duration=20, test_duration=30)
    return root


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

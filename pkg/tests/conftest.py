import numpy as np
import pytest
import torch

from direid.config import NetworkConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return NetworkConfig.tiny()


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    from direid.data import build_synthetic_dataset

    root = tmp_path_factory.mktemp("synth_small")
    build_synthetic_dataset(12, 4, 2, 7, root)
    return root


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for r in reports
             if getattr(r, "when", None) == "call"
             for key, value in getattr(r, "user_properties", []) if key == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

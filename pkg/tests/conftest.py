import numpy as np
import pytest

from aspc_mds.signal_model import RadarConfig


@pytest.fixture
def config():
    return RadarConfig()


@pytest.fixture
def small_config():
    # short cubes keep the unit tests fast
    return RadarConfig(chirps_per_image=32, stft_window_len=8, stft_overlap=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dft(x, nfft):
    """Brute-force zero-padded DFT, O(N * nfft), as an independent oracle."""
    x = np.asarray(x, dtype=complex)
    n = np.arange(x.shape[0])
    k = np.arange(nfft)
    return np.exp(-2j * np.pi * np.outer(k, n) / nfft) @ x


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

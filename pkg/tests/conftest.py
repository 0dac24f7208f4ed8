import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from latent_intervals import kernels
from latent_intervals.calibration import calibrate
from latent_intervals.encoder import EncoderOutput, TrainConfig, full_mask, predict, train
from latent_intervals.synth_gen import CorruptionPolicy, Generator, make_dataset

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance lines collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def gen():
    return Generator()


def random_output(rng, n, d, crossing=0.2):
    """Random encoder output; a fraction of quantiles cross the point."""
    f = rng.standard_normal((n, d))
    lo = f - np.abs(rng.standard_normal((n, d)))
    hi = f + np.abs(rng.standard_normal((n, d)))
    flip = rng.random((n, d)) < crossing
    lo = np.where(flip, f + 0.3 * np.abs(rng.standard_normal((n, d))), lo)
    return EncoderOutput(f, lo, hi)


class Trained:
    """Encoder trained once per session plus its data and calibration."""

    def __init__(self, kind, n=10000, epochs=40, seed=0):
        self.generator = Generator()
        self.policy = CorruptionPolicy(kind)
        self.split = make_dataset(n, self.generator, self.policy, seed)
        self.mask = full_mask(self.generator.dim)
        self.cfg = TrainConfig(epochs=epochs, seed=seed)
        self.result = train(self.split.train, self.mask, self.cfg, self.generator)
        self.params = self.result.params
        cal = self.split.calibration
        self.calibration = calibrate(predict(self.params, cal.x), cal.z, self.mask)

    @property
    def lambda_hat(self):
        return self.calibration.lambda_hat


@pytest.fixture(scope="session")
def trained_downsample():
    return Trained("downsample")


@pytest.fixture(scope="session")
def trained_mask():
    return Trained("mask")

import pytest

from spinecade.phantom import PhantomSpec, generate


@pytest.fixture(scope="session")
def small_phantom():
    """One vertebra, one fracture, no noise: (image, mask, annotations)."""
    spec = PhantomSpec(dims=(128, 128, 24), n_vertebrae=1, fracture_count=1, noise_sigma_hu=0.0, seed=3)
    return generate(spec)


@pytest.fixture(scope="session")
def noisy_phantom():
    spec = PhantomSpec(dims=(128, 128, 48), n_vertebrae=2, fracture_count=2, noise_sigma_hu=20.0, seed=11)
    return generate(spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

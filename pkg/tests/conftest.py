import pytest

from hetadmit.domain import DeviceKind, DeviceProfile, LatencyModel

# reference accelerator/CPU pairs used throughout the suite
REFERENCE_DEVICES = {
    "v100": (DeviceKind.ACCELERATOR, 0.018, 0.27),
    "xeon": (DeviceKind.CPU, 0.084, 0.32),
    "atlas": (DeviceKind.ACCELERATOR, 0.009, 0.24),
    "kunpeng": (DeviceKind.CPU, 0.073, 0.85),
}


def profile(name, noise=0.0, workers=1):
    kind, alpha, beta = REFERENCE_DEVICES[name]
    return DeviceProfile(name, kind, LatencyModel(alpha, beta), workers, noise)


@pytest.fixture
def v100():
    return profile("v100")


@pytest.fixture
def xeon():
    return profile("xeon")


@pytest.fixture
def atlas():
    return profile("atlas")


@pytest.fixture
def kunpeng():
    return profile("kunpeng")

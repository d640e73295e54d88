from types import SimpleNamespace

import numpy as np
import pytest

from ridecloak import crypto
from ridecloak.direct import SummaryConfig
from ridecloak.service import RideService, ServiceConfig

SMALL_CONFIG = dict(
    filter_bits=320, n_hashes=4, id_bits=6, time_bits=4,
    time_slots=48, max_items=60,
)

# one roll-up line per acceptance check, echoed after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance results")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_crypto_env(dim: int, seed: int) -> SimpleNamespace:
    rng = np.random.default_rng(seed)
    master = crypto.generate_master_key(dim, rng)
    secrets = crypto.generate_tos_secrets(dim, rng)
    deriver = crypto.KeyDeriver(master, secrets)
    return SimpleNamespace(
        dim=dim,
        rng=rng,
        master=master,
        secrets=secrets,
        deriver=deriver,
        driver=deriver.derive("driver", rng),
        rider=deriver.derive("rider", rng),
    )


@pytest.fixture(scope="session")
def knn64():
    """Width-64 key material for scheme-level tests."""
    return make_crypto_env(64, 101)


@pytest.fixture(scope="session")
def direct_env():
    """Keys plus summary parameters sized for fast direct-scheme tests."""
    env = make_crypto_env(SMALL_CONFIG["filter_bits"], 202)
    env.cfg = SummaryConfig(
        bits=SMALL_CONFIG["filter_bits"],
        n_hashes=SMALL_CONFIG["n_hashes"],
        time_slots=SMALL_CONFIG["time_slots"],
        max_items=SMALL_CONFIG["max_items"],
        epoch=1,
        salt=777,
    )
    return env


@pytest.fixture(scope="session")
def transfer_env():
    """Keys for the 2k+l cell encoding at k=6, l=4."""
    env = make_crypto_env(2 * SMALL_CONFIG["id_bits"] + SMALL_CONFIG["time_bits"], 303)
    env.id_bits = SMALL_CONFIG["id_bits"]
    env.time_bits = SMALL_CONFIG["time_bits"]
    # transfer offers need driver-oriented plus keys and rider-oriented minus keys
    env.plus = env.driver
    env.minus = env.rider
    return env


@pytest.fixture()
def small_service():
    """A fresh in-process service with fast small-width keys."""
    return RideService(ServiceConfig(**SMALL_CONFIG), seed=11)

import math

import numpy as np
import pytest

from d2dbotnet.dynamics import ThreatParams
from d2dbotnet.network import NetworkParams, poisson_degree_distribution

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def net():
    return NetworkParams(lam=300.0, r=0.1, rho=0.95, p=0.7)


@pytest.fixture(scope="session")
def threat():
    return ThreatParams(gamma_b=0.001, gamma_c=0.001, beta=0.002)


@pytest.fixture(scope="session")
def dist(net):
    return poisson_degree_distribution(net)


def manhattan_kiosks(n_avenues=6, n_streets=40, spacing_km=0.08, jitter_km=0.01, seed=0):
    """Street-grid kiosk layout as lon/lat rows (a stand-in for city kiosk data)."""
    rng = np.random.default_rng(seed)
    lat0, lon0 = 40.75, -73.99
    km_lat = 1.0 / 110.574
    km_lon = 1.0 / (111.320 * math.cos(math.radians(lat0)))
    rows = []
    for a in range(n_avenues):
        for s in range(n_streets):
            x = a * 0.27 + rng.normal(0, jitter_km)
            y = s * spacing_km + rng.normal(0, jitter_km)
            rows.append((lon0 + x * km_lon, lat0 + y * km_lat))
    # a few cross streets tie the avenues together
    for s in range(0, n_streets, 10):
        for x in np.arange(0.09, 0.27 * (n_avenues - 1), 0.09):
            if abs(x / 0.27 - round(x / 0.27)) > 1e-9:
                rows.append((lon0 + x * km_lon, lat0 + s * spacing_km * km_lat))
    return rows


@pytest.fixture
def kiosk_csv(tmp_path):
    path = tmp_path / "kiosks.csv"
    with open(path, "w") as fh:
        fh.write("lon,lat\n")
        for lon, lat in manhattan_kiosks():
            fh.write(f"{float(lon)!r},{float(lat)!r}\n")
    return path


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from fracinv.field import Medium, mollified_source
from fracinv.lattice import assemble_operator, build_grid


def bump(x, center=0.0, radius=1.0):
    """Canonical C-infinity bump ``exp(1 - 1/(1 - t^2))`` on ``(center - radius, center + radius)``."""
    t = (np.asarray(x, dtype=float) - center) / radius
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


class Small:
    """N=32 grid with both sources and the ex1 truth."""

    def __init__(self, n=32, s=0.4):
        self.grid, self.regions = build_grid(-3.0, 3.0, (-1.0, 1.0), n_omega=n)
        self.op = assemble_operator(self.grid, s)
        self.sources = (
            mollified_source("one", self.grid, self.regions),
            mollified_source("gauss", self.grid, self.regions),
        )
        self.x = self.grid.x[self.regions.interior]
        self.truth = Medium(np.sin(self.x), np.cos(self.x))
        self.n = self.regions.n_interior


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

from pathlib import Path

import numpy as np
import pytest

from extrapaudit.panel import ContestPanel, MonthlySeries, SynthConfig, month_stamps, synth_contests

HERE = Path(__file__).resolve().parent
GOLDEN = HERE / "golden"
FIXTURES = HERE / "fixtures"


def grid_panel(L: int = 12) -> ContestPanel:
    """Returns r[k][j] = (k - 4.5)/100 + j/1000, oldest week first."""
    k = np.arange(10)[:, None]
    j = np.arange(L)[None, :]
    returns = (k - 4.5) / 100 + j / 1000
    return ContestPanel(
        contest_id="C00001",
        stocks=tuple(f"S00001_{i + 1:02d}" for i in range(10)),
        returns=returns,
        realized_next=np.linspace(-0.02, 0.025, 10),
    )


@pytest.fixture
def panel12() -> ContestPanel:
    return grid_panel(12)


@pytest.fixture(scope="session")
def synth_panels():
    return synth_contests(SynthConfig(n_contests=40, seed=3))


@pytest.fixture
def market12() -> MonthlySeries:
    return MonthlySeries("market", month_stamps("2001-01", 12), np.array([0.01 * (m - 6) for m in range(12)]))

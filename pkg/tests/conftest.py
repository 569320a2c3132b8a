import numpy as np
import pytest

from nicalib.datasets import IMPACT_CELLS, impact_table1, table1_pool


def arm_data(arm: int):
    """Outcomes and BPD flags of one IMPACT arm, BPD rows first."""
    n1, e1 = IMPACT_CELLS[(arm, 1)]
    n0, e0 = IMPACT_CELLS[(arm, 0)]
    y = np.r_[np.ones(e1), np.zeros(n1 - e1), np.ones(e0), np.zeros(n0 - e0)]
    bpd = np.r_[np.ones(n1), np.zeros(n0)]
    return y, bpd


def bpd_weights(bpd, target=0.22):
    share = bpd.mean()
    return np.where(bpd == 1, target / share, (1 - target) / (1 - share))


@pytest.fixture(scope="session")
def impact():
    return impact_table1()


@pytest.fixture(scope="session")
def pool():
    return table1_pool()

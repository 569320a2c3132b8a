"""Subject-level reconstructions of the IMPACT and MOTA arm-by-BPD count tables.

Outcome is RSV hospitalisation (1 = event), covariate ``bpd`` is 1 for
bronchopulmonary dysplasia. IMPACT arms: 0 = placebo, 1 = palivizumab.
MOTA arms: 0 = palivizumab (active control), 1 = motavizumab.
"""

from __future__ import annotations

import numpy as np

from .data import PooledDataset, concat

# (arm, bpd) -> (subjects, events)
IMPACT_CELLS = {
    (0, 1): (266, 34),
    (0, 0): (234, 19),
    (1, 1): (496, 39),
    (1, 0): (506, 9),
}
MOTA_CELLS = {
    (0, 1): (723, 28),
    (0, 0): (2607, 34),
    (1, 1): (722, 22),
    (1, 0): (2583, 24),
}
MOTA_BPD_SHARE = 0.22


def _expand(cells: dict, trial: str, prefix: str) -> PooledDataset:
    arm, bpd, y = [], [], []
    for (a, x), (n, events) in cells.items():
        arm += [a] * n
        bpd += [x] * n
        y += [1] * events + [0] * (n - events)
    n = len(arm)
    ids = np.array([f"{prefix}{i + 1:05d}" for i in range(n)], dtype=object)
    return PooledDataset.from_arrays([trial] * n, arm, y, {"bpd": bpd}, subject_id=ids)


def impact_table1() -> PooledDataset:
    """1502 historical subjects."""
    return _expand(IMPACT_CELLS, "H", "IMP")


def mota_table1() -> PooledDataset:
    """6635 current-trial subjects."""
    return _expand(MOTA_CELLS, "C", "MOT")


def table1_pool() -> PooledDataset:
    return concat([impact_table1(), mota_table1()])

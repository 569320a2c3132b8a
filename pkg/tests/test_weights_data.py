import numpy as np
import pytest

from nicalib.data import PooledDataset, concat
from nicalib.datasets import IMPACT_CELLS, MOTA_CELLS, impact_table1, mota_table1, table1_pool
from nicalib.errors import InvalidBoundsError, NegativeWeightError, ValidationError
from nicalib.weights import WeightSet, as_weights


class TestWeightSet:
    def test_values_read_only_and_copied(self):
        raw = np.array([1.0, 2.0])
        ws = WeightSet(raw)
        raw[0] = 9
        assert ws.values[0] == 1.0
        with pytest.raises(ValueError):
            ws.values[0] = 3

    def test_rejects_bad_values(self):
        with pytest.raises(NegativeWeightError):
            WeightSet([1.0, -0.1])
        with pytest.raises(ValidationError):
            WeightSet([np.inf])
        with pytest.raises(ValidationError):
            WeightSet([1.0], provenance="raw")

    def test_trimmed_needs_bounds(self):
        with pytest.raises(InvalidBoundsError):
            WeightSet([1.0], "trimmed")
        with pytest.raises(InvalidBoundsError):
            WeightSet([4.0], "trimmed", (0.5, 2.0))

    def test_effective_sample_size(self):
        assert WeightSet.ones(10).effective_sample_size == pytest.approx(10)
        assert WeightSet([1.0, 0.0, 0.0]).effective_sample_size == pytest.approx(1)
        s = WeightSet([0.5, 2.0]).summary()
        assert s["n"] == 2 and s["sum"] == 2.5 and s["n_zero"] == 0

    def test_as_weights(self):
        np.testing.assert_array_equal(as_weights(None, 3), np.ones(3))
        with pytest.raises(ValidationError):
            as_weights([1.0, 2.0], 3)


class TestDatasets:
    def test_table1_counts(self):
        for cells, data in ((IMPACT_CELLS, impact_table1()), (MOTA_CELLS, mota_table1())):
            bpd = data.covariate("bpd")
            for (a, x), (n, e) in cells.items():
                m = (data.arm == a) & (bpd == x)
                assert int(m.sum()) == n and int(data.outcome[m].sum()) == e
        pool = table1_pool()
        assert pool.n_historical == 1502 and pool.n_current == 6635

    def test_current_bpd_share(self):
        bpd = mota_table1().covariate("bpd")
        assert round(bpd.mean(), 2) == 0.22


class TestPooledDataset:
    def test_caller_arrays_untouched(self):
        y = np.array([0.0, 1.0])
        d = PooledDataset.from_arrays(["H", "C"], [0, 1], y)
        assert y.flags.writeable
        y[0] = 1.0
        assert d.outcome[0] == 0.0

    def test_bad_codes(self):
        with pytest.raises(ValidationError):
            PooledDataset.from_arrays(["H", "X"], [0, 1], [0, 1])
        with pytest.raises(ValidationError):
            PooledDataset.from_arrays(["H", "HC"], [0, 1], [0, 1])
        with pytest.raises(ValidationError):
            PooledDataset.from_arrays(["H", "C"], [0, 2], [0, 1])

    def test_require_pooled(self):
        d = PooledDataset.from_arrays(["H", "H"], [0, 1], [0, 1])
        with pytest.raises(ValidationError):
            d.require_pooled()

    def test_concat_and_take(self):
        pool = concat([impact_table1(), mota_table1()])
        assert len(pool) == 1502 + 6635
        assert pool.take(pool.is_historical).n_current == 0
        rec = next(pool.records())
        assert rec.trial == "H" and len(rec.covariates) == 1

import numpy as np
import pytest

from free_boundary_lab.services.random_streams import (
    MCSummary,
    batch_sizes,
    concat,
    run_batches,
    stage_key,
    substream,
)


def _normals(rng, n, _index):
    return rng.standard_normal(n)


def test_substreams_depend_on_seed_stage_and_index():
    a = substream(1, "lambda", 0).standard_normal(4)
    assert np.array_equal(a, substream(1, "lambda", 0).standard_normal(4))
    assert not np.array_equal(a, substream(1, "lambda", 1).standard_normal(4))
    assert not np.array_equal(a, substream(1, "vh", 0).standard_normal(4))
    assert not np.array_equal(a, substream(2, "lambda", 0).standard_normal(4))
    assert stage_key("lambda") == stage_key("lambda")


def test_batch_sizes():
    assert batch_sizes(1050, 500) == [500, 500, 50]
    assert batch_sizes(1000, 500) == [500, 500]
    assert batch_sizes(0, 500) == []


def test_worker_count_does_not_change_the_samples():
    single = concat(run_batches(_normals, 5000, 11, "det", workers=1, batch_size=300))
    multi = concat(run_batches(_normals, 5000, 11, "det", workers=4, batch_size=300))
    assert np.array_equal(single, multi)
    assert MCSummary.from_samples(single) == MCSummary.from_samples(multi)


def test_summary_statistics():
    summary = MCSummary.from_samples([1.0, 2.0, 3.0, 4.0])
    assert summary.mean == pytest.approx(2.5)
    assert summary.se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
    assert summary.n == 4
    assert MCSummary.from_samples([5.0]).se == 0.0
    assert np.isnan(MCSummary.from_samples([]).mean)

import csv

import numpy as np
import pytest

from SCV2 import utils
from SCV2.contribution import (
    ContributionStats,
    accumulate_contributions,
    average_contribution,
    export_csv,
    single_view_contribution,
    trim,
)
from SCV2.surfels import SceneModel


def test_offscreen_surfel_contributes_nothing(camera, make_surfel):
    model = SceneModel.from_surfels([make_surfel((0, 0, 2)), make_surfel((50, 0, 2))])
    values = single_view_contribution(model, camera)
    assert values[0] > 0
    assert values[1] == 0


def test_hidden_surfel_contributes_less(camera, make_surfel):
    model = SceneModel.from_surfels([make_surfel((0, 0, 2), opacity=0.95), make_surfel((0, 0, 3), opacity=0.95)])
    values = single_view_contribution(model, camera)
    assert values[0] > values[1]


def test_accumulate_is_order_stable(camera, blob_model):
    stats = accumulate_contributions(blob_model, [camera, camera])
    assert stats.n_views == 2
    single = single_view_contribution(blob_model, camera)
    np.testing.assert_allclose(average_contribution(stats), single)


def test_average_needs_a_view():
    with pytest.raises(utils.ContractError):
        average_contribution(ContributionStats.zeros(3))


def test_trim_removes_the_lowest_quantile(blob_model):
    contributions = np.arange(1, 13, dtype=np.float64) / 10.0
    result = trim(blob_model, contributions, 0.25)
    assert result.threshold == pytest.approx(0.3)
    assert len(result.model) == 9
    assert result.keep.tolist() == [False] * 3 + [True] * 9


def test_trim_at_zero_ratio_only_removes_zeros(blob_model):
    contributions = np.ones(len(blob_model))
    contributions[[2, 7]] = 0.0
    result = trim(blob_model, contributions, 0.0)
    assert len(result.model) == len(blob_model) - 2


def test_trim_refuses_to_empty_the_model(blob_model):
    with pytest.raises(utils.ContractError):
        trim(blob_model, np.zeros(len(blob_model)), 0.5)
    with pytest.raises(utils.ContractError):
        trim(blob_model, np.ones(3), 0.1)


def test_export_csv(tmp_path):
    stats = ContributionStats.zeros(3).add(np.array([0.5, 0.0, 1.0]))
    export_csv(tmp_path / "c.csv", average_contribution(stats), stats)
    with open(tmp_path / "c.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["index", "contribution", "sum", "n_views"]
    assert [float(r[1]) for r in rows[1:]] == [0.5, 0.0, 1.0]

import json

import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.config import RunConfig
from SCV2.pipeline import (
    BlockPartition,
    assign_views,
    block_seed,
    contract,
    foreground_box,
    merge,
    partition,
    tune_block,
    tune_blocks,
)
from SCV2.surfels import Camera


@pytest.fixture
def run_config():
    return RunConfig().with_values(
        {"train.dtype": "float64", "loss.depth_enabled": "false", "blocks.grid_x": 2, "blocks.grid_y": 1}
    )


@pytest.fixture
def views(blob_model):
    cameras = [
        Camera.look_at((x, -0.2, -1.0), (0.0, 0.0, 2.2), 40, 30, fov_x=70, view_id=i, up=(0, -1, 0))
        for i, x in enumerate((-1.0, -0.3, 0.3, 1.0))
    ]
    return cameras


def test_contract_is_identity_scaled_inside_and_bounded_outside():
    box = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    inside = np.array([[0.5, -0.25, 0.0]])
    np.testing.assert_allclose(contract(inside, *box), inside)
    far = contract(np.array([[10.0, -1000.0, 1.0]]), *box)
    assert 1.0 < far[0, 0] < 2.0 and -2.0 < far[0, 1] < -1.0
    edge = contract(np.array([[1.0 + 1e-9, 0.0, 0.0]]), *box)
    assert edge[0, 0] == pytest.approx(1.0)
    with pytest.raises(utils.ContractError):
        contract(inside, np.zeros(3), np.array([1.0, 0.0, 1.0]))


def test_foreground_box_is_central():
    points = np.array([[0.0, 0.0, 0.0], [3.0, 6.0, 9.0]])
    lo, hi = foreground_box(points, 1.0 / 3.0)
    np.testing.assert_allclose(lo, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(hi, [2.0, 4.0, 6.0])


def test_partition_is_an_exclusive_cover(blob_model):
    box = foreground_box(blob_model.means.numpy())
    result = partition(blob_model, (2, 2), box)
    assert result.n_blocks == 4
    assert sorted(np.concatenate(result.blocks).tolist()) == list(range(len(blob_model)))
    owner = result.owner()
    for m, index in enumerate(result.blocks):
        assert np.all(owner[index] == m)

    single = partition(blob_model, (1, 1), box)
    assert single.blocks[0].tolist() == list(range(len(blob_model)))


def test_partition_follows_the_ground_axes(blob_model):
    box = foreground_box(blob_model.means.numpy())
    result = partition(blob_model, (2, 1), box)
    x = blob_model.means[:, 0].numpy()
    center = (box[0][0] + box[1][0]) / 2
    assert set(result.blocks[0].tolist()) == set(np.nonzero(x < center)[0].tolist())


def test_partition_file_round_trip(tmp_path, blob_model):
    result = partition(blob_model, (2, 2), foreground_box(blob_model.means.numpy()))
    result.save(tmp_path / "partition.json")
    restored = BlockPartition.load(tmp_path / "partition.json")
    assert restored.grid == (2, 2)
    for a, b in zip(result.blocks, restored.blocks):
        assert a.tolist() == b.tolist()

    with pytest.raises(utils.MissingArtifactError) as info:
        BlockPartition.load(tmp_path / "missing.json")
    assert info.value.stage == "partition"
    (tmp_path / "bad.json").write_text(json.dumps({"grid": [1, 1]}))
    with pytest.raises(utils.DataError):
        BlockPartition.load(tmp_path / "bad.json")


def test_every_view_is_assigned(blob_model, views):
    result = partition(blob_model, (2, 1), foreground_box(blob_model.means.numpy()))
    result = assign_views(blob_model, result, views)
    assigned = set(v for block in result.views for v in block)
    assert assigned == {camera.view_id for camera in views}
    assert len(result.degenerate) == 2
    for flag, block_views in zip(result.degenerate, result.views):
        assert flag == (len(block_views) == 0)


def test_merge_requires_every_block(blob_model):
    result = partition(blob_model, (2, 1), foreground_box(blob_model.means.numpy()))
    parts = [blob_model.select(torch.from_numpy(b)) for b in result.blocks]
    assert len(merge(result, parts)) == len(blob_model)
    with pytest.raises(utils.ContractError):
        merge(result, [parts[0], None])


def test_tune_block_returns_only_its_surfels(blob_model, views, run_config):
    images = [np.full((c.height, c.width, 3), 0.5) for c in views]
    result = partition(blob_model, (2, 1), foreground_box(blob_model.means.numpy()))
    result = assign_views(blob_model, result, views)
    block = next(m for m in range(2) if not result.degenerate[m])
    tuned = tune_block(blob_model, result, block, views, images, run_config, iterations=4)
    assert tuned.block == block
    assert len(tuned.model) <= len(result.blocks[block])
    assert tuned.peak_count >= len(tuned.model)

    untouched = tune_block(blob_model, result, block, views, images, run_config, iterations=0)
    assert torch.equal(untouched.model.means, blob_model.means[torch.from_numpy(result.blocks[block])])


def test_parallel_tuning_matches_sequential(blob_model, views, run_config):
    images = [np.full((c.height, c.width, 3), 0.5) for c in views]
    result = assign_views(blob_model, partition(blob_model, (2, 1), foreground_box(blob_model.means.numpy())), views)
    sequential = tune_blocks(blob_model, result, views, images, run_config, iterations=3, maximum=1)
    concurrent = tune_blocks(blob_model, result, views, images, run_config, iterations=3, maximum=4)
    a, b = merge(result, [r.model for r in sequential]), merge(result, [r.model for r in concurrent])
    for name in a.PARAMS:
        assert torch.equal(getattr(a, name), getattr(b, name))


def test_block_seeds_differ():
    assert len({block_seed(7, m) for m in range(4)}) == 4

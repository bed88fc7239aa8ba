import json

import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.dataset import Dataset, read_mesh_ply, read_points_ply, read_transform
from SCV2.scenegen import (
    Box,
    SceneSpec,
    generate,
    make_adversarial_elongated,
    ray_cast,
    render_view,
    ring_cameras,
    sample_ground_truth,
    town_spec,
    under_boxes,
)
from SCV2.surfels import elongation_rates


@pytest.fixture
def one_box():
    return SceneSpec(boxes=(Box(0.0, 0.0, (1.0, 1.0, 1.0), (0.8, 0.2, 0.2)),), width=64, height=64, n_cameras=8)


def test_spec_validation():
    town_spec().validate()
    with pytest.raises(utils.ContractError):
        SceneSpec(n_cameras=4).validate()
    with pytest.raises(utils.ContractError):
        SceneSpec(width=32).validate()
    with pytest.raises(utils.ContractError, match="leaves the ground"):
        SceneSpec(boxes=(Box(2.4, 0.0, (0.5, 0.5, 0.5), (1, 1, 1)),)).validate()


def test_town_is_seeded():
    assert town_spec(seed=3) == town_spec(seed=3)
    assert town_spec(seed=3) != town_spec(seed=4)
    assert len(town_spec(n_boxes=2).boxes) == 2
    assert town_spec(n_cameras=12).n_cameras == 12


def test_ray_hits_the_box_top_before_the_ground(one_box):
    origin = np.array([0.0, 0.0, 5.0])
    dirs = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [0.3, 0.0, -1.0]])
    t, normals, albedo = ray_cast(one_box, origin, dirs)
    assert t[0] == pytest.approx(4.0)
    np.testing.assert_allclose(normals[0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(albedo[0], [0.8, 0.2, 0.2])
    assert t[1] == np.inf
    assert t[2] == pytest.approx(5.0)
    np.testing.assert_allclose(normals[2], [0.0, 0.0, 1.0])


def test_ray_hits_a_box_side(one_box):
    t, normals, _ = ray_cast(one_box, np.array([-3.0, 0.0, 0.5]), np.array([[1.0, 0.0, 0.0]]))
    assert t[0] == pytest.approx(2.5)
    np.testing.assert_allclose(normals[0], [-1.0, 0.0, 0.0])


def test_rendered_views_have_finite_depth_on_the_scene(one_box):
    camera = ring_cameras(one_box)[0]
    color, depth = render_view(one_box, camera)
    assert color.shape == (64, 64, 3) and depth.shape == (64, 64)
    center = depth[32, 32]
    assert np.isfinite(center) and center > 0
    assert np.all((color >= 0) & (color <= 1))


def test_ground_truth_skips_hidden_ground(one_box):
    points, normals, albedo = sample_ground_truth(one_box, 5000, seed=0)
    assert not under_boxes(one_box, points).any()
    on_box = np.all(np.abs(points[:, :2]) <= 0.5 + 1e-9, axis=1) & (points[:, 2] > 0)
    assert on_box.any()
    assert len(normals) == len(albedo) == len(points)


def test_generate_writes_a_loadable_dataset(town_dir):
    for name in ("cameras.json", "points3d.ply", "scene.json", "gt/mesh.ply", "gt/points.ply", "gt/transform.txt"):
        assert (town_dir / name).exists(), name
    assert len(list((town_dir / "images").glob("*.png"))) == 8
    np.testing.assert_array_equal(read_transform(town_dir / "gt" / "transform.txt"), np.eye(4))
    vertices, faces = read_mesh_ply(town_dir / "gt" / "mesh.ply")
    assert len(faces) == 2 + 3 * 10
    gt, _ = read_points_ply(town_dir / "gt" / "points.ply")
    assert 0 < len(gt) <= 3000
    assert json.loads((town_dir / "scene.json").read_text())["seed"] == 7

    dataset = Dataset.load(town_dir)
    assert len(dataset.cameras) == 8
    assert dataset.images[0].shape == (64, 64, 3)
    assert len(dataset.points) <= 600
    assert set(dataset.priors) == {camera.view_id for camera in dataset.cameras}
    prior = dataset.priors[0]
    assert prior.scale == 1.0 and prior.shift == 0.0


def test_generation_is_deterministic(tmp_path):
    spec = town_spec(seed=2, n_boxes=2, n_cameras=8, width=64, height=64, n_gt_points=500, n_init_points=100)
    first = tmp_path / "a"
    second = tmp_path / "b"
    generate(spec, first)
    generate(spec, second)
    for name in ("points3d.ply", "gt/points.ply", "images/0003.png", "depth_priors/0005.pfm"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_perturbed_priors_are_realigned(tmp_path):
    spec = town_spec(
        seed=2, n_boxes=2, n_cameras=8, width=64, height=64, n_gt_points=500, n_init_points=2000, perturb_priors=True
    )
    dataset = Dataset.load(generate(spec, tmp_path))
    prior = dataset.priors[1]
    assert not prior.degenerate
    assert prior.scale != 1.0


def test_adversarial_needles(blob_model):
    needles = make_adversarial_elongated(blob_model, 0.25, seed=1)
    rates = elongation_rates(needles)
    changed = torch.nonzero(~torch.isclose(needles.log_scales, blob_model.log_scales).all(dim=1))[:, 0]
    assert len(changed) == 3
    assert torch.allclose(rates[changed], torch.full((3,), 1e-3, dtype=torch.float64))
    assert torch.allclose(needles.opacities[changed], torch.full((3,), 0.9, dtype=torch.float64))
    assert make_adversarial_elongated(blob_model, 0.0) is blob_model
    with pytest.raises(utils.ContractError):
        make_adversarial_elongated(blob_model, 1.0)

"""End-to-end checks on small generated scenes. Run with --runslow."""

import csv
import json

import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.cli import main
from SCV2.common import SH_COEFFS, rgb_to_sh_dc
from SCV2.density import DensifyConfig, apply_densify, check_budget, select_densify
from SCV2.evaluation import f1_score, sample_surface
from SCV2.meshing import TSDFVolume, extract_mesh
from SCV2.rasterizer import PixelGradients, render, render_backward
from SCV2.scenegen import make_adversarial_elongated
from SCV2.surfels import Camera, SceneModel, Surfel
from SCV2.threadable import set_threads

pytestmark = pytest.mark.slow

PIPELINE = ["--seed", "7", "--iterations", "300", "--tune-iterations", "60", "--set", "mesh.voxel_divisor=64"]


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def _random_scene(seed, count):
    rng = np.random.default_rng(seed)
    surfels = []
    for _ in range(count):
        quat = np.array([1.0, *rng.uniform(-0.4, 0.4, size=3)])
        sh = rng.normal(scale=0.1, size=(SH_COEFFS, 3))
        sh[0] = rgb_to_sh_dc(rng.uniform(0.1, 0.9, size=3))
        surfels.append(
            Surfel(
                center=(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1.8, 3.0)),
                rotation=quat / np.linalg.norm(quat),
                scales=tuple(rng.uniform(0.05, 0.2, size=2)),
                opacity=float(rng.uniform(0.2, 0.9)),
                sh=sh.reshape(-1),
            )
        )
    return SceneModel.from_surfels(surfels, dtype=torch.float64)


def _weighted_loss(model, camera, weights):
    output = render(model, camera)
    return float(
        (output.color * weights.color).sum()
        + (output.expected_depth * weights.depth).sum()
        + (output.normal * weights.normal).sum()
    )


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences_on_random_scenes(seed):
    model = _random_scene(seed, 20)
    camera = Camera(
        fx=32.0, fy=32.0, cx=15.5, cy=15.5, rotation=np.eye(3), translation=np.zeros(3), width=32, height=32
    )
    rng = np.random.default_rng(100 + seed)
    weights = PixelGradients(
        color=torch.as_tensor(rng.uniform(-1, 1, size=(32, 32, 3))),
        depth=torch.as_tensor(rng.uniform(-1, 1, size=(32, 32))),
        normal=torch.as_tensor(rng.uniform(-1, 1, size=(32, 32, 3))),
    )
    output = render(model, camera, differentiable=True)
    grads = render_backward(model, camera, output, weights)

    eps = 1e-6
    for name in ("means", "quats", "log_scales", "opacity_logits", "sh"):
        param = getattr(model, name)
        analytic = getattr(grads, name)
        for row in (0, 7, 19):
            index = (row,) + (1,) * (param.dim() - 1)
            plus, minus = param.clone(), param.clone()
            plus[index] += eps
            minus[index] -= eps
            numeric = (
                _weighted_loss(model.replace(**{name: plus}), camera, weights)
                - _weighted_loss(model.replace(**{name: minus}), camera, weights)
            ) / (2 * eps)
            assert float(analytic[index]) == pytest.approx(numeric, rel=1e-3, abs=1e-6), (name, row)


def _densify_rounds(model, config, rounds):
    """Densifies every surfel that passes the filter, as if each one carried a large gradient"""
    generator = torch.Generator().manual_seed(0)
    counts = [len(model)]
    for _ in range(rounds):
        selection = select_densify(model, torch.ones(len(model), dtype=model.dtype), config)
        model = apply_densify(model, selection.clone, selection.split, config, generator=generator).model
        counts.append(len(model))
        check_budget(len(model), config.max_surfels, "densify")
    return counts


def test_elongation_filter_stops_runaway_densification(blob_model):
    needles = make_adversarial_elongated(blob_model, 0.99, seed=0)
    filtered = _densify_rounds(needles, DensifyConfig(grad_threshold=0.5, max_surfels=5000), 10)
    assert filtered[-1] < 2 * filtered[0]

    with pytest.raises(utils.SurfelBudgetError) as info:
        _densify_rounds(needles, DensifyConfig(grad_threshold=0.5, elongation_min=0.0, max_surfels=5000), 10)
    assert info.value.exit_code == 4


def test_f1_with_the_spatial_index_equals_the_exhaustive_pairing():
    rng = np.random.default_rng(11)
    recon = rng.uniform(-1, 1, size=(2000, 3))
    gt = recon + rng.normal(scale=0.02, size=recon.shape)
    fast = f1_score(recon, gt, tau=0.03)
    exact = f1_score(recon, gt, tau=0.03, oracle=True)
    assert (fast.precision, fast.recall, fast.f1) == (exact.precision, exact.recall, exact.f1)


def _cube_depth(camera, half=0.5):
    """Camera-space depth of an axis-aligned cube centered at the origin, inf where the ray misses"""
    rays = camera.pixel_rays(torch.float64).numpy()
    dirs = rays @ camera.rotation
    origin = camera.center
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - origin) / dirs
        t2 = (half - origin) / dirs
    near = np.nanmax(np.minimum(t1, t2), axis=1)
    far = np.nanmin(np.maximum(t1, t2), axis=1)
    depth = np.where((near <= far) & (near > 0), near, np.inf)
    return depth.reshape(camera.height, camera.width)


def _cube_mesh(half=0.5):
    corners = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    # fmt: off
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
        [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    # fmt: on
    return corners, faces


def test_fused_cube_matches_the_true_surface():
    eyes = [(3, 0, 0), (-3, 0, 0), (0, 3, 0), (0, -3, 0), (0, 0, 3), (0, 0, -3)]
    cameras = [Camera.look_at(eye, (0, 0, 0), 64, 64, fov_x=40, view_id=i) for i, eye in enumerate(eyes)]
    volume = TSDFVolume(np.full(3, -0.8), np.full(3, 0.8), 0.05, 0.2)
    for camera in cameras:
        volume.integrate(_cube_depth(camera), camera)
    mesh = extract_mesh(volume)
    assert len(mesh) > 0

    recon = sample_surface(mesh.vertices, mesh.faces, 5000, seed=0)
    gt = sample_surface(*_cube_mesh(), 5000, seed=1)
    assert f1_score(recon, gt, tau=0.1).f1 >= 0.95


def test_sphere_level_set_is_a_closed_surface():
    volume = TSDFVolume(np.full(3, -1.0), np.full(3, 1.0), 0.05, 0.2)
    centers = volume.origin + np.stack(np.indices(volume.shape), axis=-1) * volume.voxel_size
    radius = np.linalg.norm(centers, axis=-1)
    volume.tsdf = np.clip((radius - 0.6) / volume.truncation, -1.0, 1.0)
    volume.weight = np.ones(volume.shape)
    mesh = extract_mesh(volume)
    assert mesh.euler_characteristic() == 2
    assert mesh.boundary_edges() == 0
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.6, atol=0.025)


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory, town_dir):
    """The same small pipeline run three times: twice single-threaded, once on two threads"""
    runs = {}
    try:
        for name, threads in (("first", "1"), ("second", "1"), ("threaded", "2")):
            out = tmp_path_factory.mktemp(name)
            args = ["pipeline", "--out", str(out), "--data", str(town_dir), *PIPELINE, "--threads", threads]
            assert main([*args, "--no-wall-clock", "-q"]) == 0
            runs[name] = out
    finally:
        set_threads(1)
    return runs


def test_pipeline_writes_every_stage(pipeline_runs):
    out = pipeline_runs["first"]
    stages = [row["stage"] for row in _rows(out / "metrics.csv")]
    for stage in ("pretrain", "partition", "merge", "trim", "quantize", "mesh", "eval"):
        assert stage in stages
    assert any(stage.startswith("tune:") for stage in stages)
    for name in ("pretrain.ckpt", "merged.ckpt", "trimmed.ckpt", "quantized.ckpt", "mesh.ply", "report.json"):
        assert (out / name).exists(), name

    summary = json.loads((out / "summary.json").read_text())
    assert summary["trim"]["removed"] >= 0.1 * summary["merge"]["count"]
    assert summary["quantize"]["size_ratio"] <= 0.5
    assert 0.0 <= summary["eval"]["f1"] <= 1.0


def test_pipeline_metrics_are_reproducible(pipeline_runs):
    first = (pipeline_runs["first"] / "metrics.csv").read_bytes()
    assert first == (pipeline_runs["second"] / "metrics.csv").read_bytes()
    assert (pipeline_runs["first"] / "quantized.ckpt").read_bytes() == (
        pipeline_runs["second"] / "quantized.ckpt"
    ).read_bytes()


def test_thread_count_does_not_change_the_metrics(pipeline_runs):
    first = (pipeline_runs["first"] / "metrics.csv").read_bytes()
    assert first == (pipeline_runs["threaded"] / "metrics.csv").read_bytes()


def test_rerun_skips_finished_stages(pipeline_runs, town_dir):
    out = pipeline_runs["first"]
    before = (out / "metrics.csv").read_bytes()
    stamp = (out / "pretrain.ckpt").stat().st_mtime_ns
    args = ["pipeline", "--out", str(out), "--data", str(town_dir), *PIPELINE, "--threads", "1"]
    assert main([*args, "--no-wall-clock", "-q"]) == 0
    assert (out / "pretrain.ckpt").stat().st_mtime_ns == stamp
    assert (out / "metrics.csv").read_bytes() == before


def test_ablation_writes_one_row_per_source(tmp_path, town_dir):
    args = ["ablate", "--out", str(tmp_path), "--data", str(town_dir), "--iterations", "40"]
    assert main([*args, "--sources", "total", "ssim_only", "--no-wall-clock", "-q"]) == 0
    rows = _rows(tmp_path / "ablate.csv")
    assert [row["gradient_source"] for row in rows] == ["TOTAL", "SSIM_ONLY"]
    assert all(int(row["peak_count"]) >= int(row["count"]) for row in rows)

import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.common import sh_to_rgb
from SCV2.density import DensifyConfig
from SCV2.objective import DepthPrior, LossWeights
from SCV2.rasterizer import RenderOptions, render
from SCV2.training import TrainConfig, Trainer, TrimConfig, evaluate_views, init_from_points, scene_extent
from SCV2.surfels import Camera


def _trainer(model, camera, image, seed=0, **densify):
    return Trainer(
        model,
        [camera],
        [image],
        1.0,
        TrainConfig(dtype="float64"),
        LossWeights(depth_enabled=False),
        DensifyConfig(**densify),
        TrimConfig(),
        RenderOptions(),
        seed=seed,
    )


@pytest.fixture
def target(camera, blob_model):
    shifted = blob_model.replace(means=blob_model.means + torch.tensor([0.03, -0.02, 0.0], dtype=torch.float64))
    return render(shifted, camera).color.numpy()


def test_trim_schedule():
    config = TrimConfig()
    assert config.trim_iterations(100, at_start=True) == [0, 30, 60, 90]
    assert config.trim_iterations(100, at_start=False) == [30, 60, 90]
    assert config.trim_iterations(0, at_start=True) == []


def test_config_validation():
    TrainConfig().validate()
    with pytest.raises(utils.ConfigError, match="train.dtype"):
        TrainConfig(dtype="float16").validate()
    with pytest.raises(utils.ConfigError, match="trim.tune_ratio"):
        TrimConfig(tune_ratio=1.0).validate()


def test_init_from_points_on_a_grid():
    xs, ys = np.meshgrid(np.arange(5.0), np.arange(5.0))
    points = np.stack([xs.ravel(), ys.ravel(), np.zeros(25)], axis=1)
    colors = np.tile([0.2, 0.4, 0.6], (25, 1))
    model = init_from_points(points, colors, seed=1, init_opacity=0.1, dtype=torch.float64)
    assert len(model) == 25
    center = 12
    assert float(model.scales[center, 0]) == pytest.approx(1.0)
    assert torch.allclose(model.opacities, torch.full((25,), 0.1, dtype=torch.float64))
    assert torch.allclose(torch.linalg.norm(model.quats, dim=1), torch.ones(25, dtype=torch.float64))
    rgb = sh_to_rgb(model.sh, torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).expand(25, 3))
    assert torch.allclose(rgb, torch.as_tensor(colors))


def test_init_from_points_is_seeded():
    points = np.random.default_rng(0).normal(size=(30, 3))
    a = init_from_points(points, np.full((30, 3), 0.5), seed=4)
    b = init_from_points(points, np.full((30, 3), 0.5), seed=4)
    assert torch.equal(a.quats, b.quats)
    with pytest.raises(utils.ContractError):
        init_from_points(np.zeros((0, 3)), np.zeros((0, 3)))


def test_scene_extent():
    cameras = [Camera.look_at((r, 0.0, 1.0), (0.0, 0.0, 0.0), 8, 8) for r in (-2.0, 2.0)]
    assert scene_extent(cameras) == pytest.approx(2.2)


def test_training_reduces_the_loss(camera, blob_model, target):
    trainer = _trainer(blob_model, camera, target, densify_start_iter=10_000)
    first = trainer.step(60)["loss"]
    for _ in range(59):
        last = trainer.step(60)["loss"]
    assert last < first
    assert trainer.iteration == 60
    assert trainer.model.iteration == 60


def test_training_is_deterministic(camera, blob_model, target):
    runs = []
    for _ in range(2):
        trainer = _trainer(blob_model, camera, target, seed=5, densify_start_iter=5, densify_interval=5)
        runs.append(trainer.run(20, log_interval=10))
    a, b = runs
    assert len(a.model) == len(b.model)
    for name in a.model.PARAMS:
        assert torch.equal(getattr(a.model, name), getattr(b.model, name))
    assert [row["count"] for row in a.history] == [row["count"] for row in b.history]


def test_densify_round_keeps_optimizer_state_aligned(camera, blob_model, target):
    trainer = _trainer(blob_model, camera, target, densify_start_iter=1, grad_threshold=1e-12)
    for _ in range(3):
        trainer.step(100)
    clones, splits = trainer.densify_round(3)
    assert clones + splits > 0
    n = len(trainer.model)
    for group in trainer.optimizer.param_groups:
        param = group["params"][0]
        assert param.shape[0] == n
        state = trainer.optimizer.state[param]
        assert state["exp_avg"].shape == param.shape
    assert len(trainer.stats) == n
    trainer.step(100)


def test_non_finite_targets_raise_divergence(camera, blob_model, target):
    broken = target.copy()
    broken[0, 0, 0] = np.nan
    trainer = _trainer(blob_model, camera, broken)
    with pytest.raises(utils.DivergenceError):
        trainer.step(10)


def test_trim_round_removes_surfels(camera, blob_model, target):
    trainer = _trainer(blob_model, camera, target)
    trainer.step(10)
    removed = trainer.trim_round(0.25)
    assert removed >= 3
    assert len(trainer.model) == len(blob_model) - removed


def test_evaluate_views_scores_each_view(camera, blob_model):
    target = render(blob_model, camera).color.clamp(0.0, 1.0).numpy()
    mean_psnr, mean_ssim, rows = evaluate_views(blob_model, [camera], [target])
    assert mean_psnr == np.inf
    assert mean_ssim == pytest.approx(1.0)
    assert rows[0][0] == camera.view_id

    darker = evaluate_views(blob_model, [camera], [target * 0.5])
    assert np.isfinite(darker[0]) and darker[1] < 1.0
    assert np.isnan(evaluate_views(blob_model, [], [])[0])


def test_tuning_restarts_the_schedules_on_a_pretrained_model(camera, blob_model, target):
    prior = DepthPrior(np.full((camera.height, camera.width), 0.45), np.ones((camera.height, camera.width), dtype=bool))
    train = TrainConfig(dtype="float64")
    trainer = Trainer(
        blob_model.with_iteration(2000),
        [camera],
        [target],
        1.0,
        train,
        LossWeights(),
        DensifyConfig(densify_start_iter=10_000),
        TrimConfig(),
        RenderOptions(),
        priors={camera.view_id: prior},
        stage="tune",
        lr_scales={"means": 0.4},
    )
    base = train.position_lr * 0.4
    lr, weight = trainer.schedule(20)
    assert lr == pytest.approx(base)
    assert weight == pytest.approx(0.5)

    assert "depth" in trainer.step(20)
    means_lr = next(group["lr"] for group in trainer.optimizer.param_groups if group["name"] == "means")
    assert means_lr == pytest.approx(base * train.position_lr_final_ratio ** (1 / 20))
    assert trainer.schedule(20)[1] < 0.5

    for _ in range(19):
        trainer.step(20)
    lr, weight = trainer.schedule(20)
    assert lr == pytest.approx(base * train.position_lr_final_ratio)
    assert weight == pytest.approx(0.0025)
    assert trainer.stage_step == 20
    assert trainer.model.iteration == 2020

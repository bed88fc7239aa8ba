"""Command-line entry point: one subcommand per pipeline stage plus `pipeline` (all stages, resumable) and `ablate`.

Stages read and write artifacts in the run directory given by `--out`. Every stage appends its rows to
`metrics.csv` and records its totals in `summary.json`. FORMATS.md documents every file.

Exit codes: 0 ok, 1 unexpected library error, 2 bad configuration, 3 bad or missing data, 4 numeric divergence.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import utils
from .compression import encode, export_surfels_ply, load_model, quantize, save_checkpoint
from .config import RunConfig, load_config
from .contribution import accumulate_contributions, average_contribution, export_csv, trim
from .dataset import Dataset, load_cameras, read_mesh_ply, read_points_ply, read_transform, write_pfm, write_png
from .density import GradientSource
from .evaluation import evaluate_mesh
from .meshing import fuse
from .objective import psnr, ssim
from .pipeline import BlockPartition, assign_views, foreground_box, merge, partition, pretrain, tune_block, tune_blocks
from .rasterizer import render
from .scenegen import generate, town_spec
from .surfels import SceneModel
from .threadable import parallel_map, set_threads
from .training import evaluate_views, scene_extent


logger = logging.getLogger(__name__)

STAGES = ("gen", "pretrain", "partition", "tune", "merge", "trim", "quantize", "mesh", "eval")
METRIC_COLUMNS = ("stage", "iter", "psnr", "ssim", "f1", "count", "wall_ms")
ABLATE_COLUMNS = ("gradient_source", "psnr", "ssim", "count", "peak_count", "wall_ms")
ABLATE_SOURCES = (
    GradientSource.SSIM_ONLY,
    GradientSource.TOTAL,
    GradientSource.RGB_ONLY,
    GradientSource.SSIM_PLUS_DEPTH,
)
# argparse fields that don't change what a stage computes
_AMBIENT_ARGS = {
    "command",
    "config",
    "set",
    "seed",
    "threads",
    "verbose",
    "quiet",
    "out",
    "data",
    "plot",
    "no_wall_clock",
}


@dataclass
class StageResult:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


class Run:
    """Paths and shared state of one run directory"""

    def __init__(self, out: Path, data: Path, config: RunConfig, wall_clock: bool = True):
        self.out = Path(out)
        self.data = Path(data)
        self.config = config
        self.wall_clock = wall_clock
        self.pretrain_ckpt = self.out / "pretrain.ckpt"
        self.views_file = self.out / "train_views.json"
        self.partition_file = self.out / "partition.json"
        self.blocks_dir = self.out / "blocks"
        self.merged_ckpt = self.out / "merged.ckpt"
        self.trimmed_ckpt = self.out / "trimmed.ckpt"
        self.quantized_ckpt = self.out / "quantized.ckpt"
        self.mesh_file = self.out / "mesh.ply"
        self.report_file = self.out / "report.json"
        self.metrics_file = self.out / "metrics.csv"
        self.summary_file = self.out / "summary.json"
        self.manifest_file = self.out / "manifest.json"
        self._dataset: Optional[Dataset] = None

    def __repr__(self):
        return f"<Run [{self.out}] data={self.data}>"

    def block_ckpt(self, block: int) -> Path:
        return self.blocks_dir / f"block_{block:02d}.ckpt"

    def dataset(self) -> Dataset:
        if self._dataset is None:
            if not (self.data / "cameras.json").exists():
                raise utils.MissingArtifactError(self.data / "cameras.json", "gen")
            self._dataset = Dataset.load(self.data, with_priors=self.config.loss.depth_enabled)
        return self._dataset

    def train_views(self) -> List[int]:
        """View indices chosen by the pretrain stage, or the full training split"""
        if self.views_file.exists():
            return [int(i) for i in json.loads(self.views_file.read_text())["views"]]
        return self.dataset().train_indices

    def views(self, indices: Sequence[int]) -> Tuple[list, list]:
        dataset = self.dataset()
        return [dataset.cameras[i] for i in indices], [dataset.images[i] for i in indices]

    def load(self, path: Path, stage: str) -> SceneModel:
        if not path.exists():
            raise utils.MissingArtifactError(path, stage)
        return load_model(path, self.config.train.torch_dtype)

    def score(self, model: SceneModel) -> Tuple[float, float]:
        """Mean test PSNR and SSIM; falls back to the training views when there is no test split"""
        dataset = self.dataset()
        indices = dataset.test_indices or self.train_views()
        cameras, images = self.views(indices)
        mean_psnr, mean_ssim, _ = evaluate_views(model, cameras, images, self.config.render)
        return mean_psnr, mean_ssim

    def wall(self, ms: float) -> float:
        return float(ms) if self.wall_clock else 0.0

    def since(self, start: float) -> float:
        return self.wall((time.perf_counter() - start) * 1000.0)


def metric_row(stage: str, **values: Any) -> Dict[str, Any]:
    row: Dict[str, Any] = {column: None for column in METRIC_COLUMNS}
    row["stage"] = stage
    row.update(values)
    return row


def format_metric(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        if value.is_integer() and abs(value) < 2**53:
            return str(int(value))
        return repr(value)
    return str(value)


def write_rows(path: Path, rows: Sequence[Dict[str, Any]], columns: Sequence[str], append: bool = True) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([format_metric(row.get(column)) for column in columns])


def _json_ready(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.generic):
        return _json_ready(value.item())
    return value


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_ready(data), indent=1, sort_keys=True) + "\n")


def update_summary(run: Run, stage: str, summary: Dict[str, Any]) -> None:
    current = json.loads(run.summary_file.read_text()) if run.summary_file.exists() else {}
    current[stage] = summary
    write_json(run.summary_file, current)


def plot_metrics(rows: Sequence[Dict[str, Any]], path: Path) -> bool:
    """Writes an SVG line chart of PSNR and F1 per stage; returns False when matplotlib isn't installed"""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib isn't installed; skipping %s", path)
        return False

    scored = [row for row in rows if row.get("psnr") is not None or row.get("f1") is not None]
    labels = [f"{row['stage']}@{format_metric(row.get('iter'))}" for row in scored]
    x = list(range(len(scored)))
    fig, ax = plt.subplots(figsize=(8, 4))
    psnrs = [row["psnr"] if row.get("psnr") is not None else math.nan for row in scored]
    ax.plot(x, psnrs, marker="o", label="PSNR")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    other = ax.twinx()
    f1s = [row["f1"] if row.get("f1") is not None else math.nan for row in scored]
    other.plot(x, f1s, "s-", color="C1", label="F1")
    other.set_ylabel("F1")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


# Stages


def stage_gen(run: Run, args: argparse.Namespace) -> StageResult:
    spec = town_spec(
        seed=getattr(args, "scene_seed", 7),
        n_boxes=getattr(args, "boxes", 6),
        n_cameras=getattr(args, "cameras", 24),
        width=getattr(args, "width", 96),
        height=getattr(args, "height", 72),
        perturb_priors=getattr(args, "perturb_priors", False),
    )
    generate(spec, run.data)
    return StageResult(summary={"views": spec.n_cameras, "boxes": len(spec.boxes), "data": str(run.data)})


def stage_pretrain(run: Run, args: argparse.Namespace) -> StageResult:
    dataset = run.dataset()
    fraction = getattr(args, "train_fraction", 1.0)
    views = dataset.subsample_train(fraction) if fraction < 1.0 else dataset.train_indices
    start = time.perf_counter()
    result = pretrain(dataset, run.config, views, iterations=getattr(args, "iterations", None))
    size = save_checkpoint(result.model, run.pretrain_ckpt)
    write_json(run.views_file, {"views": views})

    mean_psnr, mean_ssim = run.score(result.model)
    rows = [
        metric_row("pretrain", iter=h["iter"], count=h["count"], wall_ms=run.wall(h["wall_ms"])) for h in result.history
    ]
    rows.append(
        metric_row(
            "pretrain",
            iter=result.model.iteration,
            psnr=mean_psnr,
            ssim=mean_ssim,
            count=len(result.model),
            wall_ms=run.since(start),
        )
    )
    summary = {
        "count": len(result.model),
        "peak_count": result.peak_count,
        "bytes": size,
        "psnr": mean_psnr,
        "ssim": mean_ssim,
        "views": len(views),
    }
    return StageResult(rows, summary)


def stage_partition(run: Run, args: argparse.Namespace) -> StageResult:
    config = run.config
    model = run.load(run.pretrain_ckpt, "pretrain")
    box = foreground_box(model.means.detach().double().numpy(), config.blocks.foreground_fraction)
    blocks = partition(model, (config.blocks.grid_x, config.blocks.grid_y), box, config.blocks.ssim_epsilon)
    cameras, _ = run.views(run.train_views())
    blocks = assign_views(model, blocks, cameras, options=config.render)
    blocks.save(run.partition_file)
    summary = {
        "surfels": [len(b) for b in blocks.blocks],
        "views": [len(v) for v in blocks.views],
        "degenerate": [m for m, flag in enumerate(blocks.degenerate) if flag],
    }
    return StageResult([metric_row("partition", count=len(model))], summary)


def _load_partition(run: Run, model: SceneModel) -> BlockPartition:
    blocks = BlockPartition.load(run.partition_file)
    if blocks.n_surfels != len(model):
        raise utils.DataError(
            f"{run.partition_file} covers {blocks.n_surfels} surfels but {run.pretrain_ckpt} has {len(model)}. "
            "Run the 'partition' stage again."
        )
    return blocks


def stage_tune(run: Run, args: argparse.Namespace) -> StageResult:
    model = run.load(run.pretrain_ckpt, "pretrain")
    blocks = _load_partition(run, model)
    cameras, images = run.views(run.train_views())
    priors = run.dataset().priors
    iterations = getattr(args, "tune_iterations", None)
    only = getattr(args, "block", None)
    start = time.perf_counter()
    if only is not None:
        if not 0 <= only < blocks.n_blocks:
            raise utils.ConfigError("--block", f"must be in [0, {blocks.n_blocks}), got {only}")
        results = [
            tune_block(
                model,
                blocks,
                only,
                cameras,
                images,
                run.config,
                priors,
                0 if blocks.degenerate and blocks.degenerate[only] else iterations,
                scene_extent(cameras),
            )
        ]
    else:
        maximum = 1 if getattr(args, "sequential", False) else None
        results = tune_blocks(model, blocks, cameras, images, run.config, priors, iterations, maximum)

    rows = []
    for result in results:
        save_checkpoint(result.model, run.block_ckpt(result.block))
        done = result.history[-1]["iter"] if result.history else 0
        rows.append(metric_row(f"tune:{result.block}", iter=done, count=len(result.model)))
    rows.append(metric_row("tune", count=sum(len(r.model) for r in results), wall_ms=run.since(start)))
    summary = {
        "blocks": {str(r.block): {"count": len(r.model), "peak_count": r.peak_count} for r in results},
        "peak_count": max((r.peak_count for r in results), default=0),
    }
    return StageResult(rows, summary)


def stage_merge(run: Run, args: argparse.Namespace) -> StageResult:
    model = run.load(run.pretrain_ckpt, "pretrain")
    blocks = _load_partition(run, model)
    tuned = [run.load(run.block_ckpt(m), "tune") for m in range(blocks.n_blocks)]
    merged = merge(blocks, tuned)
    size = save_checkpoint(merged, run.merged_ckpt)
    mean_psnr, mean_ssim = run.score(merged)
    row = metric_row("merge", iter=merged.iteration, psnr=mean_psnr, ssim=mean_ssim, count=len(merged))
    return StageResult([row], {"count": len(merged), "bytes": size, "psnr": mean_psnr, "ssim": mean_ssim})


def _contributions(run: Run, model: SceneModel) -> Tuple[np.ndarray, Any]:
    cameras, _ = run.views(run.train_views())
    stats = accumulate_contributions(model, cameras, run.config.trim.gamma, run.config.render)
    return average_contribution(stats), stats


def stage_trim(run: Run, args: argparse.Namespace) -> StageResult:
    model = run.load(run.merged_ckpt, "merge")
    ratio = getattr(args, "ratio", None)
    ratio = run.config.trim.tune_ratio if ratio is None else ratio
    contributions, stats = _contributions(run, model)
    if getattr(args, "contributions", None):
        export_csv(args.contributions, contributions, stats)
    result = trim(model, contributions, ratio)
    size = save_checkpoint(result.model, run.trimmed_ckpt)
    mean_psnr, mean_ssim = run.score(result.model)
    summary = {
        "count": len(result.model),
        "removed": int((~result.keep).sum()),
        "threshold": result.threshold,
        "ratio": ratio,
        "bytes": size,
        "psnr": mean_psnr,
        "ssim": mean_ssim,
    }
    row = metric_row("trim", iter=model.iteration, psnr=mean_psnr, ssim=mean_ssim, count=len(result.model))
    return StageResult([row], summary)


def stage_quantize(run: Run, args: argparse.Namespace) -> StageResult:
    config = run.config.compress
    model = run.load(run.trimmed_ckpt, "trim")
    contributions, _ = _contributions(run, model)
    quantized = quantize(model, contributions, config.ratio, config.codebook_size, run.config.seed, config.kmeans_iters)
    size = save_checkpoint(quantized, run.quantized_ckpt)
    float_size = len(encode(model))
    restored = load_model(run.quantized_ckpt, run.config.train.torch_dtype)
    mean_psnr, mean_ssim = run.score(restored)
    summary = {
        "count": len(quantized),
        "bytes": size,
        "float_bytes": float_size,
        "size_ratio": size / float_size,
        "n_tail": quantized.n_tail,
        "codebook_size": quantized.codebook_size,
        "clamped": quantized.clamped,
        "psnr": mean_psnr,
        "ssim": mean_ssim,
    }
    row = metric_row("quantize", iter=model.iteration, psnr=mean_psnr, ssim=mean_ssim, count=len(quantized))
    return StageResult([row], summary)


def stage_mesh(run: Run, args: argparse.Namespace) -> StageResult:
    source = getattr(args, "model", None)
    model = run.load(Path(source), "quantize") if source else run.load(run.quantized_ckpt, "quantize")
    cameras, _ = run.views(run.train_views())
    start = time.perf_counter()
    export = export_surfels_ply(args.surfels, model, threaded=True) if getattr(args, "surfels", None) else None
    _, mesh = fuse(model, cameras, scene_extent(run.dataset().cameras), run.config.mesh, run.config.render)
    mesh.save(run.mesh_file)
    if export is not None:
        export.join()
    summary = {
        "vertices": len(mesh.vertices),
        "faces": len(mesh),
        "area": mesh.area,
        "boundary_edges": mesh.boundary_edges(),
    }
    return StageResult([metric_row("mesh", count=len(mesh), wall_ms=run.since(start))], summary)


def stage_render(run: Run, args: argparse.Namespace) -> StageResult:
    source = getattr(args, "model", None)
    model = run.load(Path(source), "quantize") if source else run.load(run.quantized_ckpt, "quantize")
    dataset = run.dataset()
    split = getattr(args, "split", "test")
    indices = {
        "test": dataset.test_indices or run.train_views(),
        "train": run.train_views(),
        "all": list(range(len(dataset.cameras))),
    }[split]
    folder = Path(getattr(args, "renders", None) or run.out / "renders")
    folder.mkdir(parents=True, exist_ok=True)
    options = run.config.render

    def view(index):
        camera, image = dataset.cameras[index], dataset.images[index]
        output = render(model, camera, options)
        color = output.color.clamp(0.0, 1.0)
        write_png(folder / f"{camera.view_id:04d}.png", color.double().numpy())
        write_pfm(folder / f"{camera.view_id:04d}_depth.pfm", output.median_depth.double().numpy())
        target = torch.as_tensor(image, dtype=color.dtype)
        return {"view_id": camera.view_id, "psnr": psnr(color, target), "ssim": float(ssim(color, target))}

    scores = parallel_map(view, indices)
    write_rows(folder / "metrics.csv", scores, ("view_id", "psnr", "ssim"), append=False)
    finite = [s["psnr"] for s in scores if math.isfinite(s["psnr"])]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean([s["ssim"] for s in scores])) if scores else math.nan
    row = metric_row("render", iter=model.iteration, psnr=mean_psnr, ssim=mean_ssim, count=len(model))
    return StageResult([row], {"views": len(scores), "psnr": mean_psnr, "ssim": mean_ssim, "split": split})


def stage_eval(run: Run, args: argparse.Namespace) -> StageResult:
    mesh_path = Path(getattr(args, "mesh", None) or run.mesh_file)
    gt_path = Path(getattr(args, "gt", None) or run.data / "gt" / "points.ply")
    cameras_path = Path(getattr(args, "cameras", None) or run.data / "cameras.json")
    transform_path = getattr(args, "transform", None)
    if transform_path is None and (run.data / "gt" / "transform.txt").exists():
        transform_path = run.data / "gt" / "transform.txt"
    for path, stage in ((mesh_path, "mesh"), (gt_path, "gen"), (cameras_path, "gen")):
        if not path.exists():
            raise utils.MissingArtifactError(path, stage)

    config = run.config.eval
    flags = {
        "tau": getattr(args, "tau", None),
        "vis_threshold": getattr(args, "vis_threshold", None),
        "alpha": getattr(args, "alpha", None),
        "samples": getattr(args, "samples", None),
    }
    config = replace(config, **{k: v for k, v in flags.items() if v is not None})
    config.validate()

    vertices, faces = read_mesh_ply(mesh_path)
    gt_points, _ = read_points_ply(gt_path)
    cameras = load_cameras(cameras_path)
    report = evaluate_mesh(
        vertices,
        faces,
        gt_points,
        cameras,
        scene_extent(cameras),
        config,
        recon_transform=read_transform(transform_path) if transform_path else None,
        seed=run.config.seed,
        oracle=getattr(args, "oracle", False),
        options=run.config.render,
    )
    report_path = Path(getattr(args, "report", None) or run.report_file)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    row = metric_row("eval", f1=report.f1, count=report.n_recon)
    return StageResult([row], report.to_dict())


def stage_ablate(run: Run, args: argparse.Namespace) -> StageResult:
    """Pretrains once per densification gradient source and scores each on the test views"""
    dataset = run.dataset()
    names = getattr(args, "sources", None)
    sources = [GradientSource(name.upper()) for name in names] if names else list(ABLATE_SOURCES)
    fraction = getattr(args, "train_fraction", 1.0)
    views = dataset.subsample_train(fraction) if fraction < 1.0 else dataset.train_indices
    table, rows = [], []
    for source in sources:
        config = run.config.with_values({"densify.gradient_source": source.value}).validate()
        start = time.perf_counter()
        result = pretrain(dataset, config, views, iterations=getattr(args, "iterations", None))
        mean_psnr, mean_ssim = run.score(result.model)
        entry = {
            "gradient_source": source.value,
            "psnr": mean_psnr,
            "ssim": mean_ssim,
            "count": len(result.model),
            "peak_count": result.peak_count,
            "wall_ms": run.since(start),
        }
        logger.info(
            "Ablation %s: PSNR %.3f, SSIM %.4f, %d surfels", source.value, mean_psnr, mean_ssim, len(result.model)
        )
        table.append(entry)
        rows.append(
            metric_row(
                f"ablate:{source.value}",
                iter=result.model.iteration,
                psnr=mean_psnr,
                ssim=mean_ssim,
                count=len(result.model),
                wall_ms=entry["wall_ms"],
            )
        )
    write_rows(run.out / "ablate.csv", table, ABLATE_COLUMNS, append=False)
    best = max(table, key=lambda e: e["psnr"])["gradient_source"] if table else None
    return StageResult(rows, {"rows": table, "best_psnr": best})


STAGE_FUNCS: Dict[str, Callable[[Run, argparse.Namespace], StageResult]] = {
    "gen": stage_gen,
    "pretrain": stage_pretrain,
    "partition": stage_partition,
    "tune": stage_tune,
    "merge": stage_merge,
    "trim": stage_trim,
    "quantize": stage_quantize,
    "mesh": stage_mesh,
    "render": stage_render,
    "eval": stage_eval,
    "ablate": stage_ablate,
}


def stage_io(run: Run, stage: str) -> Tuple[List[Path], List[Path]]:
    """Input and output artifacts of a pipeline stage"""
    data = [run.data]
    io = {
        "gen": ([], [run.data]),
        "pretrain": (data, [run.pretrain_ckpt, run.views_file]),
        "partition": (data + [run.pretrain_ckpt, run.views_file], [run.partition_file]),
        "tune": (data + [run.pretrain_ckpt, run.views_file, run.partition_file], [run.blocks_dir]),
        "merge": ([run.pretrain_ckpt, run.partition_file, run.blocks_dir], [run.merged_ckpt]),
        "trim": (data + [run.merged_ckpt, run.views_file], [run.trimmed_ckpt]),
        "quantize": (data + [run.trimmed_ckpt, run.views_file], [run.quantized_ckpt]),
        "mesh": (data + [run.quantized_ckpt, run.views_file], [run.mesh_file]),
        "eval": (data + [run.mesh_file], [run.report_file]),
    }
    return io[stage]


def stage_key(run: Run, stage: str, inputs: Sequence[Path], args: argparse.Namespace) -> str:
    """Digest of everything a stage's outputs depend on: its inputs, the config and its options"""
    settings = run.config.to_flat()
    settings.pop("threads")
    options = {k: v for k, v in sorted(vars(args).items()) if k not in _AMBIENT_ARGS}
    payload = json.dumps({"stage": stage, "config": settings, "options": options}, sort_keys=True, default=repr)
    digest = hashlib.sha256(payload.encode())
    digest.update(utils.digest_of(inputs).encode())
    return digest.hexdigest()


def run_pipeline(run: Run, args: argparse.Namespace) -> StageResult:
    """Runs every stage in order, skipping stages whose recorded key and output digest still match"""
    manifest: Dict[str, Any] = json.loads(run.manifest_file.read_text()) if run.manifest_file.exists() else {}
    for stage in STAGES:
        inputs, outputs = stage_io(run, stage)
        if stage == "gen" and "gen" not in manifest and (run.data / "cameras.json").exists():
            logger.info("Using the existing dataset in %s", run.data)
            continue
        missing = [path for path in inputs if not path.exists()]
        if missing:
            raise utils.MissingArtifactError(missing[0], stage)
        key = stage_key(run, stage, inputs, args)
        entry = manifest.get(stage)
        if (
            entry is not None
            and entry["key"] == key
            and all(path.exists() for path in outputs)
            and utils.digest_of(outputs) == entry["outputs"]
        ):
            logger.info("Stage %s is up to date", stage)
            continue
        logger.info("Running stage %s", stage)
        result = STAGE_FUNCS[stage](run, args)
        manifest[stage] = {
            "key": key,
            "outputs": utils.digest_of(outputs),
            "rows": _json_ready(result.rows),
            "summary": _json_ready(result.summary),
        }
        write_json(run.manifest_file, manifest)

    rows = [row for stage in STAGES for row in manifest.get(stage, {}).get("rows", [])]
    for row in rows:
        for column in METRIC_COLUMNS[1:]:
            if isinstance(row.get(column), str):
                row[column] = float(row[column])
    write_rows(run.metrics_file, rows, METRIC_COLUMNS, append=False)
    write_json(run.summary_file, {stage: manifest[stage]["summary"] for stage in STAGES if stage in manifest})
    if getattr(args, "plot", False):
        plot_metrics(rows, run.out / "metrics.svg")
    return StageResult()


# Parser


def _parse_set(values: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for item in values or ():
        if "=" not in item:
            raise utils.ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="preset name (town, street) or config file (.cfg flat text or .json)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker pool size (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("--data", type=Path, help="dataset directory (default: <out>/data)")
    common.add_argument("--no-wall-clock", action="store_true", help="write 0 for wall_ms so metrics are byte-stable")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scene-seed", type=int, default=7, help="seed of the generated scene")
    scene.add_argument("--boxes", type=int, default=6)
    scene.add_argument("--cameras", type=int, default=24)
    scene.add_argument("--width", type=int, default=96)
    scene.add_argument("--height", type=int, default=72)
    scene.add_argument("--perturb-priors", action="store_true", help="write depth priors with an unknown scale/shift")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--iterations", type=int, help="iteration count (overrides the config)")
    training.add_argument("--train-fraction", type=float, default=1.0, help="keep this fraction of training views")

    parser = argparse.ArgumentParser(prog="scv2", description="Desk-scale surfel reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common, scene], help="generate the synthetic town dataset")
    sub.add_parser("pretrain", parents=[common, training], help="initialize and optimize surfels")
    sub.add_parser("partition", parents=[common], help="split the pretrained model into blocks and assign views")

    tune = sub.add_parser("tune", parents=[common], help="fine-tune every block")
    tune.add_argument("--tune-iterations", type=int, help="tuning iterations per block (overrides the config)")
    tune.add_argument("--block", type=int, help="tune only this block")
    tune.add_argument("--sequential", action="store_true", help="tune blocks one after another")

    sub.add_parser("merge", parents=[common], help="concatenate tuned blocks")

    trim_parser = sub.add_parser("trim", parents=[common], help="remove low-contribution surfels from the merged model")
    trim_parser.add_argument("--ratio", type=float, help="trim quantile (default: trim.tune_ratio)")
    trim_parser.add_argument("--contributions", type=Path, help="also write per-surfel contributions as CSV")

    sub.add_parser("quantize", parents=[common], help="compress the trimmed model")

    mesh = sub.add_parser("mesh", parents=[common], help="fuse median depths into a mesh")
    mesh.add_argument("--model", type=Path, help="checkpoint to mesh (default: quantized.ckpt)")
    mesh.add_argument("--surfels", type=Path, help="also export the surfels as a PLY point cloud")

    render_parser = sub.add_parser("render", parents=[common], help="render views to PNG and PFM")
    render_parser.add_argument("--model", type=Path, help="checkpoint to render (default: quantized.ckpt)")
    render_parser.add_argument("--split", choices=("test", "train", "all"), default="test")
    render_parser.add_argument("--renders", type=Path, help="output folder (default: <out>/renders)")

    evaluate = sub.add_parser("eval", parents=[common], help="crop and score a mesh against ground truth")
    evaluate.add_argument("--mesh", type=Path, help="reconstructed mesh PLY (default: <out>/mesh.ply)")
    evaluate.add_argument("--gt", type=Path, help="ground-truth point cloud PLY (default: <data>/gt/points.ply)")
    evaluate.add_argument("--cameras", type=Path, help="cameras.json (default: <data>/cameras.json)")
    evaluate.add_argument("--transform", type=Path, help="4x4 row-major reconstruction-to-ground-truth transform")
    evaluate.add_argument("--tau", type=float)
    evaluate.add_argument("--vis-threshold", type=int)
    evaluate.add_argument("--alpha", type=float)
    evaluate.add_argument("--samples", type=int)
    evaluate.add_argument("--oracle", action="store_true", help="exhaustive nearest-neighbour search")
    evaluate.add_argument("--report", type=Path, help="report JSON path (default: <out>/report.json)")

    pipe = sub.add_parser("pipeline", parents=[common, scene, training], help="run every stage, resuming when possible")
    pipe.add_argument("--tune-iterations", type=int, help="tuning iterations per block (overrides the config)")
    pipe.add_argument("--plot", action="store_true", help="write metrics.svg (needs matplotlib)")

    ablate = sub.add_parser("ablate", parents=[common, training], help="compare densification gradient sources")
    ablate.add_argument("--sources", nargs="+", choices=[s.value for s in GradientSource], type=str.upper)
    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)
    try:
        overrides: Dict[str, Any] = _parse_set(args.set)
        overrides.update(seed=args.seed, threads=args.threads)
        config = load_config(args.config, overrides)
        set_threads(config.threads)
        run = Run(args.out, args.data or args.out / "data", config, wall_clock=not args.no_wall_clock)
        run.out.mkdir(parents=True, exist_ok=True)
        (run.out / "config.cfg").write_text(config.dumps())

        if args.command == "pipeline":
            run_pipeline(run, args)
        else:
            result = STAGE_FUNCS[args.command](run, args)
            if result.rows:
                write_rows(run.metrics_file, result.rows, METRIC_COLUMNS)
            update_summary(run, args.command, result.summary)
    except utils.SCV2Error as e:
        logger.error("%s", e)
        for detail in e.errors:
            logger.error("  %s", detail)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

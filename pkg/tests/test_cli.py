import csv
import json
import math

import pytest

from SCV2.cli import METRIC_COLUMNS, build_parser, format_metric, main, metric_row, write_rows

SMALL_SCENE = ["--cameras", "8", "--width", "64", "--height", "64", "--boxes", "2"]


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_parser_defaults():
    args = build_parser().parse_args(["pipeline", "--tune-iterations", "5"])
    assert args.tune_iterations == 5
    assert args.iterations is None
    assert args.scene_seed == 7 and args.train_fraction == 1.0
    assert str(args.out) == "run" and args.data is None

    ablate = build_parser().parse_args(["ablate", "--sources", "total", "rgb_only"])
    assert ablate.sources == ["TOTAL", "RGB_ONLY"]
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen", "-v", "-q"])


def test_format_metric():
    assert format_metric(None) == ""
    assert format_metric(math.nan) == ""
    assert format_metric(3.0) == "3"
    assert format_metric(0.25) == "0.25"
    assert format_metric(math.inf) == "inf"
    assert format_metric("tune:1") == "tune:1"


def test_write_rows_appends_under_one_header(tmp_path):
    path = tmp_path / "metrics.csv"
    write_rows(path, [metric_row("pretrain", iter=10, count=5)], METRIC_COLUMNS)
    write_rows(path, [metric_row("eval", f1=0.5)], METRIC_COLUMNS)
    lines = path.read_text().splitlines()
    assert lines == ["stage,iter,psnr,ssim,f1,count,wall_ms", "pretrain,10,,,,5,", "eval,,,,0.5,,"]


def test_gen_writes_the_dataset_and_summary(tmp_path):
    assert main(["gen", "--out", str(tmp_path), *SMALL_SCENE, "-q"]) == 0
    assert (tmp_path / "data" / "cameras.json").exists()
    assert len(list((tmp_path / "data" / "images").glob("*.png"))) == 8
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["gen"]["views"] == 8 and summary["gen"]["boxes"] == 2
    assert "seed = 0" in (tmp_path / "config.cfg").read_text()


def test_bad_configuration_exits_with_two(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--set", "densify.omega=0", "-q"]) == 2
    assert main(["gen", "--out", str(tmp_path), "--set", "omega", "-q"]) == 2
    (tmp_path / "bad.cfg").write_text("colour = blue\n")
    assert main(["gen", "--out", str(tmp_path), "--config", str(tmp_path / "bad.cfg"), "-q"]) == 2


def test_missing_artifacts_exit_with_three(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path), "-q"]) == 3
    assert main(["merge", "--out", str(tmp_path), "-q"]) == 3
    assert main(["eval", "--out", str(tmp_path), "-q"]) == 3


def test_corrupt_checkpoint_exits_with_three(tmp_path, town_dir):
    (tmp_path / "pretrain.ckpt").write_bytes(b"SCV2" + b"\x00" * 60)
    assert main(["partition", "--out", str(tmp_path), "--data", str(town_dir), "-q"]) == 3


def test_eval_scores_the_reference_mesh(tmp_path, town_dir):
    mesh = town_dir / "gt" / "mesh.ply"
    code = main(["eval", "--out", str(tmp_path), "--data", str(town_dir), "--mesh", str(mesh), "--tau", "0.3", "-q"])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["tau"] == 0.3
    assert report["f1"] > 0.5
    rows = _rows(tmp_path / "metrics.csv")
    assert rows[-1]["stage"] == "eval"
    assert float(rows[-1]["f1"]) == pytest.approx(report["f1"])
    assert json.loads((tmp_path / "summary.json").read_text())["eval"]["f1"] == report["f1"]

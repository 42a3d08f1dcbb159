import csv
import io
import json

import pytest

from sparsepad.cli import EXIT_GRADCHECK, EXIT_INPUT, EXIT_NUMERICAL, main
from sparsepad.experiment import RunConfig, format_config, parse_config_text

SMALL = ["--set", "data.train_points=600", "--set", "data.test_points=300", "--set", "data.train_scenes=2",
         "--set", "data.test_scenes=1", "--set", "model.channels=4,6,8", "--set", "model.head_hidden=8"]


def stats_rows(text):
    body = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def test_stats_single_voxel_counts(capsys):
    assert main(["stats", "--synth", "single", "--voxel-sizes", "1"]) == 0
    out = capsys.readouterr()
    assert out.out.startswith("# sparsepad-stats v1\n")
    rows = {r["scheme"]: r for r in stats_rows(out.out)}
    assert {k: int(r["padded"]) for k, r in rows.items()} == {"zero": 0, "octree": 7, "ring1": 26, "interp": 7}
    assert "# sparsepad-config v1" in out.err


def test_stats_zero_scheme_pads_nothing(capsys):
    assert main(["stats", "--synth", "sphere", "--n", "2000", "--schemes", "zero"]) == 0
    rows = stats_rows(capsys.readouterr().out)
    assert len(rows) == 4 and all(r["padded"] == "0" for r in rows)


def test_stats_sphere_sweep_ratio_trend(capsys):
    sizes = "1/10,1/20,1/40,1/80"
    assert main(["stats", "--synth", "sphere", "--n", "10000", "--voxel-sizes", sizes]) == 0
    rows = stats_rows(capsys.readouterr().out)
    for scheme in ("octree", "ring1", "interp"):
        ratios = [float(r["ratio"]) for r in rows if r["scheme"] == scheme]
        assert ratios == sorted(ratios)
    counts = {(r["scheme"], r["voxel_size"]): int(r["total"]) for r in rows}
    for r in rows:
        assert counts[("interp", r["voxel_size"])] <= counts[("ring1", r["voxel_size"])]


def test_stats_json_and_bytes(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["stats", "--synth", "single", "--voxel-sizes", "1", "--format", "json", "--out", str(out),
                 "--precision", "64"]) == 0
    rows = json.loads(out.read_text())["rows"]
    ring = next(r for r in rows if r["scheme"] == "ring1")
    assert ring["feature_bytes"] == 27 * 2 * 8


def test_input_errors(tmp_path, capsys):
    assert main(["stats", "--input", str(tmp_path / "missing.xyz")]) == EXIT_INPUT
    with pytest.raises(SystemExit) as exc:
        main(["stats", "--no-such-flag"])
    assert exc.value.code == EXIT_INPUT
    bad = tmp_path / "bad.cfg"
    bad.write_text("# sparsepad-config v1\nmodel.wings = 2\n")
    assert main(["stats", "--config", str(bad), "--synth", "single"]) == EXIT_INPUT
    assert main(["stats", "--schemes", "hexagonal", "--synth", "single"]) == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_config_round_trip():
    rc = RunConfig().updated({"model.padding": "ring2", "train.lr": 0.01, "model.channels": (4, 5, 6)})
    text = format_config(rc)
    assert RunConfig().updated(parse_config_text(text)) == rc
    with pytest.raises(ValueError):
        parse_config_text("model.levels = 3\n")


def test_config_file_is_applied(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sparsepad-config v1\n# comment\nmodel.padding = octree   # sibling padding\n")
    assert main(["stats", "--config", str(cfg), "--synth", "single"]) == 0
    assert "model.padding = octree" in capsys.readouterr().err


def test_train_zero_epochs_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", *SMALL, "--epochs", "0", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
    assert (tmp_path / "a/metrics.json").read_text() == (tmp_path / "b/metrics.json").read_text()


def test_train_then_eval(tmp_path, capsys):
    args = ["train", *SMALL, "--epochs", "2", "--padding", "interp", "--interp", "strict", "--seed", "3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a/metrics.json").read_text())
    assert ma == json.loads((tmp_path / "b/metrics.json").read_text())
    assert ma["seed"] == 3
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "a/model.ckpt")]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["accuracy"] == ma["test"]["accuracy"]
    assert set(ev) >= {"version", "miou", "accuracy", "majority_ceiling", "per_class_iou"}


def test_train_repeat_reports_spread(tmp_path, capsys):
    assert main(["train", *SMALL, "--epochs", "1", "--repeat", "2", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert len(m["runs"]) == 2 and [r["seed"] for r in m["runs"]] == [0, 1]
    assert {"mean", "std", "mean_abs_dev"} <= set(m["accuracy"])
    assert "+-" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_failure_codes(tmp_path, capsys):
    assert main(["train", *SMALL, "--epochs", "2", "--set", "train.lr=1e30", "--out", str(tmp_path)]) == EXIT_NUMERICAL
    assert main(["train", *SMALL, "--interp", "strict", "--epochs", "1", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["train", *SMALL, "--epochs", "1"]) == EXIT_INPUT
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_INPUT


def test_synth_writes_dataset(tmp_path, capsys):
    assert main(["synth", "--task", "checker", "--n", "100", "--scenes", "2", "--seed", "4",
                 "--out", str(tmp_path / "d")]) == 0
    index = json.loads((tmp_path / "d/dataset.json").read_text())
    assert len(index["scenes"]) == 2 and index["meta"]["seed"] == 4
    assert main(["synth", "--task", "bunny", "--out", str(tmp_path / "e")]) == EXIT_INPUT


def test_eval_on_dataset_dir(tmp_path, capsys):
    assert main(["synth", "--task", "checker", "--n", "200", "--out", str(tmp_path / "d")]) == 0
    assert main(["train", *SMALL, "--epochs", "0", "--out", str(tmp_path / "m")]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "m/model.ckpt"), "--data", str(tmp_path / "d")]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] <= 1.0


def test_gradcheck_pass_and_injected_failure(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    layers = {line.split()[0] for line in lines[1:]}
    assert layers == {"conv_k3", "down_k2s2", "up_k2s2", "linear", "relu", "batchnorm", "resblock", "unet2"}
    assert all(line.endswith("PASS") for line in lines[1:])
    assert main(["gradcheck", "--inject-bug"]) == EXIT_GRADCHECK
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "--precision", "32"]) == EXIT_INPUT


def test_threads_flag(capsys):
    assert main(["stats", "--synth", "single", "--threads", "1"]) == 0
    assert main(["stats", "--synth", "single", "--threads", "0"]) == EXIT_INPUT

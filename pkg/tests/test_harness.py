import csv
import json
import re
import shutil
from dataclasses import replace

import numpy as np
import pytest

from mtlkit import cli, harness, metrics, plots, scenes
from mtlkit.errors import ComparisonRefused, ConfigError
from mtlkit.model import TinySegNet

HEADER = ("epoch,train_seg,train_depth,train_normal,test_seg,test_depth,test_normal,"
          "miou,depth_rmse,normal_angle,w1,w2,w3,seconds")


def cfg_for(dataset, out, **kw):
    base = dict(dataset=str(dataset), output=str(out), epochs=1, batch_size=4, base_width=4)
    base.update(kw)
    return harness.make_config(base)


@pytest.fixture(scope="module")
def mtl_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "nash"
    return harness.run_experiment(cfg_for(tiny_dataset, out, mode="mtl", weighter="nash", epochs=2))


@pytest.fixture(scope="module")
def baseline_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "baseline"
    return harness.run_baseline_suite(cfg_for(tiny_dataset, out))


def test_config_text_parsing_and_overrides():
    values = harness.parse_config_text("# comment\nmode = mtl\nweighter = nash  # trailing\n\nepochs=3\nlr = 0.01\n")
    cfg = harness.make_config(values)
    assert (cfg.mode, cfg.weighter, cfg.epochs, cfg.lr) == ("mtl", "nash", 3, 0.01)
    cfg2 = harness.make_config({"epochs": 7}, cfg)
    assert cfg2.epochs == 7 and cfg2.weighter == "nash"
    assert harness.make_config(harness.parse_config_text(cfg2.to_text())) == cfg2


@pytest.mark.parametrize("text", ["mode = both", "epochs = 0", "bogus = 1", "epochs = three", "just words",
                                  "momentum = 1.0", "mode = mtl\nweighter = dwa"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        harness.make_config(harness.parse_config_text(text))


def test_csv_schema_and_outputs(mtl_run):
    lines = (mtl_run / "epochs.csv").read_text().splitlines()
    assert lines[0] == HEADER
    assert len(lines) == 3
    row = dict(zip(HEADER.split(","), lines[1].split(",")))
    assert all(v != "" for v in row.values())
    for name in ("config.txt", "report.json", "run.json", "model.gbgn"):
        assert (mtl_run / name).exists()
    report = metrics.MetricReport.from_json((mtl_run / "report.json").read_text())
    assert float(lines[-1].split(",")[7]) == report.miou
    alpha = [float(row[k]) for k in ("w1", "w2", "w3")]
    assert all(a > 0 for a in alpha)


def test_single_task_leaves_absent_columns_empty(tiny_dataset, tmp_path):
    out = harness.run_experiment(cfg_for(tiny_dataset, tmp_path / "s", mode="single:depth"))
    rows = harness.read_csv(out / "epochs.csv")
    assert len(rows) == 1
    r = rows[0]
    assert r["train_depth"] and r["test_depth"] and r["depth_rmse"]
    for k in ("train_seg", "train_normal", "test_seg", "test_normal", "miou", "normal_angle", "w1", "w2", "w3"):
        assert r[k] == ""


def test_train_seg_loss_decreases(tiny_dataset, tmp_path):
    out = harness.run_experiment(cfg_for(tiny_dataset, tmp_path / "seg", mode="single:seg", epochs=4, batch_size=2))
    rows = harness.read_csv(out / "epochs.csv")
    assert float(rows[-1]["train_seg"]) < float(rows[0]["train_seg"])


def test_rerun_is_bit_identical(tiny_dataset, tmp_path, mtl_run):
    cfg = harness.make_config(harness.parse_config_text((mtl_run / "config.txt").read_text()))
    again = harness.run_experiment(replace(cfg, output=str(tmp_path / "again")))
    strip = lambda text: [r.rsplit(",", 1)[0] for r in text.splitlines()]  # noqa: E731
    assert strip((again / "epochs.csv").read_text()) == strip((mtl_run / "epochs.csv").read_text())
    for name in ("report.json", "run.json", "model.gbgn"):
        assert (again / name).read_bytes() == (mtl_run / name).read_bytes()


def test_uw_weights_in_checkpoint(tiny_dataset, tmp_path):
    out = harness.run_experiment(cfg_for(tiny_dataset, tmp_path / "uw", mode="mtl", weighter="uw"))
    model = TinySegNet.load(out / "model.gbgn")
    s = np.array([float(model.params[f"uw.s{i}"]) for i in range(3)])
    row = harness.read_csv(out / "epochs.csv")[-1]
    np.testing.assert_allclose(np.exp(-s), [float(row[k]) for k in ("w1", "w2", "w3")], rtol=0.2)


def test_baseline_merges_three_metrics(baseline_run):
    rep = metrics.MetricReport.from_json((baseline_run / "report.json").read_text())
    assert None not in (rep.miou, rep.depth_rmse, rep.normal_mean_angle)
    for sub, key in (("single-seg", "miou"), ("single-depth", "depth_rmse"), ("single-normal", "normal_mean_angle")):
        part = metrics.MetricReport.from_json((baseline_run / sub / "report.json").read_text())
        assert getattr(part, key) == getattr(rep, key)


def test_compare_matches_recomputed_delta_m(baseline_run, mtl_run, tmp_path):
    result = harness.compare([mtl_run, baseline_run], baseline_run, tmp_path / "cmp")
    by_name = {r.name: r for r in result.rows}
    base = metrics.MetricReport.from_json((baseline_run / "report.json").read_text())
    mtl = metrics.MetricReport.from_json((mtl_run / "report.json").read_text())
    assert by_name[str(mtl_run)].delta.value == metrics.delta_m(mtl, base).value
    assert by_name[str(baseline_run)].delta.value == 0.0
    values = [r.delta.value for r in result.rows]
    assert values == sorted(values)
    rows = list(csv.DictReader((tmp_path / "cmp.csv").open()))
    assert len(rows) == 2
    assert "delta_m" in (tmp_path / "cmp.txt").read_text()


def test_compare_refuses_other_dataset(baseline_run, mtl_run, tmp_path):
    other = tmp_path / "other"
    shutil.copytree(mtl_run, other)
    info = json.loads((other / "run.json").read_text())
    info["manifest_hash"] = "0" * 16
    (other / "run.json").write_text(json.dumps(info))
    with pytest.raises(ComparisonRefused):
        harness.compare([other], baseline_run)


def test_plot_polyline_points_invert(mtl_run, tmp_path):
    svg = plots.plot([mtl_run], "seg_loss", tmp_path / "p.svg").read_text()
    polylines = re.findall(r'points="([^"]+)"', svg)
    assert len(polylines) == 1
    pts = [tuple(map(float, p.split(","))) for p in polylines[0].split()]
    assert len(pts) == 2
    e_range = tuple(map(float, re.search(r'data-epoch-range="([^"]+)"', svg)[1].split()))
    v_range = tuple(map(float, re.search(r'data-value-range="([^"]+)"', svg)[1].split()))
    rows = harness.read_csv(mtl_run / "epochs.csv")
    for (x, y), row in zip(pts, rows):
        epoch, value = plots.from_pixels(x, y, e_range, v_range)
        assert epoch == pytest.approx(float(row["epoch"]), abs=1e-5)
        assert value == pytest.approx(float(row["test_seg"]), abs=1e-5 * (v_range[1] - v_range[0]))


def test_visualize_panels(mtl_run, tiny_dataset, tmp_path):
    sample = tiny_dataset / "test" / "0000.gbs"
    out = plots.visualize(mtl_run / "model.gbgn", sample, tmp_path / "v.ppm")
    img = plots.read_ppm(out)
    assert img.shape == (16, 4 * 32, 3)
    model = TinySegNet.load(mtl_run / "model.gbgn")
    labels, _, _ = plots.predict(model, scenes.Sample.load(sample).left)
    panel = img[:, 32:64].astype(int)
    palette = plots.label_colors(np.arange(model.config.num_classes)).astype(int)
    decoded = np.argmin(((panel[:, :, None, :] - palette[None, None]) ** 2).sum(-1), axis=-1)
    np.testing.assert_array_equal(decoded, labels)


def test_cli_exit_codes(tiny_dataset, tmp_path, capsys):
    assert cli.main(["train", "--dataset", str(tiny_dataset), "--epochs", "0", "--output", str(tmp_path / "x")]) == 2
    assert cli.main(["train", "--dataset", str(tmp_path / "missing"), "--epochs", "1",
                     "--output", str(tmp_path / "y")]) == 4
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"mode = single:normal\nepochs = 5\nbatch_size = 4\nbase_width = 4\ndataset = {tiny_dataset}\n")
    assert cli.main(["train", "--config", str(cfg), "--epochs", "1", "--output", str(tmp_path / "z")]) == 0
    assert len(harness.read_csv(tmp_path / "z" / "epochs.csv")) == 1
    assert "mode = single:normal" in (tmp_path / "z" / "config.txt").read_text()


def test_cli_gen_data_and_selftest(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--train", "3", "--test", "2",
                     "--height", "16", "--width", "32"]) == 0
    assert scenes.read_manifest(tmp_path / "d").n_train == 3
    assert cli.main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out

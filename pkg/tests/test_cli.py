import csv
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from segkit.cli import main
from segkit.config import RunConfig, from_dict, load_config
from segkit.data import ellipse_mask
from segkit.errors import ConfigError

TINY = {
    "crop": None,
    "min_area": 20,
    "network": {"style": "unet", "base_width": 4, "depth": 2},
    "schedule": {"phases": [[2, 0.001], [1, 0.0001]], "batch_size": 8},
}


def _write_config(tmp, **overrides):
    raw = {**TINY, "data_root": str(tmp / "data"), "output_dir": str(tmp / "run"), **overrides}
    path = tmp / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(tmp / "data"), "--count", "30", "--size", "32", "--quiet"]) == 0
    cfg = _write_config(tmp)
    assert main(["train", "--config", str(cfg), "--threads", "1", "--quiet"]) == 0
    return tmp, cfg


# ---------------------------------------------------------------- config

def test_defaults_carry_pipeline_constants():
    d = RunConfig().to_dict()
    assert d["threshold"] == 0.3 and d["min_area"] == 300 and d["crop"] == 512 and d["connectivity"] == 8
    assert d["schedule"]["phases"] == [[10, 0.001], [5, 0.0001]]
    assert d["mean"] == [0.485, 0.456, 0.406] and d["std"] == [0.229, 0.224, 0.225]


def test_config_round_trip():
    cfg = RunConfig()
    again = from_dict(yaml.safe_load(cfg.dump()))
    assert again == cfg and again.dump() == cfg.dump()


@settings(max_examples=40, deadline=None)
@given(threshold=st.floats(0, 1), min_area=st.integers(0, 5000), crop=st.one_of(st.none(), st.integers(1, 1024)),
       width=st.integers(1, 64), style=st.sampled_from(["unet", "vgg_concat_11", "residual_add"]),
       phases=st.lists(st.tuples(st.integers(1, 20), st.floats(1e-6, 1.0)), min_size=1, max_size=3))
def test_config_round_trip_property(threshold, min_area, crop, width, style, phases):
    raw = {"threshold": threshold, "min_area": min_area, "crop": crop,
           "network": {"style": style, "base_width": width},
           "schedule": {"phases": [list(p) for p in phases]}}
    cfg = from_dict(raw)
    assert from_dict(yaml.safe_load(cfg.dump())) == cfg


def test_config_errors_list_every_key():
    raw = {"threshold": 1.5, "min_aera": 3, "network": {"style": "resnet", "depth": "deep"},
           "schedule": {"batch_size": 0}, "augment": {"hflip": 2.0}}
    with pytest.raises(ConfigError) as err:
        from_dict(raw)
    msg = str(err.value)
    for key in ("min_aera", "network.depth"):
        assert key in msg
    with pytest.raises(ConfigError) as err:
        from_dict({"threshold": 1.5, "network": {"style": "resnet"}, "schedule": {"batch_size": 0},
                   "augment": {"hflip": 2.0}})
    msg = str(err.value)
    for key in ("threshold", "network.style", "schedule.batch_size", "augment.hflip"):
        assert key in msg


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(tmp_path / "bad.yaml")
    cfg = _write_config(tmp_path)
    with pytest.raises(ConfigError, match="data_root"):
        load_config(cfg, check_paths=True)


# ---------------------------------------------------------------- split

def _dataset(root, n):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    img = np.zeros((8, 8, 3), np.uint8)
    for i in range(n):
        Image.fromarray(img).save(root / "images" / f"p{i:03d}.png")
        Image.fromarray(img[..., 0]).save(root / "masks" / f"p{i:03d}.png")


def test_split_sizes_and_stability(tmp_path, capsys):
    _dataset(tmp_path / "d", 299)
    out = tmp_path / "folds.csv"
    assert main(["split", "--data-root", str(tmp_path / "d"), "--out", str(out), "--seed", "4"]) == 0
    assert capsys.readouterr().out.strip() == "fold_sizes=60,60,60,60,59"
    first = out.read_bytes()
    assert main(["split", "--data-root", str(tmp_path / "d"), "--out", str(out), "--seed", "4"]) == 0
    assert out.read_bytes() == first
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert len(rows) == 299 and {r["fold"] for r in rows} == {"0", "1", "2", "3", "4"}


def test_split_empty_directory(tmp_path):
    (tmp_path / "d" / "images").mkdir(parents=True)
    out = tmp_path / "folds.csv"
    assert main(["split", "--data-root", str(tmp_path / "d"), "--out", str(out), "--quiet"]) == 1
    assert not out.exists()


# ---------------------------------------------------------------- train

def test_train_outputs(run):
    tmp, _ = run
    rows = list(csv.DictReader((tmp / "run" / "history.csv").read_text().splitlines()))
    assert len(rows) == 3 and [r["phase_rate"] for r in rows] == ["0.001", "0.001", "0.0001"]
    for name in ("last.ckpt", "best.ckpt", "folds.csv", "config.yaml"):
        assert (tmp / "run" / name).is_file()


def test_resume_from_final_checkpoint(run, capsys):
    tmp, cfg = run
    history = (tmp / "run" / "history.csv").read_bytes()
    last = (tmp / "run" / "last.ckpt").read_bytes()
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--resume", "--quiet", "--threads", "1"]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("epochs=3 ")
    assert (tmp / "run" / "history.csv").read_bytes() == history
    assert (tmp / "run" / "last.ckpt").read_bytes() == last
    final = list(csv.DictReader(history.decode().splitlines()))[-1]
    assert f"val_iou={float(final['val_iou'])!r}" in printed


def test_train_missing_data_root(tmp_path, capsys):
    cfg = _write_config(tmp_path, data_root=str(tmp_path / "nowhere"))
    assert main(["train", "--config", str(cfg)]) == 1
    assert str(tmp_path / "nowhere") in capsys.readouterr().err


def test_train_bad_config_lists_keys(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"threshold": 2, "colour": "red", "schedule": {"phases": [[0, 0.1]]}}))
    assert main(["train", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "colour" in err


# ---------------------------------------------------------------- predict and detect

def test_predict(run, tmp_path):
    tmp, _ = run
    images = sorted((tmp / "data" / "images").iterdir())[:10]
    args = ["predict", "--checkpoint", str(tmp / "run" / "last.ckpt"), "--quiet", "--threads", "1",
            "--out", str(tmp_path / "a"), *map(str, images)]
    assert main(args) == 0
    outs = sorted((tmp_path / "a").iterdir())
    assert [p.name for p in outs] == [p.name for p in images]
    for p in outs:
        assert set(np.unique(np.asarray(Image.open(p)))) <= {0, 255}
    args[args.index(str(tmp_path / "a"))] = str(tmp_path / "b")
    assert main(args) == 0
    assert all(p.read_bytes() == (tmp_path / "b" / p.name).read_bytes() for p in outs)


def test_predict_continues_past_bad_inputs(run, tmp_path):
    tmp, _ = run
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    good = sorted((tmp / "data" / "images").iterdir())[0]
    code = main(["predict", "--checkpoint", str(tmp / "run" / "last.ckpt"), "--out", str(tmp_path / "o"),
                 "--quiet", str(bad), str(good)])
    assert code == 1 and (tmp_path / "o" / good.name).is_file()


def test_detect_masks(tmp_path):
    masks = tmp_path / "m"
    masks.mkdir()
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(masks / "empty.png")
    two = np.zeros((64, 64), np.uint8)
    two |= ellipse_mask(two.shape, (16, 16), (11, 11)).astype(np.uint8) * 255
    two |= ellipse_mask(two.shape, (46, 44), (11, 11)).astype(np.uint8) * 255
    Image.fromarray(two).save(masks / "two.png")
    small = np.zeros((64, 64), np.uint8)
    small[20:30, 20:30] = 255
    Image.fromarray(small).save(masks / "small.png")
    out = tmp_path / "d.jsonl"
    assert main(["detect", "--masks", str(masks), "--out", str(out), "--quiet"]) == 0
    recs = {r["id"]: r for r in map(json.loads, out.read_text().splitlines())}
    assert recs["empty"] == {"id": "empty", "present": False, "lesions": []}
    assert recs["small"]["present"] is False
    lesions = recs["two"]["lesions"]
    assert len(lesions) == 2
    assert (round(lesions[0]["y"]), round(lesions[0]["x"])) == (16, 16)
    assert (round(lesions[1]["y"]), round(lesions[1]["x"])) == (46, 44)


def test_detect_from_checkpoint(run, tmp_path):
    tmp, _ = run
    out = tmp_path / "d.jsonl"
    assert main(["detect", "--checkpoint", str(tmp / "run" / "last.ckpt"), "--images",
                 str(tmp / "data" / "images"), "--out", str(out), "--min-area", "20", "--quiet"]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 30 and all(set(r) == {"id", "present", "lesions"} for r in recs)


# ---------------------------------------------------------------- evaluate

def test_evaluate_report(run, tmp_path):
    tmp, cfg = run
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "r"), "--quiet"]) == 0
    rows = list(csv.DictReader((tmp_path / "r" / "report.csv").read_text().splitlines()))
    assert {"IOU", "Dice", "Time"} <= set(rows[0]) and [r["model"] for r in rows] == ["best", "last"]
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert "environment-specific" in report["notes"]["Time"] and "stand-in" in report["notes"]["F1"]
    hist = report["histograms"]
    assert sum(hist["lesions_per_image"]["images"]) == hist["images"] == int(rows[0]["images"]) == 6
    assert sum(hist["lesion_area"]["lesions"]) == hist["lesions"]
    assert hist["lesions"] == sum(n * k for n, k in zip(hist["lesions_per_image"]["lesions"],
                                                        hist["lesions_per_image"]["images"]))
    # byte-identical without timing
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "s"), "--quiet"]) == 0
    for name in ("report.csv", "report.json"):
        assert (tmp_path / "r" / name).read_bytes() == (tmp_path / "s" / name).read_bytes()


def test_evaluate_oracle_predictions(run, tmp_path):
    tmp, cfg = run
    assert main(["evaluate", "--config", str(cfg), "--predictions", str(tmp / "data" / "masks"),
                 "--fold", "0", "--fold", "1", "--timing", "--out", str(tmp_path / "r"), "--quiet"]) == 0
    row = next(csv.DictReader((tmp_path / "r" / "report.csv").read_text().splitlines()))
    assert float(row["IOU"]) == 100.0 and float(row["Dice"]) == 100.0 and float(row["F1"]) == 1.0
    assert float(row["Time"]) > 0 and row["images"] == "12"


# ---------------------------------------------------------------- usage

@pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["predict", "--out", "x"], ["detect", "--out", "x"],
                                  ["synth", "--out", "x", "--threads", "0"], ["split", "--k", "five"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2

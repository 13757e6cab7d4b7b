import csv
import json

import numpy as np
import pytest

from srgan.checkpoint import load_checkpoint
from srgan.cli import _infer_factor, linear_fit_r2, main, profile_depth
from srgan.errors import DataError, FormatError, InvalidArgument, ProvenanceError
from srgan.image_pipeline import ImageU8, load_image, save_image

TINY_SETS = [
    "generator.blocks=1", "generator.width=4",
    "discriminator.widths=[2,2,2,2,4,4,4,4]", "discriminator.dense_width=4",
    "pretrain.lr_segments=[[3,0.001]]", "pretrain.batch_size=2", "pretrain.checkpoint_every=0",
    "gan.lr_segments=[[2,0.0001]]", "gan.batch_size=2", "gan.checkpoint_every=0",
    "gan_loss.content=mse", "gan_loss.tap=null",
]


def sets():
    out = []
    for s in TINY_SETS:
        out += ["--set", s]
    return out


def write_png(path, h, w, seed=0, channels=3):
    rng = np.random.default_rng(seed)
    shape = (h, w, channels) if channels > 1 else (h, w)
    save_image(ImageU8(rng.integers(0, 256, shape, dtype=np.uint8)), path)


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert main(["toy-data", str(d), "--count", "3", "--size", "32"]) == 0
    return d


@pytest.fixture(scope="module")
def pretrained(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    code = main(["train", "srresnet", str(toy_dir / "manifest.txt"), str(out), "--preset", "toy",
                 "--seed", "1"] + sets())
    assert code == 0
    return out


def test_degrade(tmp_path):
    src = tmp_path / "hr"
    src.mkdir()
    write_png(src / "a.png", 96, 96)
    write_png(src / "b.png", 97, 97, 1)
    assert main(["degrade", str(src), str(tmp_path / "lr")]) == 0
    assert load_image(tmp_path / "lr" / "a.png").data.shape == (24, 24, 3)
    assert load_image(tmp_path / "lr" / "b.png").data.shape == (24, 24, 3)
    echo = json.loads((tmp_path / "lr" / "config.json").read_text())
    assert echo["command"] == "degrade" and echo["args"]["factor"] == 4


def test_degrade_empty(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["degrade", str(tmp_path / "empty"), str(tmp_path / "o")]) == DataError.exit_code
    assert "DataError" in capsys.readouterr().err


def test_infer_factor():
    assert _infer_factor((24, 24), (96, 96), "x") == 4
    assert _infer_factor((24, 24), (99, 97), "x") == 4
    with pytest.raises(DataError):
        _infer_factor((25, 25), (96, 96), "x")
    with pytest.raises(DataError):
        _infer_factor((24, 24), (96, 48), "x")


def test_baseline_and_eval(tmp_path):
    hr, lr = tmp_path / "hr", tmp_path / "lr"
    hr.mkdir()
    write_png(hr / "a.png", 48, 40)
    assert main(["degrade", str(hr), str(lr)]) == 0
    for method in ("nearest", "bicubic"):
        out = tmp_path / method
        assert main(["baseline", str(lr), str(hr), str(out), "--method", method]) == 0
        assert load_image(out / "sr" / "a.png").data.shape == (48, 40, 3)
        rows = list(csv.DictReader(open(out / "metrics.csv")))
        assert rows[0]["filename"] == "a.png" and float(rows[0]["psnr_db"]) > 0
    assert main(["eval", str(hr), str(hr), str(tmp_path / "self")]) == 0
    summary = json.loads((tmp_path / "self" / "metrics.json").read_text())
    assert summary["mean_ssim"] == pytest.approx(1.0) and summary["psnr_infinite"] == 1


def test_baseline_bad_ratio(tmp_path):
    (tmp_path / "lr").mkdir()
    (tmp_path / "hr").mkdir()
    write_png(tmp_path / "lr" / "a.png", 25, 25)
    write_png(tmp_path / "hr" / "a.png", 96, 96)
    code = main(["baseline", str(tmp_path / "lr"), str(tmp_path / "hr"), str(tmp_path / "o")])
    assert code == DataError.exit_code


def test_eval_mismatched(tmp_path):
    for d, names in (("a", ["x.png", "y.png"]), ("b", ["x.png"])):
        (tmp_path / d).mkdir()
        for n in names:
            write_png(tmp_path / d / n, 16, 16)
    assert main(["eval", str(tmp_path / "a"), str(tmp_path / "b"), str(tmp_path / "o")]) == DataError.exit_code


def test_train_outputs(pretrained):
    names = {p.name for p in pretrained.iterdir()}
    assert {"config.json", "loss.csv", "loss.png", "final.srck"} <= names
    ck = load_checkpoint(pretrained / "final.srck")
    assert ck.step == 3 and ck.config["phase"] == "pretrain"
    echo = json.loads((pretrained / "config.json").read_text())
    assert echo["config"]["generator"]["width"] == 4 and echo["config"]["pretrain"]["seed"] == 1


def test_train_rerun_identical(toy_dir, pretrained, tmp_path):
    code = main(["train", "srresnet", str(toy_dir / "manifest.txt"), str(tmp_path), "--preset", "toy",
                 "--seed", "1"] + sets())
    assert code == 0
    for f in ("loss.csv", "final.srck"):
        assert (tmp_path / f).read_bytes() == (pretrained / f).read_bytes()
    # the echo differs only in the output path
    a, b = (json.loads((d / "config.json").read_text()) for d in (tmp_path, pretrained))
    assert a["config"] == b["config"]


def test_srgan_needs_init(toy_dir, tmp_path):
    argv = ["train", "srgan", str(toy_dir / "manifest.txt"), str(tmp_path), "--preset", "toy"] + sets()
    assert main(argv) == ProvenanceError.exit_code
    assert main(argv + ["--allow-unpretrained"]) == 0


def test_srgan_from_pretrained(toy_dir, pretrained, tmp_path):
    code = main(["train", "srgan", str(toy_dir / "manifest.txt"), str(tmp_path), "--preset", "toy",
                 "--init", str(pretrained / "final.srck")] + sets())
    assert code == 0
    ck = load_checkpoint(tmp_path / "final.srck")
    assert ck.config["phase"] == "gan" and ck.step == 2
    assert any(k.startswith("discriminator/") for k in ck.tensors)


def test_unknown_override(toy_dir, tmp_path):
    code = main(["train", "srresnet", str(toy_dir / "manifest.txt"), str(tmp_path), "--preset", "toy",
                 "--set", "generator.depth=2"])
    assert code == InvalidArgument.exit_code


@pytest.mark.parametrize("shape,out", [((24, 24), (96, 96)), ((17, 13), (68, 52))])
def test_infer_sizes(pretrained, tmp_path, shape, out):
    write_png(tmp_path / "in.png", *shape)
    assert main(["infer", str(pretrained / "final.srck"), str(tmp_path / "in.png"), str(tmp_path / "o.png")]) == 0
    assert load_image(tmp_path / "o.png").data.shape == out + (3,)


def test_infer_directory_and_gray(pretrained, tmp_path):
    src = tmp_path / "lr"
    src.mkdir()
    write_png(src / "g.png", 6, 5, channels=1)
    write_png(src / "c.png", 4, 4)
    assert main(["infer", str(pretrained / "final.srck"), str(src), str(tmp_path / "sr")]) == 0
    assert load_image(tmp_path / "sr" / "g.png").data.shape == (24, 20, 3)
    assert (tmp_path / "sr" / "config.json").exists()


def test_infer_corrupted_checkpoint(pretrained, tmp_path):
    raw = (pretrained / "final.srck").read_bytes()
    (tmp_path / "bad.srck").write_bytes(raw[: len(raw) // 2])
    write_png(tmp_path / "in.png", 8, 8)
    code = main(["infer", str(tmp_path / "bad.srck"), str(tmp_path / "in.png"), str(tmp_path / "o.png")])
    assert code == FormatError.exit_code


def test_profile_depth_rows():
    rows = profile_depth([1, 2], "both", input_size=8, repeats=2, width=4)
    assert [(r["blocks"], r["skip"]) for r in rows] == [(1, "on"), (1, "off"), (2, "on"), (2, "off")]
    assert rows[0]["params"] == rows[1]["params"] < rows[2]["params"]
    assert all(r["median_s"] > 0 for r in rows)
    with pytest.raises(InvalidArgument):
        profile_depth([], "on")
    with pytest.raises(InvalidArgument):
        profile_depth([1], "sideways")


def test_profile_depth_command(tmp_path):
    code = main(["profile-depth", str(tmp_path), "--blocks", "1,2,3", "--input-size", "8",
                 "--repeats", "2", "--width", "4"])
    assert code == 0
    data = json.loads((tmp_path / "depth_profile.json").read_text())
    assert len(data["rows"]) == 6 and set(data["linear_fit_r2"]) == {"on", "off"}
    assert (tmp_path / "depth_profile.png").stat().st_size > 0
    assert main(["profile-depth", str(tmp_path), "--blocks", "0"]) == InvalidArgument.exit_code


def test_linear_fit_r2():
    assert linear_fit_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert linear_fit_r2([1, 2, 3, 4], [1, 3, 1, 3]) < 0.5

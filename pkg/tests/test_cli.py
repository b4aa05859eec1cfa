"""Command-line interface: exit codes, error lines, file round trips."""

import json

import numpy as np
import pytest

from latentvox import codec
from latentvox.cli import main
from latentvox.pcloud import read_ply, write_ply


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    # Untrained weights: top-N decode keeps the output non-empty regardless.
    cfg = codec.CodecConfig(decode_mode="topn")
    model = codec.CodecModel.fresh(cfg, 0, np.random.default_rng(3))
    path = tmp_path_factory.mktemp("model") / "codec.lbcm"
    model.save(path)
    return str(path)


@pytest.fixture
def cloud_path(tmp_path, rng):
    pts = rng.uniform(-1, 1, size=(200, 3))
    path = tmp_path / "cloud.ply"
    write_ply(path, pts)
    return str(path)


def test_encode_decode_round_trip(tmp_path, model_path, cloud_path, capsys):
    stream_path = str(tmp_path / "cloud.lbpc")
    out_path = str(tmp_path / "rec.ply")
    assert main(["encode", "--model", model_path, "--input", cloud_path,
                 "--output", stream_path]) == 0
    assert "bpp" in capsys.readouterr().out
    assert main(["decode", "--model", model_path, "--input", stream_path,
                 "--output", out_path]) == 0
    assert "voxels" in capsys.readouterr().out
    pts, bit_depth = read_ply(out_path)
    assert bit_depth == codec.CodecConfig().bit_depth
    assert len(pts) > 0 and np.asarray(pts).shape[1] == 3


def test_decode_corrupted_stream_names_crc(tmp_path, model_path, cloud_path,
                                           capsys):
    stream_path = tmp_path / "cloud.lbpc"
    main(["encode", "--model", model_path, "--input", cloud_path,
          "--output", str(stream_path)])
    capsys.readouterr()
    data = bytearray(stream_path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    stream_path.write_bytes(bytes(data))
    rc = main(["decode", "--model", model_path, "--input", str(stream_path),
               "--output", str(tmp_path / "rec.ply")])
    err = capsys.readouterr().err
    assert rc == 2
    assert err.startswith("error:")
    assert "crc" in err
    assert err.count("\n") == 1  # single machine-parsable line


def test_missing_model_exits_2(tmp_path, cloud_path, capsys):
    rc = main(["encode", "--model", str(tmp_path / "nope.lbcm"),
               "--input", cloud_path, "--output", str(tmp_path / "x.lbpc")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error: io:")


def test_unknown_subcommand_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--input", "a.ply", "--output", "b.lbpc"])
    assert exc.value.code == 2
    assert "--model" in capsys.readouterr().err


def test_gen_data_step(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "seed": 5,
        "dataset": {"num_classes": 2, "clouds_per_class": 4,
                    "points_per_cloud": 64}}))
    out = tmp_path / "out"
    rc = main(["gen-data", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    assert "gen-data: done" in capsys.readouterr().out
    manifest = json.loads((out / "dataset" / "manifest.json").read_text())
    assert len(manifest["clouds"]) == 8
    run_cfg = json.loads((out / "reports" / "run_config.json").read_text())
    assert run_cfg["seed"] == 5


def test_seed_flag_overrides_config(tmp_path, capsys):
    out = tmp_path / "out"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "seed": 5,
        "dataset": {"num_classes": 2, "clouds_per_class": 2,
                    "points_per_cloud": 32}}))
    rc = main(["gen-data", "--config", str(cfg_path), "--seed", "77",
               "--out", str(out)])
    assert rc == 0
    capsys.readouterr()
    run_cfg = json.loads((out / "reports" / "run_config.json").read_text())
    assert run_cfg["seed"] == 77

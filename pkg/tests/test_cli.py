import json

import numpy as np
import pytest
from PIL import Image

from latentproto.cli import build_parser, main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth -> mine -> train -> bank chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    pseudo = root / "pseudo"
    ckpt = root / "model.ckpt"
    assert main(["synth", "--out", str(data), "--images", "14", "--size", "64",
                 "--seed", "0"]) == 0
    assert main(["mine", "--data", str(data), "--fold", "0", "--clusters", "2",
                 "--seed", "0", "--out", str(pseudo)]) == 0
    assert main(["train", "--data", str(data), "--fold", "0", "--pseudo", str(pseudo),
                 "--out", str(ckpt), "--iters", "3", "--crop", "64", "--seed", "0"]) == 0
    assert main(["bank", "--checkpoint", str(ckpt), "--data", str(data),
                 "--fold", "0", "--pseudo", str(pseudo)]) == 0
    return root, data, pseudo, ckpt


def test_parser_requires_command():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([])
    assert exc.value.code == 2


def test_unknown_flag_exit_code():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["synth", "--bogus"])
    assert exc.value.code == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    assert main(["mine", "--data", str(tmp_path), "--out", str(tmp_path / "p")]) == 1
    assert "error:" in capsys.readouterr().err


def test_synth_outputs(pipeline):
    _, data, _, _ = pipeline
    assert len(list((data / "images").glob("*.png"))) == 14
    assert (data / "splits.json").exists()
    assert (data / "oracle" / "legend.json").exists()


def test_mine_outputs(pipeline):
    _, _, pseudo, _ = pipeline
    manifest = json.loads((pseudo / "manifest.json").read_text())
    assert manifest["k"] == 2
    assert len(manifest["entries"]) == 14
    assert (pseudo / "repset.pkl").exists()
    assert (pseudo / "mining_encoder.pkl").exists()


def test_mine_with_trained_checkpoint(pipeline, tmp_path):
    _, data, _, ckpt = pipeline
    out = tmp_path / "p2"
    assert main(["mine", "--data", str(data), "--fold", "0", "--clusters", "2",
                 "--seed", "0", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["entries"]) == 14
    # the persisted mining encoder mirrors the checkpoint's EMA weights
    import pickle

    payload = pickle.loads((out / "mining_encoder.pkl").read_bytes())
    assert payload["channels"] == 16


def test_train_outputs(pipeline):
    root, _, _, ckpt = pipeline
    assert ckpt.exists()
    log = ckpt.with_suffix(".log").read_text().strip().splitlines()
    assert len(log) == 3 and "l_pseudo=" in log[0]


def test_eval_reports(pipeline):
    root, data, _, ckpt = pipeline
    out = root / "report"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data),
                 "--fold", "0", "--episodes", "5", "--seeds", "0", "1",
                 "--out", str(out)]) == 0
    payload = json.loads((root / "report.json").read_text())
    assert len(payload["per_seed_miou"]) == 2
    assert 0.0 <= payload["mean_miou"] <= 1.0
    assert "mIoU" in (root / "report.txt").read_text()


def test_eval_with_rectification(pipeline):
    root, data, _, ckpt = pipeline
    out = root / "rect"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data),
                 "--fold", "0", "--episodes", "3", "--seeds", "0",
                 "--rectify-bg", "--rectify-fg", "--out", str(out)]) == 0
    assert (root / "rect.json").exists()


def test_fold_minus_one_trains_on_all_classes(pipeline, tmp_path):
    root, data, _, _ = pipeline
    out = tmp_path / "all.ckpt"
    assert main(["train", "--data", str(data), "--fold", "-1", "--no-mine",
                 "--out", str(out), "--iters", "1", "--crop", "64",
                 "--seed", "0"]) == 0
    assert out.exists()


def test_visualize_panels(pipeline, tmp_path):
    root, data, pseudo, ckpt = pipeline
    out = tmp_path / "viz"
    assert main(["visualize", "--checkpoint", str(ckpt), "--data", str(data),
                 "--fold", "0", "--count", "2", "--out", str(out),
                 "--pseudo", str(pseudo)]) == 0
    assert len(list(out.glob("panel_*.png"))) == 2
    assert (out / "pseudo_legend.png").exists()
    panel = np.asarray(Image.open(out / "panel_000.png"))
    assert panel.ndim == 3

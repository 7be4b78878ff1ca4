import csv
import json

import numpy as np
import pytest
from PIL import Image

from fusionscope.harness.cli import main
from fusionscope.harness.tables import read_csv
from fusionscope.synthetic import write_blob_dataset

CONFIG = """\
output_dir = "run"
seed = 0

[dataset]
name = "blobs"
manifest = "data/manifest.csv"
image_size = 64

[folds]
k = 4
seed = 0

[backbones.global]
kind = "GLOBAL_RESNET_STYLE"
preset = "tiny"

[backbones.local]
kind = "LOCAL_BAGNET_STYLE"
preset = "tiny"

[fusion]
strategy = "gate"
fuse_channels = 8

[train]
batch_size = 4
max_epochs = 1
lr_step = 5

[augment]
flip = false
rotate = false
jitter = false
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = write_blob_dataset(root / "data", n_images=20, samples_per_patient=1)
    # give negatives a mask as well so every validation image is scored for coherence
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if not r["mask_path"]:
            m = np.zeros((64, 64), np.uint8)
            m[20:40, 20:40] = 255
            r["mask_path"] = f"masks/neg_{r['image_path'][-8:]}"
            Image.fromarray(m).save(root / "data" / r["mask_path"])
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    cfg = root / "exp.toml"
    cfg.write_text(CONFIG)
    assert main(["train", "--config", str(cfg), "--fold", "0"]) == 0
    return root, cfg


def test_prepare_folds_deterministic(tmp_path):
    manifest = write_blob_dataset(tmp_path / "d", n_images=30, samples_per_patient=3)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["prepare-folds", "--manifest", str(manifest), "--k", "5", "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["prepare-folds", "--manifest", str(manifest), "--k", "1", "--out", str(a)]) == 1


def test_validation_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 1
    assert "does not exist" in capsys.readouterr().err
    assert main(["train", "--config", "x.toml", "--bogus"]) == 1
    assert main(["no-such-command"]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text('[dataset]\nmanifest = "m.csv"\n[fusion]\nstrategy = "sum"\n')
    assert main(["train", "--config", str(bad)]) == 1
    assert "fusion.strategy" in capsys.readouterr().err


def test_report_on_empty_run_is_runtime_error(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--run-dir", str(tmp_path / "empty")]) == 2
    assert "missing run artifacts" in capsys.readouterr().err


def test_xai_eval_five_masked_images(trained):
    root, cfg = trained
    assert main(["xai-eval", "--config", str(cfg), "--method", "fusion_gate", "--steps", "10"]) == 0
    header, rows = read_csv(root / "run" / "xai" / "blobs__fusion_gate.csv")
    assert len(rows) == 5
    assert {"rma", "rra", "ds"} <= set(header)
    for r in rows:
        assert 0 <= r["rma"] <= 1 and 0 <= r["rra"] <= 1 and -1 <= r["ds"] <= 1
    curve = json.loads(next((root / "run" / "xai" / "curves" / "blobs__fusion_gate").glob("*.json")).read_text())
    assert len(curve["morf"]["q"]) == 10 and curve["morf"]["ranking_seed"] is not None


def test_xai_eval_parallel_matches_serial(trained, tmp_path):
    root, cfg = trained
    assert main(["xai-eval", "--config", str(cfg), "--method", "local", "--steps", "4", "--name", "serial"]) == 0
    assert main(["xai-eval", "--config", str(cfg), "--method", "local", "--steps", "4", "--workers", "3",
                 "--name", "parallel"]) == 0
    xai = root / "run" / "xai"
    s = read_csv(xai / "blobs__serial.csv")[1]
    p = read_csv(xai / "blobs__parallel.csv")[1]
    for a, b in zip(s, p):
        a.pop("method"), b.pop("method")
        assert a == b


def test_wrong_method_for_model(trained):
    _, cfg = trained
    assert main(["xai-eval", "--config", str(cfg), "--method", "fusion_concat"]) == 1


def test_saliency_export_evaluate_report(trained, monkeypatch):
    root, cfg = trained
    assert main(["saliency", "--config", str(cfg), "--source", "fusion_gate", "--overlay", "--limit", "2"]) == 0
    assert len(list((root / "run" / "saliency" / "fusion_gate").glob("*.png"))) == 2
    assert main(["evaluate", "--config", str(cfg)]) == 0
    assert (root / "run" / "evaluation" / "blobs__Fusion_Gate.json").is_file()
    assert main(["report", "--config", str(cfg)]) == 0
    _, perf = read_csv(root / "run" / "report" / "performance.csv")
    assert [r["model"] for r in perf][:3] == ["Global", "Local", "Fusion_Gate"]
    assert main(["xai-eval", "--config", str(cfg), "--method", "external", "--limit", "2",
                 "--saliency-dir", str(root / "run" / "saliency" / "fusion_gate")]) == 0


def test_coherence_command(trained, tmp_path):
    root, cfg = trained
    sal_dir = root / "run" / "saliency" / "fusion_gate"
    if not sal_dir.is_dir():
        assert main(["saliency", "--config", str(cfg), "--source", "fusion_gate", "--limit", "2"]) == 0
    ids = sorted(p.stem for p in sal_dir.glob("*.png"))
    ann = tmp_path / "ann.csv"
    ref = tmp_path / "ref.png"
    m = np.zeros((64, 64), np.uint8)
    m[10:30, 10:30] = 255
    Image.fromarray(m).save(ref)
    ann.write_text("annotator,image_id,annotation_path,reference_path\n"
                   + "".join(f"r1,{i},ref.png,ref.png\n" for i in ids))
    out = tmp_path / "coh.csv"
    assert main(["coherence", "--annotations", str(ann), "--saliency-dir", str(sal_dir), "--out", str(out)]) == 0
    _, rows = read_csv(out, text_columns=("image_id", "annotator"))
    assert len(rows) == len(ids) and all(r["annotation_rma"] == 1.0 for r in rows)


def test_env_overrides_output(trained, tmp_path, monkeypatch):
    root, cfg = trained
    monkeypatch.setenv("FUSIONSCOPE_OUT", str(tmp_path / "alt"))
    assert main(["prepare-folds", "--config", str(cfg)]) == 0
    assert (tmp_path / "alt" / "folds.json").is_file()

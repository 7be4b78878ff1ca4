import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from fusionscope.dataio import AugmentConfig, DatasetManifest, SampleRecord, assign_patient_folds
from fusionscope.model import DualBranchNet
from fusionscope.synthetic import make_blob_image, write_blob_dataset
from fusionscope.dataio import load_manifest
from fusionscope.training import (BranchWeights, CheckpointError, EarlyStopping, FoldError, TrainConfig,
                                  TrainHistory, TrainingDiverged, branch_losses, config_hash, load_checkpoint,
                                  make_optimizers, predict, run_cross_validation, save_checkpoint, total_loss,
                                  train_fold)


def _blob_arrays(n, seed=0, size=64):
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for i in range(n):
        img, _ = make_blob_image(rng, size=size, blob=bool(i % 2))
        imgs.append(np.stack([img] * 3))
        labels.append(i % 2)
    return np.stack(imgs).astype(np.float32), np.array(labels)


def _logits_with_ce(ce):
    """Two-class logits whose mean cross-entropy against label 0 equals ``ce``."""
    p = np.exp(-ce)
    return torch.tensor([[0.0, np.log((1 - p) / p)]], dtype=torch.float64)


# -- loss -------------------------------------------------------------------


def test_weighted_sum_example():
    labels = torch.tensor([0])
    lg, ll, lf = _logits_with_ce(1.0), _logits_with_ce(2.0), _logits_with_ce(3.0)
    parts = branch_losses(lg, ll, lf, labels)
    np.testing.assert_allclose([p.item() for p in parts], [1.0, 2.0, 3.0], atol=1e-12)
    assert abs(total_loss(lg, ll, lf, labels, BranchWeights(0.3, 0.3, 0.4)).item() - 2.1) <= 1e-12


def test_equal_losses_give_that_loss():
    labels = torch.tensor([0, 1, 1])
    logits = torch.randn(3, 2, dtype=torch.float64)
    ce = branch_losses(logits, logits, logits, labels)[0].item()
    for w in [(0.3, 0.3, 0.4), (1.0, 0.0, 0.0), (0.2, 0.5, 0.3)]:
        assert total_loss(logits, logits, logits, labels, BranchWeights(*w)).item() == pytest.approx(ce, abs=1e-12)


def test_default_weights_and_validation():
    assert BranchWeights() == BranchWeights(0.3, 0.3, 0.4)
    with pytest.raises(ValueError):
        BranchWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        BranchWeights(-0.1, 0.6, 0.5)


def test_label_out_of_range():
    logits = torch.zeros(2, 2)
    with pytest.raises(ValueError, match="labels"):
        total_loss(logits, logits, logits, torch.tensor([0, 2]))


def test_loss_order_invariant():
    labels = torch.tensor([0, 1, 1, 0, 1])
    a, b, c = torch.randn(5, 2), torch.randn(5, 2), torch.randn(5, 2)
    perm = torch.randperm(5)
    torch.testing.assert_close(total_loss(a, b, c, labels), total_loss(a[perm], b[perm], c[perm], labels[perm]))


def test_loss_reaches_all_branches():
    model = DualBranchNet(tiny_model_config()).train()
    out = model(torch.randn(4, 3, 64, 64))
    total_loss(out["global"], out["local"], out["fusion"], torch.tensor([0, 1, 0, 1])).backward()
    for name, params in model.parameter_groups().items():
        norm = sum(float(p.grad.norm()) for p in params if p.grad is not None)
        assert norm > 0, name


# -- configuration / optimisers --------------------------------------------


def test_presets():
    busi, dm = TrainConfig.busi(), TrainConfig.distal_myopathy()
    assert (busi.lr_g, busi.lr_l, busi.lr_f) == (0.0010, 0.005, 0.0011)
    assert (busi.wd_g, busi.wd_l, busi.wd_f, busi.dropout_fusion) == (2.6e-4, 5e-4, 4.4e-4, 0.25)
    assert (dm.lr_g, dm.lr_l, dm.lr_f) == (0.0046, 0.0050, 0.0037)
    assert (dm.wd_g, dm.wd_l, dm.wd_f, dm.dropout_fusion) == (1.15e-4, 5e-4, 4.17e-4, 0.29)
    assert busi.batch_size == 16 and busi.momentum == 0.9 and busi.patience == 10
    assert busi.lr_step == 5 and busi.lr_gamma == 0.1
    with pytest.raises(ValueError):
        TrainConfig(lr_g=0.0)


def test_three_optimisers_with_step_decay():
    model = DualBranchNet(tiny_model_config())
    cfg = TrainConfig.busi()
    opts, scheds = make_optimizers(model, cfg)
    assert set(opts) == {"global", "local", "fusion"}
    for name, o in opts.items():
        g = o.param_groups[0]
        assert g["momentum"] == 0.9
        assert g["lr"] == getattr(cfg, f"lr_{name[0]}") and g["weight_decay"] == getattr(cfg, f"wd_{name[0]}")
    ids = [{id(p) for p in o.param_groups[0]["params"]} for o in opts.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == len(list(model.parameters()))
    for _ in range(5):
        for o in opts.values():
            o.step()
        for s in scheds.values():
            s.step()
    assert opts["global"].param_groups[0]["lr"] == pytest.approx(0.1 * cfg.lr_g, rel=1e-12)


# -- early stopping and history --------------------------------------------


def test_early_stopping_on_worsening_loss():
    stopper = EarlyStopping(10)
    epoch = 0
    for epoch in range(1, 100):
        if stopper.step(1.0 + epoch):
            break
    assert epoch == 11 and stopper.best_epoch == 1


def test_early_stopping_tracks_improvement():
    stopper = EarlyStopping(2)
    flags = [stopper.step(v) for v in (3.0, 2.0, 2.5, 1.0, 1.5, 1.2)]
    assert flags == [False, False, False, False, False, True]
    assert stopper.best_epoch == 4


def test_history_round_trip(tmp_path):
    h = TrainHistory([{"epoch": 1, "val_loss": 0.5}, {"epoch": 2, "val_loss": 0.4}, {"epoch": 3, "val_loss": 0.45}], 2)
    back = TrainHistory.load(h.save(tmp_path / "h.jsonl"))
    assert back == h


# -- training loop ----------------------------------------------------------


def _tiny_train_config(**kw):
    base = dict(lr_g=0.01, lr_l=0.01, lr_f=0.05, batch_size=8, max_epochs=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_fold_history_and_reproducibility():
    x, y = _blob_arrays(24)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        model, hist = train_fold(DualBranchNet(tiny_model_config()), (x[:16], y[:16]), (x[16:], y[16:]),
                                 _tiny_train_config(), AugmentConfig(flip=True))
        runs.append((model, hist))
    (m1, h1), (m2, h2) = runs
    assert [r["epoch"] for r in h1.records] == [1, 2]
    assert 1 <= h1.best_epoch <= 2
    assert h1.records == h2.records
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)
    rec = h1.records[0]
    for key in ("train_loss_g", "val_loss_l", "val_loss", "val_acc_f", "lr_g", "lr_f"):
        assert key in rec


def test_train_fold_returns_best_checkpoint():
    x, y = _blob_arrays(24, seed=1)
    torch.manual_seed(0)
    model, hist = train_fold(DualBranchNet(tiny_model_config()), (x[:16], y[:16]), (x[16:], y[16:]),
                             _tiny_train_config(max_epochs=4, lr_f=0.5, lr_g=0.2, lr_l=0.2))
    best = min(r["val_loss"] for r in hist.records)
    assert hist.records[hist.best_epoch - 1]["val_loss"] == best
    # re-evaluating the returned model reproduces the best epoch's validation loss
    with torch.no_grad():
        out = model(torch.as_tensor(x[16:]))
        val = total_loss(out["global"], out["local"], out["fusion"], torch.as_tensor(y[16:])).item()
    assert val == pytest.approx(best, rel=1e-5)


def test_divergence_aborts():
    x, y = _blob_arrays(8)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_fold(DualBranchNet(tiny_model_config()), (x, y), (x, y), _tiny_train_config(batch_size=8))


def test_empty_split_rejected():
    x, y = _blob_arrays(4)
    with pytest.raises(ValueError):
        train_fold(DualBranchNet(tiny_model_config()), (x[:0], y[:0]), (x, y), _tiny_train_config())


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = DualBranchNet(tiny_model_config())
    model.train()
    model(torch.randn(4, 3, 64, 64))  # move BN statistics off their defaults
    model.eval()
    path = save_checkpoint(model, tmp_path / "m.pt", epoch=3)
    loaded = load_checkpoint(path, model.config)
    x = torch.randn(2, 3, 64, 64)
    a, b = model(x), loaded(x)
    for key in ("global", "local", "fusion", "alpha"):
        assert torch.equal(a[key], b[key])
    for (k1, v1), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    assert path.stat().st_size < 10 * 2**20


def test_checkpoint_hash_mismatch(tmp_path):
    model = DualBranchNet(tiny_model_config())
    path = save_checkpoint(model, tmp_path / "m.pt")
    other = tiny_model_config(strategy="concat")
    assert config_hash(other) != config_hash(model.config)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, other)
    blob = torch.load(path, weights_only=False)
    blob["version"] = 99
    torch.save(blob, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pt")


# -- cross-validation --------------------------------------------------------


def test_cross_validation_two_folds(tmp_path):
    manifest = load_manifest(write_blob_dataset(tmp_path / "data", n_images=16, seed=2))
    folds = assign_patient_folds(manifest, 2, seed=0)
    cfg = _tiny_train_config(max_epochs=1)
    results = run_cross_validation(manifest, folds, tiny_model_config(), cfg, tmp_path / "run")
    assert [r.fold for r in results] == [0, 1]
    for r in results:
        assert r.checkpoint.is_file() and (r.checkpoint.parent / "history.jsonl").is_file()
        assert r.probabilities["fusion"].shape == (len(r.val_indices), 2)
        assert sorted(r.labels.tolist()) == sorted(manifest.labels[r.val_indices].tolist())
    again = run_cross_validation(manifest, folds, tiny_model_config(), cfg, None, only_folds=[1])
    np.testing.assert_array_equal(again[0].probabilities["fusion"], results[1].probabilities["fusion"])


def test_fold_failure_names_fold(tmp_path):
    samples = [SampleRecord(tmp_path / f"missing{i}.png", i % 2, f"p{i}") for i in range(4)]
    manifest = DatasetManifest(samples)
    folds = assign_patient_folds(manifest, 2, 0)
    with pytest.raises(FoldError) as err:
        run_cross_validation(manifest, folds, tiny_model_config(), _tiny_train_config(), None)
    assert err.value.fold == 0 and "fold 0" in str(err.value)


def test_predict_probabilities():
    model = DualBranchNet(tiny_model_config())
    probs = predict(model, np.random.default_rng(0).random((5, 3, 64, 64)), batch_size=2)
    for p in probs.values():
        assert p.shape == (5, 2)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)

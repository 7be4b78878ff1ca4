"""Joint training of the global, local and fusion branches."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import AugmentConfig, DatasetManifest, FoldAssignment, augment, load_split
from .model import BRANCHES, DualBranchNet, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold


@dataclass
class BranchWeights:
    w_g: float = 0.3
    w_l: float = 0.3
    w_f: float = 0.4

    def __post_init__(self):
        if min(self.w_g, self.w_l, self.w_f) < 0:
            raise ValueError("branch weights must be non-negative")
        if abs(self.w_g + self.w_l + self.w_f - 1.0) > 1e-9:
            raise ValueError(f"branch weights must sum to 1, got {self.w_g + self.w_l + self.w_f}")


@dataclass
class TrainConfig:
    # defaults: BUSI row of the tuned hyperparameters
    lr_g: float = 0.0010
    lr_l: float = 0.005
    lr_f: float = 0.0011
    wd_g: float = 2.6e-4
    wd_l: float = 5.0e-4
    wd_f: float = 4.4e-4
    dropout_fusion: float = 0.25
    momentum: float = 0.9
    batch_size: int = 16
    max_epochs: int = 60
    patience: int = 10
    lr_step: int = 5
    lr_gamma: float = 0.1
    seed: int = 0
    weights: BranchWeights = field(default_factory=BranchWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = BranchWeights(**self.weights)
        for name in ("lr_g", "lr_l", "lr_f", "batch_size", "max_epochs", "patience", "lr_step", "lr_gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("wd_g", "wd_l", "wd_f", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def busi(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def distal_myopathy(cls, **overrides) -> "TrainConfig":
        params = dict(lr_g=0.0046, lr_l=0.0050, lr_f=0.0037, wd_g=1.15e-4, wd_l=5.0e-4, wd_f=4.17e-4,
                      dropout_fusion=0.29)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def _check_labels(labels: torch.Tensor, n_classes: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")


def branch_losses(logits_g, logits_l, logits_f, labels) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    _check_labels(labels, logits_f.shape[-1])
    return (F.cross_entropy(logits_g, labels), F.cross_entropy(logits_l, labels),
            F.cross_entropy(logits_f, labels))


def total_loss(logits_g, logits_l, logits_f, labels, weights: BranchWeights = BranchWeights()) -> torch.Tensor:
    """Weighted sum of the three mean cross-entropies."""
    l_g, l_l, l_f = branch_losses(logits_g, logits_l, logits_f, labels)
    return weights.w_g * l_g + weights.w_l * l_l + weights.w_f * l_f


# --------------------------------------------------------------------------
# early stopping / history
# --------------------------------------------------------------------------


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs (epochs are 1-based)."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def step(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch = loss, self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainHistory":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        best = min(records, key=lambda r: r["val_loss"])["epoch"] if records else 0
        return cls(records, best)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def make_optimizers(model: DualBranchNet, config: TrainConfig):
    groups = model.parameter_groups()
    settings = {"global": (config.lr_g, config.wd_g), "local": (config.lr_l, config.wd_l),
                "fusion": (config.lr_f, config.wd_f)}
    optimizers = {
        name: torch.optim.SGD(groups[name], lr=lr, momentum=config.momentum, weight_decay=wd)
        for name, (lr, wd) in settings.items()
    }
    schedulers = {name: torch.optim.lr_scheduler.StepLR(opt, config.lr_step, config.lr_gamma)
                  for name, opt in optimizers.items()}
    return optimizers, schedulers


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


@torch.no_grad()
def predict(model: DualBranchNet, images, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode class probabilities per branch: ``{branch: (N, n_classes)}``."""
    was_training = model.training
    model.eval()
    chunks = {b: [] for b in BRANCHES}
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    for start in range(0, len(images), batch_size):
        out = model(images[start:start + batch_size])
        for b in BRANCHES:
            chunks[b].append(torch.softmax(out[b], dim=-1).double().numpy())
    model.train(was_training)
    n_classes = model.config.num_classes
    return {b: np.concatenate(c) if c else np.zeros((0, n_classes)) for b, c in chunks.items()}


@torch.no_grad()
def _evaluate(model, images, labels, weights, batch_size):
    model.eval()
    sums = np.zeros(4)
    correct = np.zeros(3)
    n = len(images)
    for start in range(0, n, batch_size):
        xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
        out = model(xb)
        parts = branch_losses(out["global"], out["local"], out["fusion"], yb)
        tot = weights.w_g * parts[0] + weights.w_l * parts[1] + weights.w_f * parts[2]
        sums += len(xb) * np.array([p.item() for p in parts] + [tot.item()])
        correct += np.array([(out[b].argmax(1) == yb).sum().item() for b in BRANCHES])
    return sums / max(n, 1), correct / max(n, 1)


def train_fold(model: DualBranchNet, train: tuple, val: tuple, config: TrainConfig,
               augment_config: Optional[AugmentConfig] = None, optimizer_state_out: Optional[dict] = None):
    """Train with three SGD optimisers and step schedules; return the best-val-loss model and its history.

    ``train`` and ``val`` are ``(images, labels)`` pairs of arrays/tensors.
    """
    x_tr = torch.as_tensor(np.asarray(train[0]), dtype=torch.float32)
    y_tr = torch.as_tensor(np.asarray(train[1]), dtype=torch.long)
    x_va = torch.as_tensor(np.asarray(val[0]), dtype=torch.float32)
    y_va = torch.as_tensor(np.asarray(val[1]), dtype=torch.long)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("train and validation splits must be non-empty")
    seed_everything(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    aug_rng = np.random.default_rng(config.seed)
    optimizers, schedulers = make_optimizers(model, config)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    best_opt = {k: copy.deepcopy(o.state_dict()) for k, o in optimizers.items()}

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        perm = torch.randperm(len(x_tr), generator=gen)
        sums, seen = np.zeros(4), 0
        lrs = {f"lr_{k[0]}": o.param_groups[0]["lr"] for k, o in optimizers.items()}
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            xb = x_tr[idx]
            if augment_config is not None:
                xb = torch.from_numpy(np.stack([augment(x.numpy(), augment_config, aug_rng) for x in xb]))
            out = model(xb)
            parts = branch_losses(out["global"], out["local"], out["fusion"], y_tr[idx])
            w = config.weights
            loss = w.w_g * parts[0] + w.w_l * parts[1] + w.w_f * parts[2]
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                       f"{[p.item() for p in parts]}")
            for opt in optimizers.values():
                opt.zero_grad()
            loss.backward()
            for opt in optimizers.values():
                opt.step()
            sums += len(idx) * np.array([p.item() for p in parts] + [loss.item()])
            seen += len(idx)
        for sched in schedulers.values():
            sched.step()
        train_losses = sums / max(seen, 1)
        val_losses, val_acc = _evaluate(model, x_va, y_va, config.weights, config.batch_size)
        if not np.isfinite(val_losses).all():
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch}
        for i, b in enumerate(("g", "l", "f", "total")):
            record[f"train_loss_{b}"] = float(train_losses[i])
            record[f"val_loss_{b}"] = float(val_losses[i])
        record["val_loss"] = float(val_losses[3])
        record.update({f"val_acc_{b[0]}": float(a) for b, a in zip(BRANCHES, val_acc)})
        record.update(lrs)
        history.records.append(record)
        stop = stopper.step(record["val_loss"])
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
            best_opt = {k: copy.deepcopy(o.state_dict()) for k, o in optimizers.items()}
        logger.info("epoch %d: train %.4f val %.4f acc(f) %.3f", epoch, train_losses[3], val_losses[3], val_acc[2])
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    if optimizer_state_out is not None:
        optimizer_state_out.update(best_opt)
    return model, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: DualBranchNet, path: str | Path, epoch: Optional[int] = None,
                    optimizer_state: Optional[dict] = None, train_config: Optional[TrainConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer_state or {},
        "train_config": train_config.to_dict() if train_config else None,
        "epoch": epoch,
    }, path)
    return path


def load_checkpoint(path: str | Path, model_config: Optional[ModelConfig] = None) -> DualBranchNet:
    """Rebuild the model stored at ``path``; ``model_config``, if given, must hash to the stored config."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {blob.get('version')} != {CHECKPOINT_VERSION}")
    stored = ModelConfig(**blob["model_config"])
    if config_hash(stored) != blob["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if model_config is not None and config_hash(model_config) != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash {blob['config_hash']} does not match the requested "
                              f"config ({config_hash(model_config)})")
    model = DualBranchNet(stored)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    history: TrainHistory
    labels: np.ndarray
    probabilities: dict
    val_indices: list
    checkpoint: Optional[Path] = None


def run_cross_validation(manifest: DatasetManifest, folds: FoldAssignment, model_config: ModelConfig,
                         train_config: TrainConfig, out_dir: Optional[str | Path] = None,
                         augment_config: Optional[AugmentConfig] = None,
                         only_folds: Optional[Sequence[int]] = None) -> list[FoldResult]:
    """Train one model per fold with seed ``train_config.seed + fold``."""
    if len(folds.fold_of_sample) != len(manifest):
        raise ValueError(f"fold assignment covers {len(folds.fold_of_sample)} samples, manifest has {len(manifest)}")
    size = model_config.input_size
    results = []
    for fold in (only_folds if only_folds is not None else range(folds.k)):
        try:
            tr_idx, va_idx = folds.split(fold)
            x_tr, y_tr, _ = load_split(manifest, tr_idx, size)
            x_va, y_va, _ = load_split(manifest, va_idx, size)
            cfg = TrainConfig(**{**train_config.to_dict(), "seed": train_config.seed + fold})
            seed_everything(cfg.seed)
            model = DualBranchNet(model_config)
            opt_state: dict = {}
            model, history = train_fold(model, (x_tr, y_tr), (x_va, y_va), cfg, augment_config, opt_state)
            probs = predict(model, x_va)
            ckpt = None
            if out_dir is not None:
                fold_dir = Path(out_dir) / f"fold_{fold}"
                fold_dir.mkdir(parents=True, exist_ok=True)
                ckpt = save_checkpoint(model, fold_dir / "model.pt", history.best_epoch, opt_state, cfg)
                history.save(fold_dir / "history.jsonl")
            results.append(FoldResult(fold, history, y_va, probs, list(va_idx), ckpt))
        except Exception as exc:
            raise FoldError(fold, exc) from exc
    return results

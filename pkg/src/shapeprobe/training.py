"""Classifier training with per-epoch snapshots.

Snapshot layout: ``<run_dir>/epoch_<k>/params.bin`` (torch state dict of
encoder and head) plus ``meta.json``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoders import EncoderHandle, preprocess
from .errors import ConfigError, TrainingDiverged
from .pairgen import FreshlyStylized, StylizedDataset
from .textures import stable_seed


@dataclass
class TrainHyper:
    seed: int = 0
    epochs: int = 12
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = (9,)
    gamma: float = 0.1
    batch_size: int = 32
    optimizer: str = "adam"
    deterministic: bool = True

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("milestones must be increasing")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")


@dataclass
class Snapshot:
    encoder_id: str
    epoch: int
    parameter_blob_path: str
    metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, epoch_dir) -> "Snapshot":
        meta = json.loads((Path(epoch_dir) / "meta.json").read_text())
        return cls(meta["encoder_id"], int(meta["epoch"]), str(Path(epoch_dir) / "params.bin"), meta["metrics"])


class Classifier(nn.Module):
    def __init__(self, encoder: nn.Module, width: int, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(width, num_classes)

    def forward(self, x):
        z = self.encoder(x)
        if z.ndim == 4:
            z = z.mean(dim=(2, 3))
        return self.head(z)


def classification_arrays(dataset, epoch_seed=None):
    """Images and zero-based labels.  Stylised sets draw one style per image per epoch."""
    if isinstance(dataset, FreshlyStylized):
        labels = np.array([it.class_id - 1 for it in dataset.base.items])
        return dataset.draw(epoch_seed), labels
    if isinstance(dataset, StylizedDataset):
        rng = np.random.default_rng(epoch_seed)
        style_ids = [s.style_id for s in dataset.bank.styles]
        recs = [dataset.record(it.image_id, style_ids[int(rng.integers(len(style_ids)))])
                for it in dataset.base.items]
        images = np.stack([dataset.image(r) for r in recs])
        labels = np.array([dataset.class_of(r) - 1 for r in recs])
        return images, labels
    images = np.stack([dataset.image(it) for it in dataset.items])
    labels = np.array([it.class_id - 1 for it in dataset.items])
    return images, labels


def _num_classes(dataset) -> int:
    base = dataset.base if isinstance(dataset, (StylizedDataset, FreshlyStylized)) else dataset
    return base.num_classes - 1


def predict(model: Classifier, images, batch_size: int = 128) -> np.ndarray:
    was = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            preds.append(model(preprocess(images[i : i + batch_size])).argmax(1).numpy())
    model.train(was)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(model, dataset) -> float:
    images, labels = classification_arrays(dataset, epoch_seed=0)
    return float(np.mean(predict(model, images) == labels))


def build_classifier(encoder: EncoderHandle, num_classes: int, seed: int) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stable_seed("head", seed))
        return Classifier(encoder.module, encoder.channel_counts[-1], num_classes)


def _save_snapshot(model, encoder, epoch, run_dir, metrics) -> Snapshot:
    encoder_id = encoder.encoder_id
    d = Path(run_dir) / f"epoch_{epoch}"
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "params.bin")
    meta = {"encoder_id": encoder_id, "epoch": epoch, "metrics": metrics, "encoder_config": encoder.config}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return Snapshot(encoder_id, epoch, str(d / "params.bin"), metrics)


def train_classifier(encoder: EncoderHandle, dataset, hyper: TrainHyper, snapshot_every: int = 1,
                     run_dir=None, val_set=None) -> list:
    """Train ``encoder`` plus a linear head on image-level labels.

    Snapshots are written at epoch 0 (initialisation) and every
    ``snapshot_every`` epochs, always including the final one.  The handle's
    module ends up holding the final parameters.
    """
    hyper.validate()
    if snapshot_every < 1:
        raise ConfigError("snapshot_every must be >= 1")
    if run_dir is None:
        raise ConfigError("run_dir is required to store snapshots")
    if hyper.deterministic:
        torch.use_deterministic_algorithms(True)
    model = build_classifier(encoder, _num_classes(dataset), hyper.seed)
    if hyper.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=hyper.lr, momentum=hyper.momentum,
                              weight_decay=hyper.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(hyper.milestones), hyper.gamma)
    val_set = val_set if val_set is not None else dataset
    loss_fn = nn.CrossEntropyLoss()

    snapshots = [_save_snapshot(model, encoder, 0, run_dir,
                                {"train_loss": None, "val_accuracy": accuracy(model, val_set), "lr": hyper.lr})]
    gen = torch.Generator().manual_seed(stable_seed("order", hyper.seed))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stable_seed("train", hyper.seed))
        for epoch in range(1, hyper.epochs + 1):
            images, labels = classification_arrays(dataset, epoch_seed=stable_seed("styles", hyper.seed, epoch))
            x_all = preprocess(images)
            y_all = torch.from_numpy(labels).long()
            order = torch.randperm(len(y_all), generator=gen)
            model.train()
            total, count = 0.0, 0
            for i in range(0, len(order), hyper.batch_size):
                idx = order[i : i + hyper.batch_size]
                if len(idx) < 2:
                    continue
                loss = loss_fn(model(x_all[idx]), y_all[idx])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch, snapshots)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            lr_used = opt.param_groups[0]["lr"]
            sched.step()
            train_loss = total / max(count, 1)
            if not math.isfinite(train_loss):
                raise TrainingDiverged(epoch, snapshots)
            if epoch % snapshot_every == 0 or epoch == hyper.epochs:
                metrics = {"train_loss": train_loss, "val_accuracy": accuracy(model, val_set), "lr": lr_used}
                snapshots.append(_save_snapshot(model, encoder, epoch, run_dir, metrics))
    model.eval()
    return snapshots


def load_classifier(encoder: EncoderHandle, snapshot: Snapshot) -> Classifier:
    handle = encoder.clone()
    state = torch.load(snapshot.parameter_blob_path, weights_only=True)
    num_classes = state["head.weight"].shape[0]
    model = Classifier(handle.module, handle.channel_counts[-1], num_classes)
    model.load_state_dict(state)
    model.eval()
    return model


def load_snapshot(encoder: EncoderHandle, snapshot: Snapshot) -> EncoderHandle:
    """Fresh handle whose module carries the snapshot's encoder parameters."""
    handle = encoder.clone()
    state = torch.load(snapshot.parameter_blob_path, weights_only=True)
    enc_state = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    handle.module.load_state_dict(enc_state)
    handle.module.eval()
    return handle


def load_run(run_dir) -> list:
    dirs = sorted(Path(run_dir).glob("epoch_*"), key=lambda p: int(p.name.split("_")[1]))
    return [Snapshot.load(d) for d in dirs]

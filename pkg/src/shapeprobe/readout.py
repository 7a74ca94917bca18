"""Shallow segmentation read-out probes on (frozen) encoder features.

A read-out is a stack of 1 or 3 same-padded 3x3 convolutions on one stage's
feature map (or a hypercolumn of several stages).  Its logits are bilinearly
upsampled to mask resolution before the loss and before prediction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import EncoderHandle, preprocess, stage_tensors
from .errors import ChannelMismatchError, ConfigError, ConsistencyError, EmptyDatasetError, TrainingDiverged
from .pairgen import DatasetManifest, StylizedDataset
from .textures import stable_seed

TASKS = ("semantic", "binary")
MODES = ("frozen", "none", "end_to_end")


def binary_ground_truth(sem_mask) -> np.ndarray:
    """Collapse every non-background class into a single foreground class."""
    return (np.asarray(sem_mask) > 0).astype(np.uint8)


def hypercolumn_features(tensors):
    """Resize stage maps to the largest spatial size among them and concatenate channels.

    Accepts torch tensors or numpy arrays (N, C, H, W); returns the same kind.
    """
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("hypercolumn needs at least one stage")
    as_numpy = isinstance(tensors[0], np.ndarray)
    ts = [torch.as_tensor(t) for t in tensors]
    n = ts[0].shape[0]
    if any(t.shape[0] != n for t in ts):
        raise ConsistencyError(f"hypercolumn stages disagree on batch size: {[t.shape[0] for t in ts]}")
    h = max(t.shape[2] for t in ts)
    w = max(t.shape[3] for t in ts)
    out = []
    for t in ts:
        if t.shape[2:] != (h, w):
            t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        out.append(t)
    z = out[0] if len(out) == 1 else torch.cat(out, dim=1)
    return z.numpy() if as_numpy else z


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Integer (gt, pred) confusion counts over all pixels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    if p.size and (p.min() < 0 or g.min() < 0 or p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray):
    """Mean IoU over classes present in prediction or ground truth, plus per-class IoU (NaN if absent)."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    denom = cm.sum(0) + cm.sum(1) - tp
    present = denom > 0
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / denom[present]
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return miou, iou


def compute_miou(pred, gt, num_classes: int):
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes))


@dataclass
class ReadoutSpec:
    stages: tuple = ("f4",)
    layers: int = 3
    task: str = "semantic"
    mode: str = "frozen"
    hidden: int = 64

    def validate(self):
        if self.layers not in (1, 3):
            raise ConfigError("read-out depth must be 1 or 3 layers")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")


@dataclass
class ReadoutHyper:
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr must be positive, epochs and batch_size >= 1")


class ReadoutHead(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, layers: int = 3, hidden: int = 64):
        super().__init__()
        mods = []
        c = in_channels
        for _ in range(layers - 1):
            mods += [nn.Conv2d(c, hidden, 3, padding=1), nn.ReLU(inplace=True)]
            c = hidden
        mods.append(nn.Conv2d(c, out_channels, 3, padding=1))
        self.net = nn.Sequential(*mods)
        self.in_channels = in_channels

    def forward(self, z, out_size):
        if z.shape[1] != self.in_channels:
            raise ChannelMismatchError(f"read-out expects {self.in_channels} channels, got {z.shape[1]}")
        logits = self.net(z)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


@dataclass
class ReadoutData:
    """Images, masks and (for frozen encoders) precomputed stage features."""
    images: np.ndarray
    masks: np.ndarray
    num_classes: int
    features: dict = field(default_factory=dict)
    owner: object = None  # module that produced ``features``

    def __len__(self):
        return len(self.masks)

    def stacked(self, stages) -> torch.Tensor:
        return torch.from_numpy(hypercolumn_features([self.features[s] for s in stages]))


def dataset_arrays(dataset):
    """(images, masks, num_classes) for a manifest or stylised dataset (every record)."""
    if isinstance(dataset, StylizedDataset):
        images = np.stack([dataset.image(r) for r in dataset.records]) if dataset.records else None
        masks = np.stack([dataset.mask(r) for r in dataset.records]) if dataset.records else None
        n_cls = dataset.base.num_classes
    elif isinstance(dataset, DatasetManifest):
        images = np.stack([dataset.image(it) for it in dataset.items]) if dataset.items else None
        masks = np.stack([dataset.mask(it) for it in dataset.items]) if dataset.items else None
        n_cls = dataset.num_classes
    else:
        raise TypeError(f"unsupported dataset type {type(dataset).__name__}")
    if images is None:
        raise EmptyDatasetError("dataset has no items")
    return images, masks, n_cls


def prepare_readout_data(encoder: EncoderHandle | None, dataset, stages=()) -> ReadoutData:
    """Load a dataset once and cache the frozen encoder's features for ``stages``."""
    if isinstance(dataset, ReadoutData):
        data = dataset
    else:
        images, masks, n_cls = dataset_arrays(dataset)
        data = ReadoutData(images, masks, n_cls)
    if stages and data.owner is not encoder.module:
        data.features, data.owner = {}, encoder.module
    missing = [s for s in stages if s not in data.features]
    if missing:
        data.features.update(stage_tensors(encoder, data.images, missing))
    return data


def randomized_encoder(encoder: EncoderHandle, seed: int) -> EncoderHandle:
    """Copy of ``encoder`` with every parameter re-drawn from its default initialiser."""
    handle = encoder.clone()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stable_seed("random-init", encoder.encoder_id, seed))
        for m in handle.module.modules():
            if hasattr(m, "reset_parameters"):
                m.reset_parameters()
            if hasattr(m, "reset_running_stats"):
                m.reset_running_stats()
    handle.module.eval()
    handle.encoder_id = f"{encoder.encoder_id}-randominit"
    return handle


@dataclass
class TrainedReadout:
    spec: ReadoutSpec
    head: ReadoutHead
    encoder: EncoderHandle
    num_classes: int
    history: list = field(default_factory=list)
    mask: object = None

    @property
    def out_classes(self) -> int:
        return 2 if self.spec.task == "binary" else self.num_classes

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.head.state_dict(), out_dir / "readout.bin")
        if self.spec.mode == "end_to_end":
            torch.save(self.encoder.module.state_dict(), out_dir / "encoder.bin")
        meta = {"spec": asdict(self.spec), "num_classes": self.num_classes,
                "encoder_id": self.encoder.encoder_id, "in_channels": self.head.in_channels}
        (out_dir / "readout.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        write_history_csv(self.history, out_dir / "history.csv")
        return out_dir


def write_history_csv(history, path) -> Path:
    import csv
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "miou"])
        for h in history:
            w.writerow([h["epoch"], repr(h["loss"]), "" if h.get("miou") is None else repr(h["miou"])])
    return path


def _targets(masks: np.ndarray, task: str) -> torch.Tensor:
    if task == "binary":
        return torch.from_numpy(binary_ground_truth(masks)).float()
    return torch.from_numpy(masks.astype(np.int64))


def _loss(logits, target, task):
    if task == "binary":
        return F.binary_cross_entropy_with_logits(logits[:, 0], target)
    return F.cross_entropy(logits, target)


def _decode(logits, task) -> torch.Tensor:
    if task == "binary":
        return (logits[:, 0] > 0).long()
    return logits.argmax(1)


def _live_features(encoder: EncoderHandle, images, stages):
    out = encoder.module.forward_stages(preprocess(images), list(stages))
    return hypercolumn_features([out[s] for s in stages])


def _apply(mask, z):
    return z if mask is None else mask.apply(z)


def train_readout(encoder: EncoderHandle, spec: ReadoutSpec, train_set, hyper: ReadoutHyper | None = None,
                  mask=None, eval_set=None) -> TrainedReadout:
    """Fit a read-out head; returns it with a per-epoch loss (and optional mIoU) history.

    ``mode="frozen"`` uses ``encoder`` as is, ``"none"`` a randomly
    re-initialised copy, ``"end_to_end"`` a copy trained jointly with the head.
    The caller's encoder parameters are never modified.  ``mask`` (anything
    with an ``apply(tensor)`` method and a ``D`` attribute) zeroes channels of
    the read-out input at every step and at evaluation.
    """
    spec.validate()
    hyper = hyper or ReadoutHyper()
    hyper.validate()
    for s in spec.stages:
        encoder.check_stage(s)
    if spec.mode == "none":
        enc = randomized_encoder(encoder, hyper.seed)
    elif spec.mode == "end_to_end":
        enc = encoder.clone()
    else:
        enc = encoder
    in_ch = sum(enc.channels(s) for s in spec.stages)
    if mask is not None and mask.D != in_ch:
        raise ChannelMismatchError(f"mask covers {mask.D} channels, read-out input has {in_ch}")
    live = spec.mode == "end_to_end"
    data = prepare_readout_data(enc, train_set, () if live else spec.stages)
    if len(data) == 0:
        raise EmptyDatasetError("training set is empty")
    out_ch = 1 if spec.task == "binary" else data.num_classes
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stable_seed("readout", hyper.seed))
        head = ReadoutHead(in_ch, out_ch, spec.layers, spec.hidden)
        params = list(head.parameters()) + (list(enc.module.parameters()) if live else [])
        opt = torch.optim.Adam(params, lr=hyper.lr)
        gen = torch.Generator().manual_seed(stable_seed("readout-order", hyper.seed))
        targets = _targets(data.masks, spec.task)
        z_all = None if live else data.stacked(spec.stages)
        out_size = tuple(data.masks.shape[1:3])
        result = TrainedReadout(spec, head, enc, data.num_classes, mask=mask)
        for epoch in range(1, hyper.epochs + 1):
            head.train()
            if live:
                enc.module.train()
            order = torch.randperm(len(data), generator=gen)
            total, count = 0.0, 0
            for i in range(0, len(order), hyper.batch_size):
                idx = order[i : i + hyper.batch_size]
                if live:
                    z = _live_features(enc, data.images[idx.numpy()], spec.stages)
                else:
                    z = z_all[idx]
                logits = head(_apply(mask, z), out_size)
                loss = _loss(logits, targets[idx], spec.task)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch, [])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            row = {"epoch": epoch, "loss": total / count, "miou": None}
            if eval_set is not None:
                row["miou"] = evaluate_readout(None, result, eval_set, mask).miou
            result.history.append(row)
    head.eval()
    enc.module.eval()
    return result


@dataclass
class ProbeResult:
    task: str
    miou: float
    per_class: list
    num_classes: int
    stages: tuple = ()
    mode: str = "frozen"
    encoder_id: str = ""
    mask: dict | None = None
    confusion: list | None = None

    def to_dict(self):
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["per_class"] = [None if (v is None or np.isnan(v)) else float(v) for v in self.per_class]
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def predict_masks(readout: TrainedReadout, data: ReadoutData, mask=None, batch_size: int = 64) -> np.ndarray:
    spec = readout.spec
    live = spec.mode == "end_to_end"
    if not live:
        prepare_readout_data(readout.encoder, data, spec.stages)
    out_size = tuple(data.masks.shape[1:3])
    preds = []
    readout.head.eval()
    readout.encoder.module.eval()
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            if live:
                z = _live_features(readout.encoder, data.images[i : i + batch_size], spec.stages)
            else:
                z = torch.from_numpy(hypercolumn_features([data.features[s][i : i + batch_size] for s in spec.stages]))
            preds.append(_decode(readout.head(_apply(mask, z), out_size), spec.task).numpy())
    return np.concatenate(preds)


def evaluate_readout(encoder: EncoderHandle | None, readout: TrainedReadout, eval_set, mask=None) -> ProbeResult:
    """mIoU of ``readout`` over the whole of ``eval_set``.

    The read-out evaluates with the encoder it was trained with (a random or
    fine-tuned copy for ``none`` / ``end_to_end``); ``encoder`` is only used
    for frozen read-outs and must then match the training encoder's stages.
    ``mask`` defaults to the mask active during training.
    """
    if encoder is not None and readout.spec.mode == "frozen":
        readout.encoder = encoder
    if mask is None:
        mask = readout.mask
    data = eval_set if isinstance(eval_set, ReadoutData) else prepare_readout_data(None, eval_set)
    if len(data) == 0:
        raise EmptyDatasetError("evaluation set is empty")
    pred = predict_masks(readout, data, mask)
    gt = binary_ground_truth(data.masks) if readout.spec.task == "binary" else data.masks
    k = readout.out_classes
    cm = confusion_matrix(pred, gt, k)
    miou, iou = miou_from_confusion(cm)
    return ProbeResult(readout.spec.task, miou, [float(v) for v in iou], k, tuple(readout.spec.stages),
                       readout.spec.mode, readout.encoder.encoder_id,
                       None if mask is None else mask.to_dict(), cm.tolist())


# --------------------------------------------------------------- oracle probe

def oracle_features(masks: np.ndarray, num_classes: int, size: int) -> np.ndarray:
    """One-hot ground-truth masks area-averaged to ``size`` x ``size`` (N, C, size, size)."""
    onehot = torch.from_numpy(np.eye(num_classes, dtype=np.float32)[masks]).permute(0, 3, 1, 2)
    return F.adaptive_avg_pool2d(onehot, size).numpy()


class OracleEncoder(nn.Module):
    """Encoder whose single stage is the downsampled one-hot ground truth of the current batch.

    It only works through :func:`oracle_readout_data`, which fills the feature
    cache directly; calling it on images raises.
    """

    def forward_stages(self, x, stages=None):
        raise RuntimeError("oracle features come from masks, not images")


def oracle_handle(num_classes: int) -> EncoderHandle:
    return EncoderHandle("oracle", ["oracle"], [num_classes], OracleEncoder())


def oracle_readout_data(handle: EncoderHandle, dataset, size: int = 8) -> ReadoutData:
    data = prepare_readout_data(None, dataset)
    data.features = {"oracle": oracle_features(data.masks, data.num_classes, size)}
    data.owner = handle.module
    return data

"""Stage-tagged encoders and frozen feature extraction.

Two tiny reference architectures share stage channel counts:

* ``tiny_resnet`` -- a four-stage residual network of 3x3 convolutions whose
  deepest stage sees the whole 32 px input;
* ``tiny_bagnet`` -- a small-kernel stem followed only by 1x1 residual
  blocks, so every unit's receptive field is capped at 3, 5 or 9 pixels.

External encoders (e.g. pretrained ResNet50 checkpoints) plug in through
:func:`register_external_encoder`.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import AdapterValidationError, ConfigError, ConsistencyError, StageError

ARCHS = ("tiny_resnet", "tiny_bagnet")
BAGNET_CAPS = (3, 5, 9)
DEFAULT_CHANNELS = (16, 32, 64, 128)
DEFAULT_STRIDES = (1, 2, 2, 1)


def receptive_field(layers: Sequence[tuple]) -> tuple:
    """Receptive field size and jump after a chain of (kernel, stride) layers."""
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


def preprocess(images) -> torch.Tensor:
    """uint8 (N, H, W, 3) -> float32 (N, 3, H, W), roughly zero-mean."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return (x / 255.0 - 0.5) / 0.25


# ----------------------------------------------------------------- reference nets

class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, kernel):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(cin, cout, kernel, stride, pad, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, kernel, 1, pad, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + (x if self.short is None else self.short(x)))


class StagedEncoder(nn.Module):
    """Stem followed by one residual block per stage."""

    def __init__(self, stem_layers: int, stem_kernel: int, block_kernel: int,
                 channels=DEFAULT_CHANNELS, strides=DEFAULT_STRIDES, in_channels=3):
        super().__init__()
        stem = []
        cin = in_channels
        for _ in range(stem_layers):
            stem += [nn.Conv2d(cin, channels[0], stem_kernel, 1, stem_kernel // 2, bias=False),
                     nn.BatchNorm2d(channels[0]), nn.ReLU()]
            cin = channels[0]
        self.stem = nn.Sequential(*stem)
        self.blocks = nn.ModuleList()
        for c, s in zip(channels, strides):
            self.blocks.append(_BasicBlock(cin, c, s, block_kernel))
            cin = c
        self.stage_names = [f"f{i + 1}" for i in range(len(channels))]
        self.channels = tuple(channels)
        self.layer_specs = {}
        chain = [(stem_kernel, 1)] * stem_layers
        for name, s in zip(self.stage_names, strides):
            chain = chain + [(block_kernel, s), (block_kernel, 1)]
            self.layer_specs[name] = list(chain)

    def forward_stages(self, x, stages=None):
        wanted = set(stages) if stages is not None else set(self.stage_names)
        last = max(self.stage_names.index(s) for s in wanted)
        out = {}
        h = self.stem(x)
        for i, blk in enumerate(self.blocks[: last + 1]):
            h = blk(h)
            if self.stage_names[i] in wanted:
                out[self.stage_names[i]] = h
        return out

    def forward(self, x):
        return self.forward_stages(x, [self.stage_names[-1]])[self.stage_names[-1]]


class _CallableEncoder(nn.Module):
    def __init__(self, fn, stage_names, module=None):
        super().__init__()
        self.fn = fn
        self.stage_names = list(stage_names)
        self.inner = module if isinstance(module, nn.Module) else None

    def forward_stages(self, x, stages=None):
        out = self.fn(x)
        if stages is None:
            return dict(out)
        return {s: out[s] for s in stages}

    def forward(self, x):
        return self.forward_stages(x, [self.stage_names[-1]])[self.stage_names[-1]]


@dataclass
class EncoderHandle:
    encoder_id: str
    stage_names: list
    channel_counts: list
    module: nn.Module
    receptive_field_cap: int | None = None
    arch: str = "external"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stage_names:
            raise ConfigError("an encoder needs at least one stage")
        if len(self.stage_names) != len(self.channel_counts):
            raise ConfigError("one channel count per stage is required")
        if any(int(c) <= 0 for c in self.channel_counts):
            raise ConfigError("channel counts must be positive")

    def channels(self, stage) -> int:
        self.check_stage(stage)
        return int(self.channel_counts[self.stage_names.index(stage)])

    def check_stage(self, stage):
        if stage not in self.stage_names:
            raise StageError(f"unknown stage {stage!r}; encoder {self.encoder_id} has {self.stage_names}")

    def stage_receptive_fields(self) -> dict:
        specs = getattr(self.module, "layer_specs", None)
        if not specs:
            return {}
        return {s: receptive_field(specs[s])[0] for s in self.stage_names}

    def clone(self) -> "EncoderHandle":
        return EncoderHandle(self.encoder_id, list(self.stage_names), list(self.channel_counts),
                             copy.deepcopy(self.module), self.receptive_field_cap, self.arch, dict(self.config))


@dataclass
class EncoderConfig:
    seed: int = 0
    channels: tuple = DEFAULT_CHANNELS
    strides: tuple = DEFAULT_STRIDES
    receptive_field_cap: int | None = None


def build_reference_encoder(arch: str, config: EncoderConfig | None = None) -> EncoderHandle:
    config = config or EncoderConfig()
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    channels, strides = tuple(config.channels), tuple(config.strides)
    if len(channels) < 4 or len(channels) != len(strides):
        raise ConfigError("reference encoders need >= 4 stages with one stride each")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        if arch == "tiny_resnet":
            cap = None
            module = StagedEncoder(1, 3, 3, channels, strides)
        else:
            cap = config.receptive_field_cap
            if cap not in BAGNET_CAPS:
                raise ConfigError(f"tiny_bagnet receptive_field_cap must be one of {BAGNET_CAPS}, got {cap!r}")
            module = StagedEncoder((cap - 1) // 2, 3, 1, channels, strides)
    enc_id = f"{arch}{'' if cap is None else f'-rf{cap}'}-seed{config.seed}"
    cfg = {"arch": arch, "seed": config.seed, "channels": list(channels), "strides": list(strides),
           "receptive_field_cap": cap}
    return EncoderHandle(enc_id, list(module.stage_names), list(channels), module, cap, arch, cfg)


# ---------------------------------------------------------------- external adapters

@dataclass
class AdapterSpec:
    """Declares how to call an external encoder.

    ``forward`` maps a float tensor (N, 3, H, W) to a dict of stage tensors,
    each (N, C, h, w) or (N, C) for vector-valued stages.
    """

    encoder_id: str
    stage_names: list
    channel_counts: list
    forward: Callable
    module: nn.Module | None = None
    probe_size: int = 32
    receptive_field_cap: int | None = None


_REGISTRY: dict = {}


def register_external_encoder(spec: AdapterSpec) -> EncoderHandle:
    if spec.encoder_id in _REGISTRY:
        return _REGISTRY[spec.encoder_id]
    probe = torch.zeros(2, 3, spec.probe_size, spec.probe_size)
    with torch.no_grad():
        out = spec.forward(probe)
    for name, declared in zip(spec.stage_names, spec.channel_counts):
        if name not in out:
            raise AdapterValidationError(f"adapter {spec.encoder_id} produced no output for stage {name!r}")
        observed = int(out[name].shape[1])
        if observed != int(declared):
            raise AdapterValidationError(
                f"adapter {spec.encoder_id} stage {name!r}: declared {declared} channels, observed {observed}")
    module = _CallableEncoder(spec.forward, spec.stage_names, spec.module)
    handle = EncoderHandle(spec.encoder_id, list(spec.stage_names), [int(c) for c in spec.channel_counts],
                           module, spec.receptive_field_cap, "external", {})
    _REGISTRY[spec.encoder_id] = handle
    return handle


# ---------------------------------------------------------------- extraction

@dataclass
class FeatureMatrix:
    stage: str
    pooling: str
    data: np.ndarray
    sample_ids: list
    encoder_id: str = ""
    epoch: int | None = None

    @property
    def D(self) -> int:
        return int(self.data.shape[1])

    def rows(self, sample_ids) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.sample_ids)}
        return self.data[[index[s] for s in sample_ids]]

    def save(self, path) -> Path:
        """Row-major float32 ``.bin`` plus a JSON sidecar with the same stem."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(self.data, dtype="<f4").tofile(path)
        meta = {"shape": list(self.data.shape), "dtype": "float32", "stage": self.stage,
                "sample_ids": list(self.sample_ids), "encoder_id": self.encoder_id,
                "epoch": self.epoch, "pooling": self.pooling}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("dtype", "float32") != "float32":
            raise ConfigError(f"unsupported feature dtype {meta['dtype']!r}")
        data = np.fromfile(path, dtype="<f4").reshape(meta["shape"])
        if len(meta["sample_ids"]) != data.shape[0]:
            raise ConsistencyError("sidecar sample_ids do not match the number of rows")
        pooling = meta.get("pooling", "global_avg" if data.ndim == 2 else "none")
        return cls(meta["stage"], pooling, data, list(meta["sample_ids"]), meta.get("encoder_id", ""),
                   meta.get("epoch"))


def stage_tensors(handle: EncoderHandle, images, stages, batch_size: int = 64) -> dict:
    """Unpooled float32 arrays for several stages; parameters stay untouched."""
    for s in stages:
        handle.check_stage(s)
    module = handle.module
    was_training = module.training
    module.eval()
    chunks = {s: [] for s in stages}
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                out = module.forward_stages(preprocess(images[start : start + batch_size]), list(stages))
                for s in stages:
                    t = out[s]
                    if int(t.shape[1]) != handle.channels(s):
                        raise ConsistencyError(
                            f"stage {s!r} produced {int(t.shape[1])} channels, encoder declares {handle.channels(s)}")
                    chunks[s].append(t.float().numpy())
    finally:
        module.train(was_training)
    return {s: np.concatenate(v, 0) for s, v in chunks.items()}


def extract_features(handle: EncoderHandle, samples, stage: str, pooling: str = "global_avg",
                     snapshot=None, batch_size: int = 64, epoch=None) -> FeatureMatrix:
    """Run ``samples`` (sequence of ``(sample_id, uint8 HxWx3)``) through a frozen encoder.

    ``global_avg`` returns per-channel spatial means (P x D); ``none`` returns
    the stage tensor as produced.  Vector-valued stages are returned as-is
    under either pooling.
    """
    if pooling not in ("global_avg", "none"):
        raise ConfigError(f"unknown pooling {pooling!r}")
    handle.check_stage(stage)
    if snapshot is not None:
        from .training import load_snapshot

        handle = load_snapshot(handle, snapshot)
        epoch = snapshot.epoch
    ids = [s for s, _ in samples]
    images = np.stack([img for _, img in samples]) if samples else np.zeros((0, 1, 1, 3), np.uint8)
    data = stage_tensors(handle, images, [stage], batch_size)[stage]
    if pooling == "global_avg" and data.ndim == 4:
        data = data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise ConsistencyError(f"non-finite activations at stage {stage!r}")
    return FeatureMatrix(stage, pooling, data, ids, handle.encoder_id, epoch)


def manifest_samples(manifest) -> list:
    return [(it.image_id, manifest.image(it)) for it in manifest.items]


def record_samples(sd, records) -> list:
    return [(r.key, sd.image(r)) for r in records]

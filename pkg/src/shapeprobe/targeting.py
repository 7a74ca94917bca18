"""Channel masks built from factor rankings, and the keep / remove experiments.

Masks act on a stage's channels after the encoder and before pooling or the
read-out.  ``keep_top_percent`` is trained with the mask in place;
``remove_top_n`` only masks at inference, on read-outs trained unmasked.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dims import FACTORS, NeuronRanking
from .errors import ChannelMismatchError, ConfigError
from .readout import ReadoutHyper, ReadoutSpec, evaluate_readout, prepare_readout_data, train_readout

MODES = ("keep_top_percent", "remove_top_n")


def _indices(ranking) -> list:
    return list(ranking.indices) if isinstance(ranking, NeuronRanking) else [int(i) for i in ranking]


def _factor_of(ranking, factor):
    if factor is not None:
        return factor
    return ranking.factor if isinstance(ranking, NeuronRanking) else None


@dataclass
class MaskSpec:
    mode: str
    factor: str | None
    value: float
    keep_set: list
    D: int
    _keep: torch.Tensor | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mask mode must be one of {MODES}")
        self.keep_set = sorted(int(i) for i in set(self.keep_set))
        if self.keep_set and (self.keep_set[0] < 0 or self.keep_set[-1] >= self.D):
            raise ConfigError(f"keep_set must lie in [0, {self.D})")

    @property
    def is_identity(self) -> bool:
        return len(self.keep_set) == self.D

    @property
    def zeroed(self) -> list:
        keep = set(self.keep_set)
        return [i for i in range(self.D) if i not in keep]

    def keep_vector(self) -> torch.Tensor:
        if self._keep is None:
            v = torch.zeros(self.D, dtype=torch.bool)
            v[self.keep_set] = True
            self._keep = v
        return self._keep

    def apply(self, features):
        return apply_mask(features, self)

    def to_dict(self):
        return {"mode": self.mode, "factor": self.factor, "value": self.value,
                "keep_set": list(self.keep_set), "D": self.D}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], d.get("factor"), d["value"], d["keep_set"], int(d["D"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "MaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def keep_top_percent_mask(ranking, X: float, D: int, factor: str | None = None) -> MaskSpec:
    """Keep the first ceil(X% of len(ranking)) ranked neurons; zero the rest of the D channels.

    ``ranking`` should already be restricted to the factor's allocated
    neurons, so X=100 keeps exactly that factor's set.
    """
    if not (0 < X <= 100):
        raise ConfigError(f"X must lie in (0, 100], got {X}")
    idx = _indices(ranking)
    n = math.ceil(X / 100.0 * len(idx) - 1e-9)
    return MaskSpec("keep_top_percent", _factor_of(ranking, factor), float(X), idx[:n], D)


def remove_top_n_mask(ranking, N: int, D: int, factor: str | None = None) -> MaskSpec:
    """Zero the first N ranked neurons, keep every other channel."""
    idx = _indices(ranking)
    if N < 0 or N > D:
        raise ConfigError(f"N must lie in [0, {D}], got {N}")
    if N > len(idx):
        raise ConfigError(f"cannot remove {N} neurons from a ranking of length {len(idx)}")
    gone = set(idx[:N])
    return MaskSpec("remove_top_n", _factor_of(ranking, factor), int(N),
                    [i for i in range(D) if i not in gone], D)


def apply_mask(features, mask: MaskSpec):
    """Zero channels outside ``mask.keep_set`` (axis 1 for 2-D+ inputs, last axis for 1-D).

    The identity mask returns its input object unchanged.
    """
    axis = 1 if features.ndim >= 2 else 0
    if features.shape[axis] != mask.D:
        raise ChannelMismatchError(f"features have {features.shape[axis]} channels, mask expects {mask.D}")
    if mask.is_identity:
        return features
    keep = mask.keep_vector()
    shape = [1] * features.ndim
    shape[axis] = mask.D
    if isinstance(features, np.ndarray):
        return np.where(keep.numpy().reshape(shape), features, np.zeros((), dtype=features.dtype))
    return torch.where(keep.reshape(shape), features, torch.zeros((), dtype=features.dtype))


# ---------------------------------------------------------------- experiments

@dataclass
class GridRow:
    factor: str
    value: float
    task: str
    miou: float
    n_kept: int

    def to_dict(self):
        return {"factor": self.factor, "value": self.value, "task": self.task,
                "miou": self.miou, "n_kept": self.n_kept}


def run_removal_experiment(encoder, readouts: dict, rankings: dict, Ns, eval_set, factors=FACTORS) -> list:
    """Inference-time removal grid over factor x N x task.

    ``readouts`` maps task -> trained (unmasked) read-out on a single stage;
    ``rankings`` maps factor -> full-length :class:`NeuronRanking`.
    """
    rows = []
    for task, ro in readouts.items():
        if len(ro.spec.stages) != 1:
            raise ConfigError("removal masks apply to single-stage read-outs")
        D = ro.head.in_channels
        data = prepare_readout_data(ro.encoder, eval_set, ro.spec.stages)
        for factor in factors:
            for N in Ns:
                mask = remove_top_n_mask(rankings[factor], int(N), D, factor)
                res = evaluate_readout(encoder, ro, data, mask)
                rows.append(GridRow(factor, int(N), task, res.miou, len(mask.keep_set)))
    return rows


def run_keep_experiment(encoder, rankings: dict, Xs, train_set, eval_set, stage: str = "f4",
                        tasks=("semantic", "binary"), factors=("shape", "texture"), layers: int = 3,
                        hyper: ReadoutHyper | None = None) -> list:
    """Train one masked read-out per (factor, X, task) cell and evaluate it with the same mask.

    ``rankings`` maps factor -> ranking restricted to that factor's allocated
    neurons (see :func:`shapeprobe.dims.assign_factor_neurons`).
    """
    hyper = hyper or ReadoutHyper()
    D = encoder.channels(stage)
    train_data = prepare_readout_data(encoder, train_set, (stage,))
    eval_data = prepare_readout_data(encoder, eval_set, (stage,))
    rows = []
    for task in tasks:
        spec = ReadoutSpec(stages=(stage,), layers=layers, task=task, mode="frozen")
        for factor in factors:
            for X in Xs:
                mask = keep_top_percent_mask(rankings[factor], X, D, factor)
                ro = train_readout(encoder, spec, train_data, hyper, mask=mask)
                res = evaluate_readout(encoder, ro, eval_data, mask)
                rows.append(GridRow(factor, float(X), task, res.miou, len(mask.keep_set)))
    return rows


def grid_table(rows, value_name: str) -> tuple:
    """Pivot grid rows into (header, rows) with one column per factor x task."""
    cols = sorted({(r.factor, r.task) for r in rows}, key=lambda c: (FACTORS.index(c[0]) if c[0] in FACTORS else 9, c[1]))
    values = sorted({r.value for r in rows})
    lookup = {(r.factor, r.task, r.value): r.miou for r in rows}
    header = [value_name] + [f"{f}_{t}" for f, t in cols]
    table = [[v] + [lookup.get((f, t, v), float("nan")) for f, t in cols] for v in values]
    return header, table


def write_grid_csv(rows, path, value_name: str) -> Path:
    header, table = grid_table(rows, value_name)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def is_monotone(values, increasing: bool = True, tol: float = 0.0) -> bool:
    v = np.asarray(values, dtype=np.float64)
    d = np.diff(v) if increasing else -np.diff(v)
    return bool(np.all(d >= -tol))

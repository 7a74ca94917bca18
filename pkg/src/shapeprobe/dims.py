"""Correlation-based dimensionality estimation of semantic factors.

For each neuron the Pearson correlation between its activations on the two
members of factor-sharing image pairs gives a Gaussian lower bound on their
mutual information, ``-1/2 ln(1 - rho^2)``.  Factor scores (mean clamped
correlation) and a baseline score go through a temperature softmax to split
the ``D`` neurons into shape, texture and residual counts.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncoderHandle, record_samples, stage_tensors
from .errors import ConfigError, DomainError, InsufficientSamplesError
from .pairgen import ImagePairSet, StylizedDataset, records_in

FACTORS = ("shape", "texture", "residual")
EPS = 1e-6
DEFAULT_TEMPERATURE = 0.1
# Fitted with calibrate_baseline() on planted_suite() at DEFAULT_TEMPERATURE; see scripts/calibrate_baseline.py.
DEFAULT_BASELINE = 0.325


@dataclass
class PairedFeatures:
    factor: str
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim == 1:
            self.A = self.A[:, None]
            self.B = self.B[:, None]
        if self.A.shape != self.B.shape or self.A.ndim != 2:
            raise ConfigError(f"paired matrices must share a (P, D) shape, got {self.A.shape} and {self.B.shape}")

    @property
    def P(self):
        return self.A.shape[0]

    @property
    def D(self):
        return self.A.shape[1]


def pairwise_correlation(pf: PairedFeatures, return_flags: bool = False):
    """Per-neuron Pearson correlation between paired activations.

    Neurons with zero variance on either side get rho = 0; with
    ``return_flags`` their indices are returned as well.
    """
    if pf.P < 3:
        raise InsufficientSamplesError(f"need at least 3 pairs, got {pf.P}")
    a = pf.A - pf.A.mean(axis=0)
    b = pf.B - pf.B.mean(axis=0)
    va = np.einsum("pd,pd->d", a, a)
    vb = np.einsum("pd,pd->d", b, b)
    cov = np.einsum("pd,pd->d", a, b)
    # relative floor: a column that is constant up to float rounding has no variance
    scale_a = np.einsum("pd,pd->d", pf.A, pf.A)
    scale_b = np.einsum("pd,pd->d", pf.B, pf.B)
    flat = (va <= 1e-24 * np.maximum(scale_a, 1e-300)) | (vb <= 1e-24 * np.maximum(scale_b, 1e-300))
    flat |= (va == 0) | (vb == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = cov / np.sqrt(va * vb)
    rho = np.where(flat, 0.0, np.clip(rho, -1.0, 1.0))
    if return_flags:
        return rho, np.flatnonzero(flat)
    return rho


def mi_lower_bound(rho, eps: float = EPS):
    """Gaussian mutual-information lower bound in nats, capped at ``-1/2 ln(eps)``."""
    r = np.asarray(rho, dtype=np.float64)
    if np.any(np.abs(r) > 1.0 + 1e-12) or np.any(np.isnan(r)):
        raise DomainError("correlation must lie in [-1, 1]")
    out = -0.5 * np.log1p(-np.minimum(r * r, 1.0 - eps))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class NeuronStats:
    rho: dict
    mi: dict
    zero_variance: dict = field(default_factory=dict)

    @property
    def D(self):
        return len(next(iter(self.rho.values())))


def neuron_stats(shape_pf: PairedFeatures, texture_pf: PairedFeatures) -> NeuronStats:
    if shape_pf.D != texture_pf.D:
        raise ConfigError("shape and texture features must have the same number of neurons")
    rho, mi, flags = {}, {}, {}
    for k, pf in (("shape", shape_pf), ("texture", texture_pf)):
        rho[k], flags[k] = pairwise_correlation(pf, return_flags=True)
        mi[k] = mi_lower_bound(rho[k])
    return NeuronStats(rho, mi, {k: v.tolist() for k, v in flags.items()})


def factor_scores(stats: NeuronStats) -> dict:
    """Mean of the non-negative part of each factor's correlations, in [0, 1]."""
    return {k: float(np.mean(np.maximum(np.asarray(stats.rho[k]), 0.0))) for k in ("shape", "texture")}


def largest_remainder(fractions, total: int) -> list:
    """Integer apportionment of ``total``; remainder ties go to the earlier entry."""
    quotas = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(int)
    left = total - int(counts.sum())
    rema = quotas - counts
    order = sorted(range(len(rema)), key=lambda i: (-rema[i], i))
    for i in order[:left]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class FactorAllocation:
    stage: str
    D: int
    counts: dict
    fractions: dict
    scores: dict
    baseline: float
    temperature: float
    epoch: int | None = None

    def to_dict(self):
        d = asdict(self)
        d["b"] = d.pop("baseline")
        d["tau"] = d.pop("temperature")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["stage"], int(d["D"]), d["counts"], d["fractions"], d["scores"], d["b"], d["tau"],
                   d.get("epoch"))


def softmax_fractions(scores: dict, baseline: float, temperature: float) -> np.ndarray:
    logits = np.array([scores["shape"], scores["texture"], baseline], dtype=np.float64) / temperature
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def allocate_dimensions(scores: dict, D: int, baseline: float = DEFAULT_BASELINE,
                        temperature: float = DEFAULT_TEMPERATURE, stage: str = "", epoch=None) -> FactorAllocation:
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if baseline < 0:
        raise ConfigError("baseline must be non-negative")
    if D < 0:
        raise ConfigError("D must be non-negative")
    fr = softmax_fractions(scores, baseline, temperature)
    counts = largest_remainder(fr, D)
    return FactorAllocation(stage, int(D), dict(zip(FACTORS, counts)),
                            dict(zip(FACTORS, (float(v) for v in fr))),
                            {"shape": float(scores["shape"]), "texture": float(scores["texture"])},
                            float(baseline), float(temperature), epoch)


@dataclass
class NeuronRanking:
    factor: str
    entries: list

    @property
    def indices(self) -> list:
        return [i for i, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def restricted(self, members) -> "NeuronRanking":
        members = set(int(m) for m in members)
        return NeuronRanking(self.factor, [e for e in self.entries if e[0] in members])


def rank_neurons(stats: NeuronStats, factor: str) -> NeuronRanking:
    """Order neurons by MI (descending), or for ``residual`` by their larger
    factor MI ascending so the least factor-specific neurons come first.
    Ties go to the lower index."""
    if factor in ("shape", "texture"):
        key = np.asarray(stats.mi[factor], dtype=np.float64)
        order = np.lexsort((np.arange(len(key)), -key))
    elif factor == "residual":
        key = np.maximum(np.asarray(stats.mi["shape"]), np.asarray(stats.mi["texture"]))
        order = np.lexsort((np.arange(len(key)), key))
    else:
        raise ConfigError(f"unknown factor {factor!r}")
    return NeuronRanking(factor, [(int(i), float(key[i])) for i in order])


def assign_factor_neurons(stats: NeuronStats, allocation: FactorAllocation) -> dict:
    """Disjoint neuron sets per factor, sized by the allocation counts.

    Greedy over (neuron, factor) candidates in descending MI: a neuron joins
    the first factor whose quota is still open.  Whatever is left is residual.
    """
    cands = []
    for f in ("shape", "texture"):
        for i, v in enumerate(np.asarray(stats.mi[f])):
            cands.append((-float(v), 0 if f == "shape" else 1, i, f))
    cands.sort()
    quota = {"shape": allocation.counts["shape"], "texture": allocation.counts["texture"]}
    taken = {"shape": [], "texture": []}
    used = set()
    for _, _, i, f in cands:
        if i in used or len(taken[f]) >= quota[f]:
            continue
        taken[f].append(i)
        used.add(i)
    taken["residual"] = [i for i in range(stats.D) if i not in used]
    return taken


# ------------------------------------------------------------------ pipelines

def paired_from_matrix(data: np.ndarray, index: dict, ps: ImagePairSet) -> PairedFeatures:
    ia = [index[a.key] for a, _ in ps.pairs]
    ib = [index[b.key] for _, b in ps.pairs]
    return PairedFeatures(ps.factor, data[ia], data[ib])


def _split_pair_sets(pair_sets):
    by = {ps.factor: ps for ps in pair_sets}
    if set(by) != {"shape", "texture"}:
        raise ConfigError("need exactly one shape and one texture pair set")
    return by["shape"], by["texture"]


def stats_from_pooled(data: np.ndarray, sample_ids, pair_sets) -> NeuronStats:
    shape_ps, tex_ps = _split_pair_sets(pair_sets)
    index = {s: i for i, s in enumerate(sample_ids)}
    return neuron_stats(paired_from_matrix(data, index, shape_ps), paired_from_matrix(data, index, tex_ps))


def pooled_stage_features(encoder: EncoderHandle, sd: StylizedDataset, pair_sets, stages, batch_size=128):
    recs = records_in(pair_sets)
    samples = record_samples(sd, recs)
    images = np.stack([img for _, img in samples])
    out = stage_tensors(encoder, images, list(stages), batch_size)
    pooled = {s: (t.mean(axis=(2, 3), dtype=np.float64) if t.ndim == 4 else t.astype(np.float64))
              for s, t in out.items()}
    return pooled, [k for k, _ in samples]


def estimate_stage_allocations(encoder: EncoderHandle, sd: StylizedDataset, pair_sets, stages=None,
                               snapshot=None, baseline=DEFAULT_BASELINE, temperature=DEFAULT_TEMPERATURE,
                               return_stats=False):
    """One allocation per stage from globally pooled features."""
    if snapshot is not None:
        from .training import load_snapshot

        encoder = load_snapshot(encoder, snapshot)
    stages = list(stages or encoder.stage_names)
    pooled, ids = pooled_stage_features(encoder, sd, pair_sets, stages)
    allocs, all_stats = [], {}
    for s in stages:
        st = stats_from_pooled(pooled[s], ids, pair_sets)
        all_stats[s] = st
        allocs.append(allocate_dimensions(factor_scores(st), st.D, baseline, temperature, stage=s,
                                          epoch=None if snapshot is None else snapshot.epoch))
    return (allocs, all_stats) if return_stats else allocs


def snapshot_series(encoder: EncoderHandle, snapshots, sd: StylizedDataset, pair_sets, stage: str,
                    baseline=DEFAULT_BASELINE, temperature=DEFAULT_TEMPERATURE) -> list:
    if len(snapshots) < 2:
        raise ConfigError("a series needs at least two snapshots")
    series = []
    for snap in sorted(snapshots, key=lambda s: s.epoch):
        series.append(estimate_stage_allocations(encoder, sd, pair_sets, [stage], snap, baseline, temperature)[0])
    return series


# ------------------------------------------------------------- planted suite

def planted_suite(D: int = 64, k: int = 16, P: int = 2000, noise: float = 0.1, seed: int = 0):
    """Synthetic paired features with known factor structure.

    Dims ``0..k-1`` carry a code shared by both members of a shape pair,
    dims ``k..2k-1`` one shared by texture pairs; every other entry is
    independent.  Each shared dim gets additive noise of std ``noise``.
    """
    if 2 * k > D:
        raise ConfigError("need 2k <= D")
    rng = np.random.default_rng(seed)

    def make(shared_slice):
        A = rng.standard_normal((P, D))
        B = rng.standard_normal((P, D))
        code = rng.standard_normal((P, shared_slice.stop - shared_slice.start))
        A[:, shared_slice] = code + noise * rng.standard_normal(code.shape)
        B[:, shared_slice] = code + noise * rng.standard_normal(code.shape)
        return A, B

    sa, sb = make(slice(0, k))
    ta, tb = make(slice(k, 2 * k))
    return PairedFeatures("shape", sa, sb), PairedFeatures("texture", ta, tb)


def calibrate_baseline(temperature: float = DEFAULT_TEMPERATURE, seeds=(0, 1, 2), **suite_kw) -> float:
    """Baseline score at which the planted suite's continuous shape fraction equals k / D."""
    D = suite_kw.get("D", 64)
    k = suite_kw.get("k", 16)
    target = k / D
    scores = [factor_scores(neuron_stats(*planted_suite(seed=s, **suite_kw))) for s in seeds]
    s_shape = float(np.mean([s["shape"] for s in scores]))
    s_tex = float(np.mean([s["texture"] for s in scores]))
    lo, hi = 0.0, 1.0 + 10 * temperature
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        frac = softmax_fractions({"shape": s_shape, "texture": s_tex}, mid, temperature)[0]
        if frac > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ------------------------------------------------------------------------ io

def write_allocation_json(alloc: FactorAllocation, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(alloc.to_dict(), indent=1, sort_keys=True))
    return path


def write_ranking_csv(rankings, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "rank", "neuron", "mi"])
        for r in rankings:
            for rank, (i, v) in enumerate(r.entries):
                w.writerow([r.factor, rank, i, repr(float(v))])
    return path


def read_ranking_csv(path) -> dict:
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["factor"], []).append((int(row["rank"]), int(row["neuron"]), float(row["mi"])))
    return {f: NeuronRanking(f, [(n, v) for _, n, v in sorted(rows)]) for f, rows in out.items()}


def write_series_csv(series, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "shape_count", "texture_count", "residual_count", "shape_frac", "texture_frac"])
        for a in series:
            w.writerow([a.epoch, a.counts["shape"], a.counts["texture"], a.counts["residual"],
                        repr(a.fractions["shape"]), repr(a.fractions["texture"])])
    return path

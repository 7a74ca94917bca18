"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The desk setting is tiny encoders on synthetic textured shapes.  Encoders are
trained once per session (see ``conftest.py``) and shared between criteria.
"""
import time

import numpy as np
import torch

from conftest import desk_allocation, desk_encoder, desk_sections
from shapeprobe import dims
from shapeprobe.dissection import dissect_features, exceedance, generate_concept_set, quantile_thresholds
from shapeprobe.experiments import (factor_rankings, probe_base, readout_base, readout_data, readout_hyper,
                                    seed_majority, shape_bias, stage_allocations, texture_count_comparison)
from shapeprobe.readout import (ReadoutHyper, ReadoutSpec, compute_miou, evaluate_readout, oracle_handle,
                                oracle_readout_data, predict_masks, train_readout)
from shapeprobe.targeting import (apply_mask, keep_top_percent_mask, remove_top_n_mask, run_keep_experiment,
                                  run_removal_experiment)

SEEDS = (0, 1, 2)
RESNET = ("tiny_resnet", 3)
BAG3 = ("tiny_bagnet", 3)
BAG5 = ("tiny_bagnet", 5)


# ------------------------------------------------------------------ criterion 1

def test_criterion_01_mi_closed_form(verdict):
    t0 = time.perf_counter()
    rho = np.linspace(-0.999, 0.999, 2001)
    got = dims.mi_lower_bound(rho)
    want = -0.5 * np.log1p(-rho ** 2)
    err = float(np.max(np.abs(got - want)))
    at06 = float(dims.mi_lower_bound(0.6))
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-9 and round(at06, 5) == 0.22314 and elapsed < 1.0
    verdict(1, ok, f"max |err| {err:.2e}, mi(0.6) = {at06:.6f} nats, {elapsed:.3f}s")
    assert ok


# ------------------------------------------------------------------ criterion 2

def test_criterion_02_gaussian_oracle(verdict):
    t0 = time.perf_counter()
    P = 10_000
    rng = np.random.default_rng(2)
    errs = {}
    for r in (0.0, 0.3, 0.6, 0.9):
        a = rng.standard_normal(P)
        b = r * a + np.sqrt(1 - r ** 2) * rng.standard_normal(P)
        est = float(dims.pairwise_correlation(dims.PairedFeatures("shape", a, b))[0])
        errs[r] = abs(est - r)
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 0.02 and elapsed < 10.0
    verdict(2, ok, "|rho_hat - rho| " + ", ".join(f"{k}: {v:.4f}" for k, v in errs.items()) + f"; {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ criterion 3

def test_criterion_03_planted_recovery(verdict):
    t0 = time.perf_counter()
    k = 16
    shape_pf, tex_pf = dims.planted_suite(D=64, k=k, P=2000, seed=11)
    st = dims.neuron_stats(shape_pf, tex_pf)
    top = set(dims.rank_neurons(st, "shape").indices[:k])
    recovered = len(top & set(range(k))) / k
    alloc = dims.allocate_dimensions(dims.factor_scores(st), st.D)
    elapsed = time.perf_counter() - t0
    ok = recovered >= 0.95 and abs(alloc.counts["shape"] - k) <= 2 and elapsed < 30.0
    verdict(3, ok, f"recovered {recovered:.0%} of planted dims, shape count {alloc.counts['shape']} "
                   f"(b={alloc.baseline}, tau={alloc.temperature}); {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ criterion 4

def test_criterion_04_allocation_exactness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(1000):
        D = int(rng.integers(1, 4097))
        # scores are means of clamped correlations, so they live in [0, 1]
        s = {"shape": float(rng.uniform(0, 1)), "texture": float(rng.uniform(0, 1))}
        a = dims.allocate_dimensions(s, D, baseline=float(rng.uniform(0, 1)), temperature=float(rng.uniform(0.01, 2)))
        bad += sum(a.counts.values()) != D or min(a.counts.values()) < 0
    eq = dims.allocate_dimensions({"shape": 0.3, "texture": 0.3}, 2048, baseline=0.3, temperature=0.1).counts
    thirds = (eq["shape"], eq["texture"], eq["residual"])
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and thirds == (683, 683, 682) and elapsed < 5.0
    verdict(4, ok, f"{1000 - bad}/1000 draws sum to D; equal scores at D=2048 -> {thirds}; {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ criterion 5

def test_criterion_05_receptive_field_direction(verdict):
    t0 = time.perf_counter()
    per_seed = []
    for seed in SEEDS:
        r, _ = desk_allocation(*RESNET, seed)
        b, _ = desk_allocation(*BAG3, seed)
        per_seed.append((r.counts["shape"], r.counts["texture"], b.counts["shape"], b.counts["texture"]))
    flags = [bt > rt and bs < rs for rs, rt, bs, bt in per_seed]
    ok = seed_majority(flags)
    elapsed = time.perf_counter() - t0
    detail = "; ".join(f"seed {s}: resnet {rs}/{rt} vs bagnet3 {bs}/{bt} (shape/texture)"
                       for s, (rs, rt, bs, bt) in zip(SEEDS, per_seed))
    verdict(5, ok, f"{sum(flags)}/3 seeds: {detail}; {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ criterion 6

def test_criterion_06_snapshot_trend(verdict):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        a0, _ = desk_allocation(*RESNET, seed, epoch="0")
        af, _ = desk_allocation(*RESNET, seed)
        rows.append((a0.counts["shape"], af.counts["shape"], a0.counts["texture"], af.counts["texture"]))
    flags = [sf > s0 and tf < t0_ for s0, sf, t0_, tf in rows]
    ok = seed_majority(flags)
    elapsed = time.perf_counter() - t0
    detail = "; ".join(f"seed {s}: shape {a}->{b}, texture {c}->{d}" for s, (a, b, c, d) in zip(SEEDS, rows))
    verdict(6, ok, f"{sum(flags)}/3 seeds: {detail}; {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ criterion 7

def _brute_force_miou(pred, gt, K):
    ious = []
    for c in range(K):
        inter = union = 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            inter += (p == c) and (g == c)
            union += (p == c) or (g == c)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def test_criterion_07_readout_ordering(verdict):
    t0 = time.perf_counter()
    sec = desk_sections()
    tr, ev = readout_data(sec)
    _, _, enc = desk_encoder(*RESNET, 0)
    hyper = readout_hyper(sec, 0)
    miou = {}
    for mode in ("end_to_end", "frozen", "none"):
        ro = train_readout(enc, ReadoutSpec(stages=("f4",), mode=mode), tr, hyper)
        miou[mode] = evaluate_readout(enc, ro, ev).miou
    # ground truth area-pooled to the f2 grid (16 x 16) stands in for perfect features
    oh = oracle_handle(tr.num_classes)
    oro = train_readout(oh, ReadoutSpec(stages=("oracle",)), oracle_readout_data(oh, readout_base(sec), 16), hyper)
    oracle = evaluate_readout(None, oro, oracle_readout_data(oh, probe_base(sec), 16)).miou
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        K = int(rng.integers(2, 7))
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        gt = rng.integers(0, K, size=shape)
        pred = np.where(rng.uniform(size=shape) < 0.6, gt, rng.integers(0, K, size=shape))
        worst = max(worst, abs(compute_miou(pred, gt, K)[0] - _brute_force_miou(pred, gt, K)))
    elapsed = time.perf_counter() - t0
    ok = (miou["end_to_end"] >= miou["frozen"] >= miou["none"] and oracle >= 0.95 and worst <= 1e-12)
    verdict(7, ok, f"semantic mIoU end-to-end {miou['end_to_end']:.4f} >= frozen {miou['frozen']:.4f} >= "
                   f"random-init {miou['none']:.4f}; oracle {oracle:.4f}; engine max |err| {worst:.1e}; "
                   f"{elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ criterion 8

def test_criterion_08_stage_and_hypercolumn(verdict):
    t0 = time.perf_counter()
    sec = desk_sections()
    tr, ev = readout_data(sec)
    _, _, enc = desk_encoder(*RESNET, 0)
    hyper = readout_hyper(sec, 0)
    single = {}
    for s in enc.stage_names:
        single[s] = evaluate_readout(enc, train_readout(enc, ReadoutSpec(stages=(s,)), tr, hyper), ev).miou
    hc = evaluate_readout(enc, train_readout(enc, ReadoutSpec(stages=tuple(enc.stage_names)), tr, hyper), ev).miou
    deep, shallow = enc.stage_names[-1], enc.stage_names[0]
    best = max(single.values())
    elapsed = time.perf_counter() - t0
    ok = single[deep] > single[shallow] and hc >= best - 0.01
    verdict(8, ok, "semantic mIoU " + ", ".join(f"{k} {v:.4f}" for k, v in single.items())
            + f", hypercolumn {hc:.4f} (best single {best:.4f}); {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ criterion 9

def test_criterion_09_masking_identities(verdict):
    t0 = time.perf_counter()
    sec = desk_sections()
    tr, ev = readout_data(sec)
    _, _, enc = desk_encoder(*RESNET, 0)
    alloc, st = desk_allocation(*RESNET, 0)
    full, _ = factor_rankings(st, alloc)
    D = enc.channels("f4")
    hyper = ReadoutHyper(epochs=5, seed=0)
    spec = ReadoutSpec(stages=("f4",))
    plain = train_readout(enc, spec, tr, hyper)
    base_pred = predict_masks(plain, ev)
    base = evaluate_readout(enc, plain, ev)
    checks = []
    for f in ("shape", "texture", "residual"):
        rm0 = remove_top_n_mask(full[f], 0, D)
        res = evaluate_readout(enc, plain, ev, mask=rm0)
        checks.append(res.miou == base.miou and np.array_equal(predict_masks(plain, ev, rm0), base_pred))
        keep = keep_top_percent_mask(full[f], 100, D)
        kept = train_readout(enc, spec, tr, hyper, mask=keep)
        same_w = all(torch.equal(a, b) for a, b in zip(kept.head.state_dict().values(),
                                                         plain.head.state_dict().values()))
        checks.append(same_w and evaluate_readout(enc, kept, ev).miou == base.miou)
    z = torch.from_numpy(ev.features["f4"])
    rng = np.random.default_rng(9)
    idem = []
    for _ in range(50):
        order = [int(i) for i in rng.permutation(D)]
        m = (remove_top_n_mask(order, int(rng.integers(0, D + 1)), D) if rng.uniform() < 0.5
             else keep_top_percent_mask(order, float(rng.uniform(1, 100)), D))
        once = apply_mask(z, m)
        idem.append(torch.equal(apply_mask(once, m), once))
    elapsed = time.perf_counter() - t0
    ok = all(checks) and all(idem) and elapsed < 60.0
    verdict(9, ok, f"remove-0 / keep-100% bit-exact {sum(checks)}/{len(checks)}, idempotent {sum(idem)}/50; "
                   f"{elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------- criterion 10

def _series(rows, factor, task):
    pts = sorted((r.value, r.miou) for r in rows if r.factor == factor and r.task == task)
    return [m for _, m in pts]


def test_criterion_10_targeting_directions(verdict):
    t0 = time.perf_counter()
    sec = desk_sections()
    tg = sec["targeting"]
    tr, ev = readout_data(sec)
    keep_ok, remove_ok, shape_vs_res, notes = [], [], [], []
    for seed in SEEDS:
        _, _, enc = desk_encoder(*RESNET, seed, True)
        allocs, stats = stage_allocations(enc, sec, [tg["stage"]])
        full, restricted = factor_rankings(stats[tg["stage"]], allocs[0])
        hyper = readout_hyper(sec, seed)
        keep = run_keep_experiment(enc, restricted, tg["percents"], tr, ev, stage=tg["stage"], tasks=tg["tasks"],
                                   factors=tg["factors"], hyper=hyper)
        readouts = {t: train_readout(enc, ReadoutSpec(stages=(tg["stage"],), task=t), tr, hyper) for t in tg["tasks"]}
        rem = run_removal_experiment(enc, readouts, full, tg["Ns"], ev, factors=tg["remove_factors"])
        k_ok = all(np.all(np.diff(_series(keep, f, t)) >= 0) for f in tg["factors"] for t in tg["tasks"])
        r_ok = all(np.all(np.diff(_series(rem, f, t)) <= 0) for f in tg["remove_factors"] for t in tg["tasks"])
        shape_drop = float(np.mean(_series(rem, "shape", "semantic")[1:]))
        res_drop = float(np.mean(_series(rem, "residual", "semantic")[1:]))
        keep_ok.append(k_ok)
        remove_ok.append(r_ok)
        shape_vs_res.append(shape_drop < res_drop)
        notes.append(f"seed {seed}: keep {'ok' if k_ok else 'violated'}, remove {'ok' if r_ok else 'violated'}, "
                     f"mean sem mIoU after removal shape {shape_drop:.4f} vs residual {res_drop:.4f}")
    ok = seed_majority(keep_ok) and seed_majority(remove_ok) and seed_majority(shape_vs_res)
    elapsed = time.perf_counter() - t0
    verdict(10, ok, f"keep monotone {sum(keep_ok)}/3, removal monotone {sum(remove_ok)}/3, shape removal worse "
                    f"{sum(shape_vs_res)}/3; " + "; ".join(notes) + f"; {elapsed:.0f}s")
    assert ok


# ----------------------------------------------------------------- criterion 11

def test_criterion_11_dissection(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    N, D = 100_000, 200
    feats = np.concatenate([rng.standard_normal((N, D // 4)), rng.lognormal(size=(N, D // 4)),
                            rng.exponential(size=(N, D // 4)), rng.uniform(size=(N, D // 4))], axis=1)
    T, _ = quantile_thresholds(feats, 0.005)
    ex = exceedance(feats, T)
    in_band = float(np.mean((ex >= 0.004) & (ex <= 0.006)))

    cs = generate_concept_set(40, 32, seed=3, period_range=(8.0, 16.0))
    objects = [c for c, _, cat in cs.concepts if cat == "object"]
    target = max(objects, key=lambda c: cs.pixel_counts()[c])  # an object concept present in the set
    # indicator at mask resolution: the top 0.5% of its activations all fall on the concept
    planted = rng.uniform(0, 0.1, size=(len(cs.images), 8, 32, 32))
    hit = (cs.labels == target).any(axis=1).astype(np.float64)
    planted[:, 0] = hit + rng.uniform(0, 0.01, size=hit.shape)
    dres = dissect_features(planted, cs, 0.005, 0.04)
    detector = dres.best_concept[0] == target and 0 in dres.detectors

    cmp, _, _ = texture_count_comparison(desk_sections(), 0, (RESNET, BAG5, BAG3))
    rho = cmp["spearman"]
    elapsed = time.perf_counter() - t0
    ok = in_band >= 0.99 and detector and rho >= 0.5
    rows = ", ".join(f"{r['encoder']} {r['texture_detectors']}/{r['texture_dims']}" for r in cmp["rows"])
    verdict(11, ok, f"{in_band:.1%} of neurons with exceedance in [0.004, 0.006]; planted neuron -> "
                    f"{dres.concept_names[dres.best_concept[0]]} (IoU {dres.best_iou[0]:.3f}); texture detectors/"
                    f"dims {rows}; Spearman {rho:.3f}; {elapsed:.0f}s")
    assert ok


# ----------------------------------------------------------------- criterion 12

def _fmt(v):
    return "undefined" if v is None else f"{v:.3f}"


def test_criterion_12_bias_correlation(verdict):
    t0 = time.perf_counter()
    sec = desk_sections()
    flags, notes = [], []
    for seed in SEEDS:
        plain_b = shape_bias(sec, seed, False)
        styl_b = shape_bias(sec, seed, True)
        plain_a, _ = desk_allocation(*RESNET, seed, False)
        styl_a, _ = desk_allocation(*RESNET, seed, True)
        both = (styl_b.shape_bias is not None and plain_b.shape_bias is not None
                and styl_b.shape_bias > plain_b.shape_bias and styl_a.counts["shape"] > plain_a.counts["shape"])
        flags.append(both)
        notes.append(f"seed {seed}: shape_bias {_fmt(plain_b.shape_bias)} -> {_fmt(styl_b.shape_bias)}, "
                     f"|z_shape| {plain_a.counts['shape']} -> {styl_a.counts['shape']}")
    ok = seed_majority(flags)
    elapsed = time.perf_counter() - t0
    verdict(12, ok, f"{sum(flags)}/3 seeds (plain -> stylized): " + "; ".join(notes) + f"; {elapsed:.0f}s")
    assert ok


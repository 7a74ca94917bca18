"""Desk-scale pipelines and the cached experiment runner.

Every expensive intermediate (rendered datasets, stylised sets, trained
encoder runs) lives under the cache root, in a directory named by the digest
of whatever determines it plus the code version.  Run directories hold a
config copy, a log, result tables, plots and a manifest of artefacts.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import traceback
from dataclasses import asdict
from pathlib import Path

from .bias import classifier_predictor, cue_conflict_items, evaluate_shape_bias
from .config import DEFAULTS, ExperimentConfig, cache_root, code_version, digest
from .dims import (DEFAULT_BASELINE, FACTORS, assign_factor_neurons, estimate_stage_allocations, rank_neurons,
                   write_allocation_json, write_ranking_csv)
from .dissection import compare_texture_counts, dissect, generate_concept_set
from .encoders import EncoderConfig, build_reference_encoder
from .pairgen import (DatasetManifest, GeneratorConfig, FreshlyStylized, StyleBank, StylizedDataset, generate_textured_shapes,
                      sample_pairs, stylize_dataset)
from .readout import ReadoutHyper, ReadoutSpec, evaluate_readout, prepare_readout_data, train_readout
from .report import MANIFEST, emit_plots, write_table
from .targeting import MaskSpec, run_keep_experiment, run_removal_experiment
from .training import TrainHyper, load_classifier, load_run, load_snapshot, train_classifier

log = logging.getLogger("shapeprobe")

_DONE = ".complete"


def default_sections() -> dict:
    import copy

    return copy.deepcopy(DEFAULTS)


def _cached(kind: str, payload: dict, build, load):
    """Build once into ``<cache>/<kind>/<digest>``; afterwards only ``load``."""
    d = cache_root() / kind / digest(payload)[:20]
    if (d / _DONE).exists():
        return load(d)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    (d / "payload.json").write_text(json.dumps({"payload": payload, "code": code_version()}, indent=1,
                                               sort_keys=True))
    out = build(d)
    (d / _DONE).write_text("ok\n")
    return out


# ----------------------------------------------------------------- datasets

def dataset(gen: GeneratorConfig) -> DatasetManifest:
    gen.validate()
    return _cached("datasets", asdict(gen), lambda d: generate_textured_shapes(gen, d),
                   lambda d: DatasetManifest.load(d / "manifest.json"))


def stylized(base: DatasetManifest, k: int, seed: int) -> StylizedDataset:
    tag = f"k{k}-seed{seed}"
    path = base.root / f"stylized_{tag}.json"
    if path.exists():
        return StylizedDataset.load(path)
    sd = stylize_dataset(base, StyleBank.procedural(k, seed), out_dir=base.root / "styled" / tag)
    tmp = path.with_suffix(".tmp")
    sd.save(tmp)
    tmp.rename(path)
    return sd


def train_set(sections) -> DatasetManifest:
    ds = sections["dataset"]
    return dataset(GeneratorConfig(num_images=ds["num_images"], num_classes=ds["num_classes"],
                                   image_size=ds["image_size"], seed=ds["seed"], split="train",
                                   texture_mode=ds["texture_mode"], signature_prob=ds["signature_prob"],
                                   name="train"))


def probe_base(sections) -> DatasetManifest:
    """Held-out base images (independent textures): pair source, validation and read-out evaluation set."""
    ds, ps = sections["dataset"], sections["probe_set"]
    return dataset(GeneratorConfig(num_images=ps["num_images"], num_classes=ds["num_classes"],
                                   image_size=ds["image_size"], seed=ps["seed"], split="val", name="probe"))


def readout_base(sections) -> DatasetManifest:
    ds, rs = sections["dataset"], sections["readout_set"]
    return dataset(GeneratorConfig(num_images=rs["num_images"], num_classes=ds["num_classes"],
                                   image_size=ds["image_size"], seed=rs["seed"], split="train", name="readout"))


def cue_conflict_set(sections) -> DatasetManifest:
    ds, b = sections["dataset"], sections["bias"]
    return dataset(GeneratorConfig(num_images=b["num_images"], num_classes=ds["num_classes"],
                                   image_size=ds["image_size"], seed=b["seed"], split="val",
                                   texture_mode="cue_conflict", name="cueconflict"))


def probe_pairs(sections):
    """Stylised probe set plus its shape and texture pair sets (equal sizes)."""
    st = sections["styles"]
    sd = stylized(probe_base(sections), st["k"], st["seed"])
    return sd, [sample_pairs(sd, "shape"), sample_pairs(sd, "texture", None)]


def concept_set(sections):
    dc = sections["dissection"]
    return generate_concept_set(dc["num_images"], sections["dataset"]["image_size"], dc["seed"],
                                num_families=sections["dataset"]["num_classes"],
                                period_range=tuple(dc["period_range"]))


# ----------------------------------------------------------------- training

def train_hyper(sections, seed: int) -> TrainHyper:
    t = sections["train"]
    return TrainHyper(seed=seed, epochs=t["epochs"], lr=t["lr"], batch_size=t["batch_size"],
                      optimizer=t["optimizer"], milestones=tuple(t["milestones"]))


def encoder_spec(sections, arch=None, cap=None) -> tuple:
    enc = sections["encoder"]
    arch = arch or enc["arch"]
    cap = int(cap if cap is not None else enc["receptive_field_cap"])
    return arch, (cap if arch == "tiny_bagnet" else 3)


def trained_encoder(sections, seed: int, arch=None, cap=None, stylized_training=None):
    """(initial handle, snapshots, final handle) for one training run, cached on disk."""
    arch, cap = encoder_spec(sections, arch, cap)
    styl = sections["train"]["stylized"] if stylized_training is None else stylized_training
    payload = {"dataset": sections["dataset"], "probe_set": sections["probe_set"], "train": sections["train"],
               "arch": arch, "cap": cap, "seed": seed, "stylized": bool(styl),
               "train_styles": sections["train_styles"] if styl else None}
    handle = build_reference_encoder(arch, EncoderConfig(seed=seed, receptive_field_cap=cap))

    def build(d):
        data = train_set(sections)
        if styl:
            ts = sections["train_styles"]
            if ts["mode"] == "fresh":
                data = FreshlyStylized(data, ts["seed"])
            else:
                data = stylized(data, ts["k"], ts["seed"])
        log.info("training %s seed=%d stylized=%s", handle.encoder_id, seed, bool(styl))
        return train_classifier(handle.clone(), data, train_hyper(sections, seed),
                                snapshot_every=sections["train"]["snapshot_every"], run_dir=d,
                                val_set=probe_base(sections))

    snaps = _cached("runs", payload, build, load_run)
    return handle, snaps, load_snapshot(handle, snaps[-1])


# ------------------------------------------------------------------ analyses

def stage_allocations(handle, sections, stages=None):
    sd, pairs = probe_pairs(sections)
    dm = sections["dims"]
    b = DEFAULT_BASELINE if dm["baseline"] is None else dm["baseline"]
    return estimate_stage_allocations(handle, sd, pairs, stages=stages, baseline=b, temperature=dm["temperature"],
                                      return_stats=True)


def factor_rankings(stats, alloc):
    """Full-length rankings per factor, and rankings restricted to each factor's allocated neurons."""
    full = {f: rank_neurons(stats, f) for f in FACTORS}
    members = assign_factor_neurons(stats, alloc)
    return full, {f: full[f].restricted(members[f]) for f in FACTORS}


def readout_hyper(sections, seed: int) -> ReadoutHyper:
    r = sections["readout"]
    return ReadoutHyper(lr=r["lr"], epochs=r["epochs"], batch_size=r["batch_size"], seed=seed)


def readout_data(sections):
    return prepare_readout_data(None, readout_base(sections)), prepare_readout_data(None, probe_base(sections))


def shape_bias(sections, seed: int, stylized_training: bool):
    handle, snaps, _ = trained_encoder(sections, seed, stylized_training=stylized_training)
    model = load_classifier(handle, snaps[-1])
    return evaluate_shape_bias(classifier_predictor(model), cue_conflict_items(cue_conflict_set(sections)))


# -------------------------------------------------------------- run directory

def _alloc_row(seed, a):
    return [seed, a.stage, a.counts["shape"], a.counts["texture"], a.counts["residual"],
            float(a.fractions["shape"]), float(a.fractions["texture"])]


ALLOC_HEADER = ["seed", "stage", "shape", "texture", "residual", "shape_frac", "texture_frac"]


def _run_dims(cfg, run_dir, tables):
    rows = []
    for seed in cfg.seeds:
        _, _, handle = trained_encoder(cfg.sections, seed)
        allocs, stats = stage_allocations(handle, cfg.sections)
        sdir = run_dir / f"seed_{seed}"
        for a in allocs:
            write_allocation_json(a, sdir / f"allocation_{a.stage}.json")
            rows.append(_alloc_row(seed, a))
        st = cfg["dims"]["stage"]
        write_ranking_csv([rank_neurons(stats[st], f) for f in FACTORS], sdir / f"ranking_{st}.csv")
    tables["allocation"] = write_table(run_dir / "allocation.csv", ALLOC_HEADER, rows).name


def _run_series(cfg, run_dir, tables):
    rows = []
    stage = cfg["dims"]["stage"]
    for seed in cfg.seeds:
        handle, snaps, _ = trained_encoder(cfg.sections, seed)
        for snap in snaps:
            allocs, _ = stage_allocations(load_snapshot(handle, snap), cfg.sections, [stage])
            a = allocs[0]
            rows.append([seed, snap.epoch] + _alloc_row(seed, a)[2:])
    tables["series"] = write_table(run_dir / "series.csv", ["seed", "epoch"] + ALLOC_HEADER[2:], rows).name


def _run_readout(cfg, run_dir, tables):
    r = cfg["readout"]
    spec = ReadoutSpec(stages=tuple(r["stages"]), layers=r["layers"], task=r["task"], mode=r["mode"],
                       hidden=r["hidden"])
    mask = MaskSpec.load(r["mask"]) if r.get("mask") else None
    tr, ev = readout_data(cfg.sections)
    rows = []
    for seed in cfg.seeds:
        _, _, handle = trained_encoder(cfg.sections, seed)
        ro = train_readout(handle, spec, tr, readout_hyper(cfg.sections, seed), mask=mask)
        res = evaluate_readout(handle, ro, ev)
        sdir = run_dir / f"seed_{seed}"
        res.save(sdir / "probe_result.json")
        ro.save(sdir / "readout")
        rows.append([seed, spec.task, spec.mode, "+".join(spec.stages), res.miou])
    tables["readout"] = write_table(run_dir / "readout.csv", ["seed", "task", "mode", "stages", "miou"], rows).name


def _grid_rows(seed, rows, value_name, extra=None):
    by_value = {}
    for g in rows:
        by_value.setdefault(g.value, {})[f"{g.factor}_{g.task}"] = g.miou
    cols = sorted({k for d in by_value.values() for k in d})
    extra = extra or {}
    ecols = sorted(extra)
    out = [[seed, v] + [by_value[v].get(c) for c in cols] + [extra[c] for c in ecols] for v in sorted(by_value)]
    return ["seed", value_name] + cols + ecols, out


def _save_grid(grid, path, baselines=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"cells": [asdict(g) for g in grid], "baselines": baselines or {}}
    path.write_text(json.dumps(body, indent=1, sort_keys=True))


def _run_keep(cfg, run_dir, tables):
    t = cfg["targeting"]
    tr, ev = readout_data(cfg.sections)
    header, rows = None, []
    for seed in cfg.seeds:
        _, _, handle = trained_encoder(cfg.sections, seed)
        allocs, stats = stage_allocations(handle, cfg.sections, [t["stage"]])
        _, restricted = factor_rankings(stats[t["stage"]], allocs[0])
        hyper = readout_hyper(cfg.sections, seed)
        grid = run_keep_experiment(handle, restricted, t["percents"], tr, ev, stage=t["stage"], tasks=t["tasks"],
                                   factors=t["factors"], layers=cfg["readout"]["layers"], hyper=hyper)
        base = {}
        for task in t["tasks"]:
            spec = ReadoutSpec(stages=(t["stage"],), layers=cfg["readout"]["layers"], task=task)
            base[f"baseline_{task}"] = evaluate_readout(handle, train_readout(handle, spec, tr, hyper), ev).miou
        _save_grid(grid, run_dir / f"seed_{seed}" / "keep_grid.json", base)
        header, r = _grid_rows(seed, grid, "X", base)
        rows += r
    tables["keep"] = write_table(run_dir / "keep.csv", header, rows).name


def _run_remove(cfg, run_dir, tables):
    t = cfg["targeting"]
    tr, ev = readout_data(cfg.sections)
    header, rows = None, []
    for seed in cfg.seeds:
        _, _, handle = trained_encoder(cfg.sections, seed)
        allocs, stats = stage_allocations(handle, cfg.sections, [t["stage"]])
        full, _ = factor_rankings(stats[t["stage"]], allocs[0])
        hyper = readout_hyper(cfg.sections, seed)
        readouts = {task: train_readout(handle, ReadoutSpec(stages=(t["stage"],), layers=cfg["readout"]["layers"],
                                                            task=task), tr, hyper) for task in t["tasks"]}
        grid = run_removal_experiment(handle, readouts, full, t["Ns"], ev, factors=t["remove_factors"])
        _save_grid(grid, run_dir / f"seed_{seed}" / "removal_grid.json")
        header, r = _grid_rows(seed, grid, "N")
        rows += r
    tables["removal"] = write_table(run_dir / "removal.csv", header, rows).name


def _run_dissect(cfg, run_dir, tables):
    dc = cfg["dissection"]
    concepts = concept_set(cfg.sections)
    rows = []
    for seed in cfg.seeds:
        _, _, handle = trained_encoder(cfg.sections, seed)
        res = dissect(handle, dc["stage"], concepts, dc["q"], dc["iou"])
        res.save(run_dir / f"seed_{seed}" / "dissection.json")
        allocs, _ = stage_allocations(handle, cfg.sections, [dc["stage"]])
        cmp = compare_texture_counts({handle.encoder_id: res}, {handle.encoder_id: allocs[0]})["rows"][0]
        rows.append([seed, handle.encoder_id, res.counts.get("texture", 0), res.counts.get("color", 0),
                     res.counts.get("object", 0), cmp["texture_detectors"], cmp["texture_dims"]])
    tables["dissection"] = write_table(run_dir / "dissection.csv",
                                       ["seed", "encoder", "texture", "color", "object", "texture_detectors",
                                        "texture_dims"], rows).name


def _run_bias(cfg, run_dir, tables):
    rows = []
    styl = cfg["train"]["stylized"]
    for seed in cfg.seeds:
        res = shape_bias(cfg.sections, seed, styl)
        res.save(run_dir / f"seed_{seed}" / "bias.json")
        _, _, handle = trained_encoder(cfg.sections, seed, stylized_training=styl)
        allocs, _ = stage_allocations(handle, cfg.sections, [cfg["dims"]["stage"]])
        rows.append([seed, handle.encoder_id, styl, res.shape_bias, res.texture_bias, res.coverage,
                     allocs[0].counts["shape"]])
    tables["bias"] = write_table(run_dir / "bias.csv", ["seed", "encoder", "stylized", "shape_bias",
                                                        "texture_bias", "coverage", "shape_dims"], rows).name


RUNNERS = {"dims": _run_dims, "snapshot_series": _run_series, "readout": _run_readout, "keep": _run_keep,
           "remove": _run_remove, "dissect": _run_dissect, "bias": _run_bias}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(config) -> Path:
    """Run (or reuse) the experiment described by ``config``; returns its run directory.

    The directory name carries the config digest; a completed directory with
    the same digest is returned untouched.  Validation happens before any
    directory is created.  On failure the manifest is marked ``failed`` and
    ``error.txt`` holds the traceback.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    dg = cfg.digest
    run_dir = Path(cfg.out_dir) / f"{cfg.kind}-{dg[:12]}"
    man_path = run_dir / MANIFEST
    if man_path.exists():
        man = json.loads(man_path.read_text())
        if man.get("status") == "complete" and man.get("digest") == dg:
            log.info("reusing %s", run_dir)
            return run_dir
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    cfg.save(run_dir / "config.json")
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    tables = {}
    try:
        log.info("kind=%s digest=%s seeds=%s", cfg.kind, dg, cfg.seeds)
        RUNNERS[cfg.kind](cfg, run_dir, tables)
        plots = [p.name for p in emit_plots(run_dir)]
        log.info("done")
    except Exception as exc:
        log.removeHandler(handler)
        handler.close()
        (run_dir / "error.txt").write_text(traceback.format_exc())
        man = {"status": "failed", "digest": dg, "kind": cfg.kind, "error": f"{type(exc).__name__}: {exc}"}
        man_path.write_text(json.dumps(man, indent=1, sort_keys=True))
        raise
    log.removeHandler(handler)
    handler.close()
    artefacts = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != MANIFEST)
    man = {"status": "complete", "digest": dg, "kind": cfg.kind, "code_version": code_version(),
           "tables": {k: v for k, v in sorted(tables.items())}, "plots": sorted(plots),
           "artifacts": {str(p.relative_to(run_dir)): _sha256(p) for p in artefacts}}
    man_path.write_text(json.dumps(man, indent=1, sort_keys=True))
    return run_dir


def desk_config(kind: str, seeds=(0,), out_dir="runs", **sections) -> ExperimentConfig:
    raw = {"kind": kind, "seeds": list(seeds), "out_dir": str(out_dir)}
    raw.update(sections)
    return ExperimentConfig.from_dict(raw)


def texture_count_comparison(sections, seed: int, encoders=(("tiny_resnet", 3), ("tiny_bagnet", 5),
                                                            ("tiny_bagnet", 3))):
    """Dissection texture detectors vs allocated texture neurons across encoders (one seed)."""
    dc = sections["dissection"]
    concepts = concept_set(sections)
    results, allocs = {}, {}
    for arch, cap in encoders:
        _, _, h = trained_encoder(sections, seed, arch, cap, stylized_training=False)
        results[h.encoder_id] = dissect(h, dc["stage"], concepts, dc["q"], dc["iou"])
        allocs[h.encoder_id] = stage_allocations(h, sections, [dc["stage"]])[0][0]
    return compare_texture_counts(results, allocs), results, allocs


def seed_majority(flags) -> bool:
    flags = [bool(f) for f in flags]
    return sum(flags) * 2 > len(flags)


__all__ = ["run_experiment", "desk_config", "trained_encoder", "stage_allocations", "factor_rankings",
           "probe_pairs", "readout_data", "shape_bias", "texture_count_comparison", "seed_majority",
           "concept_set", "default_sections"]

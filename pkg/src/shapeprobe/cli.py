"""``probe`` command line.  Exit codes: 0 success, 2 invalid input, 1 runtime failure."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AdapterValidationError, ConfigError, DomainError, ProbeError, StageError, UnknownTableError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _ints(s):
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from e


def _floats(s):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from e


def _encoder(s):
    """``tiny_resnet`` or ``tiny_bagnet:<cap>``."""
    arch, _, cap = s.partition(":")
    if arch not in ("tiny_resnet", "tiny_bagnet"):
        raise argparse.ArgumentTypeError(f"unknown encoder {s!r}")
    if arch == "tiny_bagnet":
        if not cap.isdigit():
            raise argparse.ArgumentTypeError("tiny_bagnet needs a receptive-field cap, e.g. tiny_bagnet:5")
        return {"arch": arch, "receptive_field_cap": int(cap)}
    return {"arch": arch, "receptive_field_cap": 3}


# ------------------------------------------------------------------- config

def _experiment_args(p):
    p.add_argument("--config", help="YAML or JSON experiment config; flags override its values")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds")
    p.add_argument("--encoder", type=_encoder, help="tiny_resnet or tiny_bagnet:<cap>")
    p.add_argument("--stylized", action="store_true", help="use the stylised-trained encoder")
    p.add_argument("--out", help="output directory for run folders")


def _base_config(args, kind):
    from .config import validate_config
    import yaml

    raw = {}
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config} does not hold a mapping")
    raw["kind"] = kind
    raw.setdefault("seeds", [0])
    if args.seeds:
        raw["seeds"] = args.seeds
    if args.out:
        raw["out_dir"] = args.out
    if args.encoder:
        raw.setdefault("encoder", {}).update(args.encoder)
    if args.stylized:
        raw.setdefault("train", {})["stylized"] = True
    validate_config(raw)
    return raw


def _section(raw, name, **values):
    sec = raw.setdefault(name, {})
    sec.update({k: v for k, v in values.items() if v is not None})


def _run(raw):
    from .experiments import run_experiment

    run_dir = run_experiment(raw)
    print(run_dir)
    return EXIT_OK


# -------------------------------------------------------------------- verbs

def cmd_generate(args):
    from .pairgen import GeneratorConfig, generate_textured_shapes

    cfg = GeneratorConfig(num_images=args.num_images, num_classes=args.num_classes, image_size=args.image_size,
                          seed=args.seed, split=args.split, texture_mode=args.texture_mode, name=args.name,
                          signature_prob=args.signature_prob)
    cfg.validate()
    print(generate_textured_shapes(cfg, args.out).root / "manifest.json")
    return EXIT_OK


def cmd_stylize(args):
    from .pairgen import DatasetManifest, StyleBank, stylize_dataset

    base = DatasetManifest.load(args.manifest)
    if args.styles.isdigit():
        bank = StyleBank.procedural(int(args.styles), args.seed)
    else:
        bank = StyleBank.load(args.styles)
    out_dir = Path(args.out) if args.out else None
    sd = stylize_dataset(base, bank, out_dir=out_dir, workers=args.workers)
    # records go under the base manifest's "stylized" key unless a separate file is requested
    print(sd.save(args.records))
    return EXIT_OK


def _load_data(path):
    from .pairgen import DatasetManifest, StylizedDataset

    data = json.loads(Path(path).read_text())
    return StylizedDataset.load(path) if "stylized" in data else DatasetManifest.load(path)


def cmd_train(args):
    from .encoders import EncoderConfig, build_reference_encoder
    from .training import TrainHyper, train_classifier

    enc = args.encoder
    handle = build_reference_encoder(enc["arch"], EncoderConfig(seed=args.seed,
                                                                receptive_field_cap=enc["receptive_field_cap"]))
    hyper = TrainHyper(seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                       optimizer=args.optimizer)
    val = _load_data(args.val) if args.val else None
    snaps = train_classifier(handle, _load_data(args.manifest), hyper, args.snapshot_every, args.run_dir, val)
    for s in snaps:
        print(s.epoch, s.parameter_blob_path, json.dumps(s.metrics, sort_keys=True))
    return EXIT_OK


def cmd_extract(args):
    from .encoders import EncoderConfig, build_reference_encoder, extract_features, manifest_samples
    from .training import load_run, load_snapshot

    snaps = load_run(args.run)
    if not snaps:
        raise ConfigError(f"{args.run} holds no snapshots")
    by_epoch = {s.epoch: s for s in snaps}
    epoch = snaps[-1].epoch if args.epoch is None else args.epoch
    if epoch not in by_epoch:
        raise ConfigError(f"no snapshot for epoch {epoch}; have {sorted(by_epoch)}")
    meta = json.loads((Path(by_epoch[epoch].parameter_blob_path).parent / "meta.json").read_text())
    enc_cfg = meta.get("encoder_config") or {}
    arch = enc_cfg.get("arch", args.encoder["arch"] if args.encoder else "tiny_resnet")
    cap = enc_cfg.get("receptive_field_cap", args.encoder["receptive_field_cap"] if args.encoder else None)
    handle = build_reference_encoder(arch, EncoderConfig(seed=enc_cfg.get("seed", 0), receptive_field_cap=cap))
    handle = load_snapshot(handle, by_epoch[epoch])
    data = _load_data(args.manifest)
    if hasattr(data, "as_manifest"):
        data = data.as_manifest()
    fm = extract_features(handle, manifest_samples(data), args.stage, pooling=args.pooling)
    print(fm.save(args.out))
    return EXIT_OK


def cmd_dims(args):
    raw = _base_config(args, "snapshot_series" if args.series else "dims")
    _section(raw, "dims", stage=args.stage, baseline=args.baseline, temperature=args.temperature)
    return _run(raw)


def cmd_readout(args):
    raw = _base_config(args, "readout")
    _section(raw, "readout", stages=args.stage, layers=args.layers, task=args.task, mode=args.mode,
             mask=args.mask, epochs=args.epochs)
    return _run(raw)


def cmd_target(args):
    raw = _base_config(args, args.action)
    factors = [args.factor] if args.factor else None
    _section(raw, "targeting", stage=args.stage, percents=args.percents, Ns=args.Ns,
             tasks=[args.task] if args.task else None,
             **{"factors" if args.action == "keep" else "remove_factors": factors})
    return _run(raw)


def cmd_dissect(args):
    raw = _base_config(args, "dissect")
    _section(raw, "dissection", stage=args.stage, q=args.q, iou=args.iou)
    return _run(raw)


def cmd_bias(args):
    if args.run:
        return _bias_of_run(args)
    raw = _base_config(args, "bias")
    return _run(raw)


def _bias_of_run(args):
    from .bias import classifier_predictor, cue_conflict_items, evaluate_shape_bias
    from .encoders import EncoderConfig, build_reference_encoder
    from .pairgen import DatasetManifest
    from .training import load_classifier, load_run

    if not args.cueconflict:
        raise ConfigError("--run needs --cueconflict <manifest.json>")
    snaps = load_run(args.run)
    if not snaps:
        raise ConfigError(f"{args.run} holds no snapshots")
    meta = json.loads((Path(snaps[-1].parameter_blob_path).parent / "meta.json").read_text())
    enc_cfg = meta.get("encoder_config") or {}
    enc = args.encoder or {"arch": "tiny_resnet", "receptive_field_cap": 3}
    handle = build_reference_encoder(enc_cfg.get("arch", enc["arch"]),
                                     EncoderConfig(seed=enc_cfg.get("seed", 0),
                                                   receptive_field_cap=enc_cfg.get("receptive_field_cap",
                                                                                   enc["receptive_field_cap"])))
    model = load_classifier(handle, snaps[-1])
    res = evaluate_shape_bias(classifier_predictor(model), cue_conflict_items(DatasetManifest.load(args.cueconflict)))
    out = res.save(Path(args.out or args.run) / "bias.json")
    print(out)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_report(args):
    from .report import emit_plots, export_table, table_ids

    run = Path(args.run)
    if not (run / "manifest.json").exists():
        raise ConfigError(f"{run} is not a run directory (no manifest.json)")
    if args.plots:
        for p in emit_plots(run):
            print(p)
    ids = [args.table] if args.table else sorted(table_ids(run))
    for t in ids:
        print(export_table(run, t, args.format, args.out if args.table else None))
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probe", description="Shape/texture dimensionality probes for vision encoders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a textured-shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-images", type=int, default=2000)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=["train", "val"], default="train")
    g.add_argument("--texture-mode", choices=["independent", "signature", "cue_conflict"], default="independent")
    g.add_argument("--signature-prob", type=float, default=1.0)
    g.add_argument("--name", default="shapes")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("stylize", help="re-render a dataset under K styles")
    s.add_argument("--manifest", required=True)
    s.add_argument("--styles", default="5", help="number of procedural styles, or a style bank JSON")
    s.add_argument("--seed", type=int, default=0, help="seed of the procedural style bank")
    s.add_argument("--backend", choices=["procedural"], default="procedural")
    s.add_argument("--out", help="directory for stylised images (default: next to the base images)")
    s.add_argument("--records", help="write records to this JSON instead of the base manifest")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_stylize)

    t = sub.add_parser("train", help="train an encoder with a linear classification head")
    t.add_argument("--manifest", required=True, help="dataset or stylised-dataset JSON")
    t.add_argument("--val", help="validation manifest")
    t.add_argument("--encoder", type=_encoder, default=_encoder("tiny_resnet"))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=12)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--snapshot-every", type=int, default=3)
    t.add_argument("--run-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="write pooled stage features of a snapshot")
    e.add_argument("--run", required=True)
    e.add_argument("--epoch", type=int)
    e.add_argument("--encoder", type=_encoder, help="fallback when the snapshot lacks its config")
    e.add_argument("--manifest", required=True)
    e.add_argument("--stage", default="f4")
    e.add_argument("--pooling", choices=["global_avg", "none"], default="global_avg")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    d = sub.add_parser("dims", help="estimate shape/texture/residual dimensionality")
    _experiment_args(d)
    d.add_argument("--stage")
    d.add_argument("--baseline", type=float)
    d.add_argument("--temperature", type=float)
    d.add_argument("--series", action="store_true", help="estimate at every training snapshot")
    d.set_defaults(func=cmd_dims)

    r = sub.add_parser("readout", help="train and evaluate a segmentation read-out")
    r.add_argument("action", choices=["train"])
    _experiment_args(r)
    r.add_argument("--stage", type=lambda v: v.split(","), help="stage or comma-separated hypercolumn")
    r.add_argument("--layers", type=int, choices=[1, 3])
    r.add_argument("--task", choices=["semantic", "binary"])
    r.add_argument("--mode", choices=["frozen", "none", "end_to_end"])
    r.add_argument("--mask", help="channel mask JSON")
    r.add_argument("--epochs", type=int)
    r.set_defaults(func=cmd_readout)

    tg = sub.add_parser("target", help="keep-top-X% or remove-top-N channel experiments")
    tg.add_argument("action", choices=["keep", "remove"])
    _experiment_args(tg)
    tg.add_argument("--stage")
    tg.add_argument("--factor", choices=["shape", "texture", "residual"])
    tg.add_argument("--task", choices=["semantic", "binary"])
    tg.add_argument("--percents", type=_floats)
    tg.add_argument("--Ns", type=_ints)
    tg.set_defaults(func=cmd_target)

    ds = sub.add_parser("dissect", help="count concept detectors")
    _experiment_args(ds)
    ds.add_argument("--stage")
    ds.add_argument("--q", type=float)
    ds.add_argument("--iou", type=float)
    ds.set_defaults(func=cmd_dissect)

    b = sub.add_parser("bias", help="cue-conflict shape bias")
    _experiment_args(b)
    b.add_argument("--run", help="training run directory to evaluate directly")
    b.add_argument("--cueconflict", help="cue-conflict manifest (with --run)")
    b.set_defaults(func=cmd_bias)

    rp = sub.add_parser("report", help="export tables and plots of a run")
    rp.add_argument("--run", required=True)
    rp.add_argument("--table")
    rp.add_argument("--format", choices=["csv", "json", "markdown"], default="csv")
    rp.add_argument("--out")
    rp.add_argument("--plots", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"probe: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownTableError, StageError, DomainError, AdapterValidationError, FileNotFoundError) as e:
        print(f"probe: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ProbeError as e:
        print(f"probe: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"probe: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Run every experiment kind at the default desk scale and export markdown tables.

Trained encoders and datasets land under $PROBE_CACHE_ROOT, so kinds that
share an encoder only train it once.
"""
import argparse
import logging
from pathlib import Path

from shapeprobe.config import KINDS
from shapeprobe.experiments import desk_config, run_experiment
from shapeprobe.report import export_table, table_ids


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs")
    p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], default=[0, 1, 2])
    p.add_argument("--kinds", type=lambda s: s.split(","), default=list(KINDS))
    p.add_argument("--stylized", action="store_true", help="use stylised-trained encoders where it matters")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    for kind in args.kinds:
        extra = {"train": {"stylized": True}} if args.stylized and kind in ("keep", "remove") else {}
        run = run_experiment(desk_config(kind, args.seeds, args.out, **extra))
        for tid in table_ids(run):
            md = export_table(run, tid, "markdown")
            print(f"\n## {kind}: {tid} ({Path(run).name})\n")
            print(md.read_text())


if __name__ == "__main__":
    main()

import os
import tempfile
from functools import lru_cache

import pytest

# trained encoders and rendered datasets are cached here for the whole session;
# point PROBE_CACHE_ROOT at a persistent directory to reuse them across runs
if not os.environ.get("PROBE_CACHE_ROOT"):
    os.environ["PROBE_CACHE_ROOT"] = tempfile.mkdtemp(prefix="probe-cache-")

from shapeprobe.experiments import default_sections, stage_allocations, trained_encoder  # noqa: E402


@lru_cache(maxsize=None)
def desk_sections():
    return default_sections()


@lru_cache(maxsize=None)
def desk_encoder(arch: str, cap: int, seed: int, stylized: bool = False):
    """(initial handle, snapshots, trained handle) under the default desk configuration."""
    return trained_encoder(desk_sections(), seed, arch, cap, stylized_training=stylized)


@lru_cache(maxsize=None)
def desk_allocation(arch: str, cap: int, seed: int, stylized: bool = False, epoch: str = "final", stage: str = "f4"):
    handle, snaps, final = desk_encoder(arch, cap, seed, stylized)
    if epoch == "final":
        enc = final
    else:
        from shapeprobe.training import load_snapshot

        enc = load_snapshot(handle, next(s for s in snaps if s.epoch == int(epoch)))
    allocs, stats = stage_allocations(enc, desk_sections(), [stage])
    return allocs[0], stats[stage]


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line per acceptance criterion, visible without ``-s``."""

    def emit(criterion: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def tiny_sections() -> dict:
    """Config sections small enough for a full experiment in a few seconds."""
    return {
        "dataset": {"num_images": 80}, "probe_set": {"num_images": 16}, "readout_set": {"num_images": 16},
        "train": {"epochs": 2, "snapshot_every": 1}, "readout": {"epochs": 2},
        "dissection": {"num_images": 12}, "bias": {"num_images": 16},
    }

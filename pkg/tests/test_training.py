import json

import numpy as np
import pytest
import torch

from shapeprobe.encoders import EncoderConfig, build_reference_encoder, extract_features, manifest_samples
from shapeprobe.errors import ConfigError, TrainingDiverged
from shapeprobe.pairgen import FreshlyStylized, GeneratorConfig, StyleBank, generate_textured_shapes, stylize_dataset
from shapeprobe.training import (TrainHyper, classification_arrays, load_classifier, load_run, load_snapshot,
                                 train_classifier)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    return generate_textured_shapes(GeneratorConfig(num_images=40, num_classes=4, seed=3), root)


def _train(data, run_dir, epochs=2, every=1, seed=0, arch="tiny_resnet"):
    h = build_reference_encoder(arch, EncoderConfig(seed=seed, receptive_field_cap=3))
    snaps = train_classifier(h, data, TrainHyper(seed=seed, epochs=epochs, batch_size=16), every, run_dir)
    return h, snaps


def test_snapshot_count_and_layout(data, tmp_path):
    _, snaps = _train(data, tmp_path, epochs=3, every=1)
    assert [s.epoch for s in snaps] == [0, 1, 2, 3]
    for s in snaps:
        d = tmp_path / f"epoch_{s.epoch}"
        assert (d / "params.bin").exists()
        meta = json.loads((d / "meta.json").read_text())
        assert set(meta["metrics"]) >= {"train_loss", "val_accuracy"}
        assert meta["encoder_config"]["arch"] == "tiny_resnet"
    assert [s.epoch for s in load_run(tmp_path)] == [0, 1, 2, 3]


def test_snapshot_every_keeps_final(data, tmp_path):
    _, snaps = _train(data, tmp_path, epochs=3, every=2)
    assert [s.epoch for s in snaps] == [0, 2, 3]


def test_epoch_zero_is_chance_level(data, tmp_path):
    _, snaps = _train(data, tmp_path, epochs=1)
    assert abs(snaps[0].metrics["val_accuracy"] - 0.25) < 0.2


def test_fixed_seed_replays_exactly(data, tmp_path):
    _, a = _train(data, tmp_path / "a")
    _, b = _train(data, tmp_path / "b")
    assert a[-1].metrics == b[-1].metrics
    sa = torch.load(a[-1].parameter_blob_path, weights_only=True)
    sb = torch.load(b[-1].parameter_blob_path, weights_only=True)
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_snapshot_roundtrip_extracts_identically(data, tmp_path):
    h, snaps = _train(data, tmp_path)
    live = extract_features(h, manifest_samples(data), "f4").data
    fresh = build_reference_encoder("tiny_resnet", EncoderConfig(seed=0))
    loaded = extract_features(load_snapshot(fresh, snaps[-1]), manifest_samples(data), "f4").data
    assert np.array_equal(live, loaded)
    init = extract_features(load_snapshot(fresh, snaps[0]), manifest_samples(data), "f4").data
    assert not np.array_equal(init, loaded)


def test_classifier_reload_predicts_like_metrics(data, tmp_path):
    from shapeprobe.training import accuracy

    h, snaps = _train(data, tmp_path)
    model = load_classifier(build_reference_encoder("tiny_resnet", EncoderConfig(seed=0)), snaps[-1])
    assert accuracy(model, data) == pytest.approx(snaps[-1].metrics["val_accuracy"])


def test_stylized_training_draws_styles_per_epoch(data, tmp_path):
    sd = stylize_dataset(data, StyleBank.procedural(3, 0), out_dir=tmp_path)
    a, la = classification_arrays(sd, epoch_seed=1)
    b, lb = classification_arrays(sd, epoch_seed=2)
    assert np.array_equal(la, lb) and not np.array_equal(a, b)
    assert la.min() == 0 and la.max() == 3


def test_bad_hyper(data, tmp_path):
    h = build_reference_encoder("tiny_resnet")
    with pytest.raises(ConfigError):
        train_classifier(h, data, TrainHyper(optimizer="lbfgs"), 1, tmp_path)
    with pytest.raises(ConfigError):
        train_classifier(h, data, TrainHyper(), 0, tmp_path)
    with pytest.raises(ConfigError):
        train_classifier(h, data, TrainHyper(), 1, None)


def test_divergence_keeps_last_good_snapshot(data, tmp_path):
    h = build_reference_encoder("tiny_resnet")
    with pytest.raises(TrainingDiverged) as exc:
        train_classifier(h, data, TrainHyper(lr=1e30, epochs=3, optimizer="sgd", batch_size=8), 1, tmp_path)
    assert exc.value.snapshots and exc.value.snapshots[0].epoch == 0


def test_fresh_styles_change_every_epoch_and_keep_silhouettes(data):
    fs = FreshlyStylized(data, seed=4)
    a, la = classification_arrays(fs, epoch_seed=1)
    b, _ = classification_arrays(fs, epoch_seed=2)
    again, _ = classification_arrays(fs, epoch_seed=1)
    assert np.array_equal(a, again) and not np.array_equal(a, b)
    assert la.tolist() == [it.class_id - 1 for it in data.items]
    for k in range(3):
        mask = data.mask(data.items[k]) > 0
        # foreground and background come from different palettes, so the mask splits the colours
        fg, bg = a[k][mask].mean(axis=0), a[k][~mask].mean(axis=0)
        assert np.abs(fg - bg).max() > 5


def test_training_on_fresh_styles(data, tmp_path):
    h = build_reference_encoder("tiny_resnet", EncoderConfig(seed=0))
    snaps = train_classifier(h, FreshlyStylized(data, 0), TrainHyper(epochs=1, batch_size=16), 1, tmp_path,
                             val_set=data)
    assert [s.epoch for s in snaps] == [0, 1]

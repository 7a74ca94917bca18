import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeprobe.bias import CueConflictItem, bias_from_predictions, cue_conflict_items, evaluate_shape_bias
from shapeprobe.errors import ConfigError, EmptyDatasetError
from shapeprobe.pairgen import GeneratorConfig, generate_textured_shapes


def _items(pairs):
    img = np.zeros((4, 4, 3), np.uint8)
    return [CueConflictItem(img, s, t, f"i{k}") for k, (s, t) in enumerate(pairs)]


def test_all_shape_choices():
    r = evaluate_shape_bias(lambda x: np.array([1, 2, 3]), _items([(1, 2), (2, 3), (3, 1)]))
    assert r.shape_bias == 1.0 and r.texture_bias == 0.0 and r.coverage == 1.0


def test_even_split():
    r = bias_from_predictions([1, 3, 2, 4], [1, 2, 2, 3], [3, 3, 1, 4])
    assert r.shape_bias == 0.5 and r.n_shape == 2 and r.n_texture == 2


def test_neither_cue_is_undefined():
    r = bias_from_predictions([4, 4], [1, 2], [2, 3])
    assert r.shape_bias is None and not r.defined and r.coverage == 0.0
    assert r.to_dict()["shape_bias"] is None


def test_coverage_counts_only_cue_predictions():
    r = bias_from_predictions([1, 9, 9, 9], [1, 1, 1, 1], [2, 2, 2, 2])
    assert r.shape_bias == 1.0 and r.coverage == 0.25


def test_matching_labels_rejected():
    with pytest.raises(ConfigError):
        CueConflictItem(np.zeros((2, 2, 3), np.uint8), 2, 2)


def test_empty_items():
    with pytest.raises(EmptyDatasetError):
        evaluate_shape_bias(lambda x: x, [])


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_permutation_invariant_and_complementary(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.integers(1, 5, n)
    t = (s % 4) + 1
    p = rng.integers(1, 5, n)
    a = bias_from_predictions(p, s, t)
    perm = rng.permutation(n)
    b = bias_from_predictions(p[perm], s[perm], t[perm])
    assert a == b
    if a.defined:
        assert a.shape_bias + a.texture_bias == pytest.approx(1.0)
        assert 0.0 <= a.shape_bias <= 1.0


def test_items_from_generated_set(tmp_path):
    m = generate_textured_shapes(GeneratorConfig(num_images=8, texture_mode="cue_conflict", seed=1), tmp_path)
    items = cue_conflict_items(m)
    assert len(items) == 8 and all(it.shape_label != it.texture_label for it in items)
    plain = generate_textured_shapes(GeneratorConfig(num_images=2, seed=1), tmp_path / "plain")
    with pytest.raises(ConfigError):
        cue_conflict_items(plain)

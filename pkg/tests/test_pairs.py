import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundret.errors import EmptyDatasetError, ParseError
from groundret.geometry import overlap_fraction
from groundret.pairs import (
    AugmentSpec,
    PairSample,
    apply_augmentation,
    build_training_pairs,
    enumerate_overlaps,
    overlap_table,
    read_pairs,
    write_pairs,
)
from groundret.synth import generate_canvas, generate_mapset


@pytest.fixture(scope="module")
def mapset():
    canvas = generate_canvas("grain", (0.9, 0.9), 200, seed=3)
    return generate_mapset(canvas, n_queries=12, seed=3, out_shape=(24, 32))


def test_enumeration_matches_direct_overlap(mapset):
    labels = {(l.query_id, l.ref_id): l.overlap for l in enumerate_overlaps(mapset)}
    assert len(labels) == len(mapset.queries) * len(mapset.references)
    for q in mapset.queries:
        for r in mapset.references:
            assert labels[q.id, r.id] == overlap_fraction(q.footprint, r.footprint)


def test_overlap_table_keeps_positive_only(mapset):
    table = overlap_table(mapset)
    assert set(table) == {q.id for q in mapset.queries}
    assert all(0 < o <= 1 for refs in table.values() for o in refs.values())


def test_pairs_balanced_and_labelled(mapset):
    pairs = build_training_pairs(mapset, seed=1)
    pos = [p for p in pairs if p.polarity == "positive"]
    neg = [p for p in pairs if p.polarity == "negative"]
    assert len(pos) == len(neg) > 0
    assert all(p.overlap >= 0.2 for p in pos)
    assert all(p.overlap == 0.0 for p in neg)
    assert all(p.ref_augmentation is None for p in pairs)


def test_pairs_deterministic_and_augment_factor(mapset):
    a = build_training_pairs(mapset, seed=4)
    assert a == build_training_pairs(mapset, seed=4)
    assert a != build_training_pairs(mapset, seed=5)
    doubled = build_training_pairs(mapset, augment_factor=2, seed=4)
    assert len(doubled) == 2 * len(a)


def test_raised_positive_floor(mapset):
    pairs = build_training_pairs(mapset, min_pos_overlap=0.5, seed=0)
    assert min(p.overlap for p in pairs if p.polarity == "positive") >= 0.5
    with pytest.raises(EmptyDatasetError):
        build_training_pairs(mapset, min_pos_overlap=1.01, seed=0)


def test_independent_augmentation_flag(mapset):
    pairs = build_training_pairs(mapset, seed=0, independent_augment=True)
    assert all(p.ref_augmentation is not None for p in pairs)


def test_sample_validation():
    with pytest.raises(ValueError):
        PairSample("q", "r", 0.1, "positive")
    with pytest.raises(ValueError):
        PairSample("q", "r", 0.3, "negative")
    with pytest.raises(ValueError):
        AugmentSpec(rotation=1.0)


def test_pair_file_roundtrip(mapset, tmp_path):
    for independent in (False, True):
        pairs = build_training_pairs(mapset, seed=2, independent_augment=independent)
        path = tmp_path / f"pairs{independent}.csv"
        write_pairs(pairs, path)
        assert read_pairs(path) == pairs
    assert path.read_text().splitlines()[0].startswith("query_id,ref_id,overlap,polarity,flip_h,flip_v,rotation_rad")


def test_pair_file_bad_row_names_line(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("query_id,ref_id,overlap,polarity,flip_h,flip_v,rotation_rad\nq,r,0.5,positive,0,0,abc\n")
    with pytest.raises(ParseError, match=":2:"):
        read_pairs(path)


raster = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).integers(0, 256, (12, 16)).astype(np.uint8))


@given(raster, st.booleans(), st.booleans())
def test_flips_are_involutions(img, fh, fv):
    spec = AugmentSpec(fh, fv, 0.0)
    once = apply_augmentation(img, spec)
    assert once.shape == img.shape and once.dtype == np.uint8
    assert np.array_equal(apply_augmentation(once, spec), img)


def test_identity_augmentation_copies(mapset):
    img = mapset.references[0]
    out = apply_augmentation(img, AugmentSpec())
    assert np.array_equal(out, img.pixels) and out is not img.pixels


def test_rotation_keeps_center_and_range():
    img = np.zeros((21, 21), np.uint8)
    img[10, 10] = 200
    out = apply_augmentation(img, AugmentSpec(rotation=math.pi / 4))
    assert out[10, 10] == 200
    assert out.min() >= 0 and out.max() <= 255

from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ivoa.labelgen import (CLASSES, LABEL_COLUMNS, LabeledPatch, OutcomeClass, classify_outcome, extract_patch,
                           generate_labels, labels_csv, patch_window, read_labels, write_dataset)
from ivoa.monitor import GridSpec, geometric_oracle, stereo_ground_visible
from ivoa.perception import BackendKind, BackendParams, PerceptionBackend

from scenes import BOX, POSE, RIG, frame

P9 = BackendParams(n_samples=9)
SPARSE = PerceptionBackend(BackendKind.SPARSE, P9)
DENSE = PerceptionBackend(BackendKind.DENSE, P9)


@pytest.mark.parametrize("o_m,o_s,expected", [(True, True, "TN"), (True, False, "FP"),
                                              (False, True, "FN"), (False, False, "TP")])
def test_truth_table(o_m, o_s, expected):
    assert classify_outcome(o_m, o_s) is OutcomeClass(expected)


def test_classify_is_a_bijection():
    out = {classify_outcome(a, b) for a, b in itertools.product([True, False], repeat=2)}
    assert out == set(CLASSES)


def test_patch_window_examples():
    assert patch_window(960, 600, 480, 300) == (430, 250)
    assert patch_window(960, 600, 0, 0) == (0, 0)
    with pytest.raises(ValueError):
        patch_window(99, 600, 10, 10)
    with pytest.raises(ValueError):
        patch_window(960, 600, 960, 10)


@given(st.integers(100, 400), st.integers(100, 300), st.data())
def test_patch_window_contains_centre(w, h, data):
    u = data.draw(st.integers(0, w - 1))
    v = data.draw(st.integers(0, h - 1))
    x0, y0 = patch_window(w, h, u, v)
    assert 0 <= x0 <= w - 100 and 0 <= y0 <= h - 100
    assert x0 <= u < x0 + 100 and y0 <= v < y0 + 100


def test_extract_patch_content():
    img = np.arange(200 * 300, dtype=np.float32).reshape(200, 300)
    p = extract_patch(img, 150, 100)
    assert p.shape == (100, 100) and p[0, 0] == img[50, 100]


def test_labeled_patch_consistency_check():
    with pytest.raises(ValueError):
        LabeledPatch(0, 0, 1, 1, (1.0, 0.0, 0.0), True, True, OutcomeClass.FP, "x", np.zeros((100, 100)))


def _partition_ok(fl, gs):
    assert sum(fl.counts().values()) + len(fl.skips) == len(gs.points())
    ks = [p.k for p in fl.patches] + [s.k for s in fl.skips]
    assert sorted(ks) == list(range(len(gs.points())))
    assert [p.k for p in fl.patches] == sorted(p.k for p in fl.patches)


@pytest.mark.parametrize("backend", [SPARSE, DENSE], ids=["sparse", "dense"])
def test_benign_labels_match_oracle(backend):
    gs = GridSpec()
    fl = generate_labels(frame("box"), RIG, gs, backend)
    _partition_ok(fl, gs)
    agree = []
    for p in fl.patches:
        free = geometric_oracle(BOX, p.point, gs.radius, POSE)
        if free and not stereo_ground_visible(BOX, RIG, POSE, p.point, gs.radius, 9, 9):
            continue
        agree.append(p.label is (OutcomeClass.TN if free else OutcomeClass.TP))
        assert p.patch.shape == (100, 100)
    # the residual disagreements are box corners grazing the edge of the query disc
    assert len(agree) > 150 and np.mean(agree) >= 0.98
    empty = generate_labels(frame("empty"), RIG, gs, backend)
    assert set(empty.counts()) == {"TP", "FP", "FN", "TN"}
    assert empty.counts()["TN"] == len(empty.patches) > 200


def test_reflective_disc_labelled_fp():
    fl = generate_labels(frame("reflective"), RIG, GridSpec(), SPARSE)
    on_disc = [p for p in fl.patches if np.hypot(p.point[0] - 1.6, p.point[1]) <= 0.4]
    assert len(on_disc) >= 10
    assert all(p.label is OutcomeClass.FP for p in on_disc)


@pytest.mark.parametrize("backend", [SPARSE, DENSE], ids=["sparse", "dense"])
def test_textureless_wall_labelled_fn(backend):
    fl = generate_labels(frame("textureless"), RIG, GridSpec(), backend)
    on_wall = [p for p in fl.patches if abs(p.point[0] - 2.1) < 1e-9]
    assert len(on_wall) >= 10
    assert np.mean([p.label is OutcomeClass.FN for p in on_wall]) >= 0.9


def test_dataset_files_are_reproducible(tmp_path):
    gs = GridSpec(1.4, 1.8, -0.2, 0.2)
    a = generate_labels(frame("box"), RIG, gs, SPARSE)
    b = generate_labels(frame("box"), RIG, gs, SPARSE)
    write_dataset(tmp_path / "a", a.patches, {"grid": gs.to_dict()})
    write_dataset(tmp_path / "b", b.patches, {"grid": gs.to_dict()})
    for rel in ["labels.csv", "dataset.json"] + [f"patches/{p.frame_id}_{p.k}.pgm" for p in a.patches]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    rows = read_labels(tmp_path / "a" / "labels.csv")
    assert [(r.k, r.label, r.o_m, r.o_s) for r in rows] == [(p.k, p.label, p.o_m, p.o_s) for p in a.patches]
    assert labels_csv(a.patches).splitlines()[0] == ",".join(LABEL_COLUMNS)
    with pytest.raises(FileNotFoundError):
        read_labels(tmp_path / "missing.csv")


def test_two_backends_share_the_monitor():
    gs = GridSpec()
    s = generate_labels(frame("textureless"), RIG, gs, SPARSE)
    d = generate_labels(frame("textureless"), RIG, gs, DENSE)
    ms = {p.k: p.o_m for p in s.patches}
    md = {p.k: p.o_m for p in d.patches}
    common = set(ms) & set(md)
    assert len(common) > 200
    assert all(ms[k] == md[k] for k in common)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskspot.datagen import SceneConfig, generate
from maskspot.decoder import CharDictionary
from maskspot.geometry import GridSpec, RasterMask
from maskspot.inference import (Region, char_probs, cma_full_logits, cma_overlay,
                                connected_components, connected_regions, overlay_sum,
                                segment_centerline, single_instance_mode, spot, spot_many, vote)
from maskspot.model import Model, ModelConfig

from fdcheck import tiny_model_config


def union_find_components(mask):
    h, w = mask.shape
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                parent[(r, c)] = (r, c)
    for (r, c) in list(parent):
        for nb in ((r + 1, c), (r, c + 1)):
            if nb in parent:
                ra, rb = find((r, c)), find(nb)
                if ra != rb:
                    parent[ra] = rb
    groups = {}
    for p in parent:
        groups.setdefault(find(p), set()).add(p)
    return sorted(groups.values(), key=lambda g: min(g))


def full_region(h, w):
    bits = np.ones((h, w), dtype=bool)
    return Region(0, [(r, c) for r in range(h) for c in range(w)], RasterMask(h, w, bits))


def region_from_bits(bits, rid=0):
    pix = [tuple(map(int, p)) for p in zip(*np.nonzero(bits))]
    return Region(rid, pix, RasterMask(bits.shape[0], bits.shape[1], bits))


def test_segment_centerline_examples():
    assert not segment_centerline(np.full((1, 4, 4), -10.0)).any()
    z = np.full((4, 6), -10.0)
    z[1:3, 1:5] = 10.0
    assert np.array_equal(segment_centerline(z), z > 0)
    assert segment_centerline(np.zeros((2, 2))).all()


def test_regions_examples():
    m = np.zeros((6, 8), dtype=bool)
    m[1, 1:6] = True
    m[4, 2:7] = True
    assert len(connected_regions(m)) == 2
    assert connected_regions(np.zeros((5, 5), dtype=bool)) == []
    single = np.zeros((5, 5), dtype=bool)
    single[2, 2] = True
    assert connected_regions(single) == []
    assert len(connected_regions(single, min_area=1)) == 1


def test_diagonal_pixels_are_separate():
    m = np.eye(4, dtype=bool)
    assert len(connected_components(m)) == 4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 0.7))
def test_components_match_union_find(seed, density):
    mask = np.random.default_rng(seed).random((12, 15)) < density
    ours = [set(c) for c in connected_components(mask)]
    assert ours == union_find_components(mask)
    # partition of the set pixels
    assert sum(len(c) for c in ours) == int(mask.sum())
    kept = connected_regions(mask, 2)
    assert [r.id for r in kept] == list(range(len(kept)))
    assert all(r.area >= 2 for r in kept)


def test_two_grid_hand_oracle():
    d = CharDictionary("AB")
    grid = GridSpec(2, 4, 4)
    bits = np.zeros((4, 4), dtype=bool)
    bits[0:2, 0:3] = True      # 4 px in cell 0, 2 px in cell 1
    region = region_from_bits(bits)
    ratios = grid.occupation_ratios(region.mask)
    assert ratios[0] == 1.0 and ratios[1] == 0.5
    probs = np.zeros((2, 1, 3))
    probs[0, 0] = [0.9, 0.1, 0.0]
    probs[1, 0] = [0.2, 0.8, 0.0]
    res = vote(region, grid, [0, 1], probs, d, 0.05)
    # scores 1.0*[0.9,0.1] + 0.5*[0.2,0.8] = [1.0, 0.5] -> class 0
    assert res.transcript == "A"
    assert res.char_confidences[0] == pytest.approx(1.0 / 1.5)
    assert res.best_grid == (0, 0)
    assert res.contributing_grids == [(0, 1.0), (1, 0.5)]


def test_weighted_scores_example_from_ratios():
    from maskspot.inference import weighted_scores
    s = weighted_scores([0.6, 0.4], [np.array([0.9, 0.1]), np.array([0.2, 0.8])])
    assert s == pytest.approx([0.62, 0.38])


def exhaustive_vote(ratios, positive, probs, mu, eos):
    contrib = [(j, ratios[j]) for j in sorted(positive) if ratios[j] > mu]
    row = {j: n for n, j in enumerate(positive)}
    L, M = probs.shape[1:]
    out = []
    for k in range(L):
        best_c, best_s = None, None
        for c in range(M):
            s = 0.0
            for j, o in contrib:
                s = s + o * probs[row[j], k, c]
            if best_s is None or s > best_s:
                best_c, best_s = c, s
        out.append(best_c)
    cut = out.index(eos) if eos in out else L
    return out[:cut]


def test_vote_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    d = CharDictionary("0123456789ACEH")
    grid = GridSpec(3, 9, 9)
    for _ in range(100):
        bits = rng.random((9, 9)) < 0.3
        region = region_from_bits(bits)
        positive = sorted(rng.choice(9, size=rng.integers(1, 6), replace=False).tolist())
        L = int(rng.integers(1, 9))
        logits = rng.normal(scale=3, size=(len(positive), L, d.size))
        probs = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
        res = vote(region, grid, positive, probs, d, 0.05)
        ratios = grid.occupation_ratios(region.mask)
        if not any(ratios[j] > 0.05 for j in positive):
            assert res is None
            continue
        want = exhaustive_vote(ratios, positive, probs, 0.05, d.eos_index)
        assert res.transcript == "".join(d.symbols[c] for c in want)
        assert len(res.char_confidences) == len(res.transcript)
        assert res.best_grid == grid.cell(max(res.contributing_grids, key=lambda t: (t[1], -t[0]))[0])


def test_unanimous_grids_ignore_weights():
    d = CharDictionary("AB")
    grid = GridSpec(2, 4, 4)
    probs = np.tile(np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.0, 0.1, 0.9]]), (3, 1, 1))
    rng = np.random.default_rng(1)
    for _ in range(10):
        region = region_from_bits(rng.random((4, 4)) < 0.6)
        res = vote(region, grid, [0, 1, 3], probs, d, 0.0)
        if res is not None:
            assert res.transcript == "AB"


def test_vote_scale_invariance():
    rng = np.random.default_rng(2)
    d = CharDictionary("ABC")
    grid = GridSpec(2, 4, 4)
    probs = rng.dirichlet(np.ones(4), size=(4, 3))
    region = region_from_bits(np.ones((4, 4), dtype=bool))
    base = vote(region, grid, [0, 1, 2, 3], probs, d, 0.0)
    from maskspot.inference import weighted_scores
    ratios = grid.occupation_ratios(region.mask)
    for c in (0.1, 3.0, 17.0):
        s = weighted_scores([c * ratios[j] for j in range(4)], list(probs))
        assert d.text(np.argmax(s, axis=1)) == base.transcript


def test_vote_drops_region_without_grid():
    d = CharDictionary("AB")
    grid = GridSpec(2, 4, 4)
    bits = np.zeros((4, 4), dtype=bool)
    bits[3, 3] = True
    assert vote(region_from_bits(bits), grid, [0], np.ones((1, 2, 3)) / 3, d, 0.05) is None


def test_single_contributor_is_greedy_decode():
    rng = np.random.default_rng(3)
    d = CharDictionary.desk()
    grid = GridSpec(2, 4, 4)
    bits = np.zeros((4, 4), dtype=bool)
    bits[0:2, 0:2] = True
    probs = rng.dirichlet(np.ones(d.size), size=(1, 6))
    res = vote(region_from_bits(bits), grid, [0], probs, d, 0.05)
    assert res.transcript == d.text(np.argmax(probs[0], axis=1))


def test_single_instance_mode_equals_full_region_vote():
    cfg = ModelConfig(S=1, L=8, seg_head=False)
    model = Model.create(cfg, 0)
    image = generate(SceneConfig(min_instances=1, max_instances=1), 2).image
    res = single_instance_mode(model, image)
    x = model.features(image)
    probs = char_probs(model, x, model.ima_logits(x), [0])
    ref = vote(full_region(16, 16), GridSpec(1, 16, 16), [0], probs, model.dictionary, 0.05)
    assert res.transcript == ref.transcript
    assert res.char_confidences == ref.char_confidences
    assert res.region_bbox == ref.region_bbox
    out = spot(model, image)
    assert len(out.results) == 1


def test_single_instance_empty_transcript():
    cfg = ModelConfig(S=1, L=4, seg_head=False)
    model = Model.create(cfg, 0)
    eos = model.dictionary.eos_index
    model.params["dec.fc.b"].data[eos] = 100.0
    res = single_instance_mode(model, np.zeros((1, 32, 32)))
    assert res.transcript == "" and res.char_confidences == [] and res.confidence == 0.0


def test_overlay_examples():
    L = 3
    logits = np.full((4 * L, 5, 5), -50.0)
    logits[2 * L + 1, 1:3, 2:4] = 5.0
    over = cma_overlay(logits, 1, L)
    ref = 1.0 / (1.0 + np.exp(-logits[2 * L + 1]))
    expect = np.round((ref - ref.min()) / (ref.max() - ref.min()) * 255)
    assert np.abs(over.astype(float) - expect).max() <= 1
    flat = overlay_sum(np.zeros((4 * L, 3, 3)), 0, L)
    assert np.all(flat == 2.0)
    assert not cma_overlay(np.zeros((4 * L, 3, 3)), 0, L).any()
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4 * L, 3, 3))
    loop = sum(1.0 / (1.0 + np.exp(-z[j * L + 2])) for j in range(4))
    assert np.abs(overlay_sum(z, 2, L) - loop).max() <= 1e-12


def test_spot_deterministic_and_threaded():
    model = Model.create(tiny_model_config(S=2, L=3), 1)
    model.params["seg.conv2.b"].data[:] = 0.5   # make regions appear
    images = [generate(SceneConfig(height=32, width=32, max_len=3, glyph_scale=1), i).image
              for i in range(4)]
    a = spot_many(model, images)
    b = spot_many(model, images, workers=3)
    for x, y in zip(a, b):
        assert [r.to_json() for r in x.results] == [r.to_json() for r in y.results]
        assert x.dropped == y.dropped


def test_spot_empty_image_has_no_results():
    model = Model.create(ModelConfig(), 0)
    model.params["seg.conv2.b"].data[:] = -100.0
    out = spot(model, np.zeros((1, 64, 64)))
    assert out.results == [] and out.regions == []


def test_cma_full_logits_shape():
    model = Model.create(tiny_model_config(S=2, L=3), 0)
    assert cma_full_logits(model, np.zeros((1, 32, 32))).shape == (12, 8, 8)


def test_result_json_scaled_to_image():
    d = CharDictionary("AB")
    grid = GridSpec(1, 4, 4)
    bits = np.zeros((4, 4), dtype=bool)
    bits[1:3, 0:4] = True
    res = vote(region_from_bits(bits), grid, [0], np.array([[[0.9, 0.05, 0.05]]]), d)
    assert res.to_json()["bbox"] == [0, 4, 16, 12]

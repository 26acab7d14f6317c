import numpy as np
import pytest

from disendiff.detect import detect_concepts, set_iou
from disendiff.scenes import (IMAGE_SIZE, PALETTE, ConceptInstance, SceneSpec, downsample_mask, random_instance,
                              color_name, random_scene, render_scene)
from disendiff.tokens import CLASS_NOUNS, RARE_WORD


def test_empty_spec_is_uniform_background():
    img = render_scene(SceneSpec([], background=0.5))
    assert img.shape == (32, 32, 3) and img.dtype == np.float32
    np.testing.assert_array_equal(img, 0.0)


@pytest.mark.xfail(strict=True, reason="lattice count of an r=8 disc at the frame centre is 208 px (+3.4%); "
                                      "no symmetric placement lands within 3% (see decisions ledger)")
def test_centered_disc_mask_area_within_3_percent():
    spec = SceneSpec([ConceptInstance("disc", PALETTE["red"], (16, 16), 8)])
    area = spec.masks()[0].sum()
    assert abs(area - np.pi * 64) <= 0.03 * np.pi * 64


def _exact_mask_count(cx, cy, r, ss=64):
    n = 32 * ss
    sub = (np.arange(n) + 0.5) / ss
    px, py = np.meshgrid(sub, sub)
    cov = ((px - cx) ** 2 + (py - cy) ** 2 <= r * r).reshape(32, ss, 32, ss).mean(axis=(1, 3))
    return int((cov > 0.5).sum())


def test_disc_area_against_analytic_oracles():
    spec = SceneSpec([ConceptInstance("disc", PALETTE["red"], (16, 16), 8)])
    # the anti-aliased coverage integrates the analytic area
    assert abs(spec.coverage()[0].sum() - np.pi * 64) <= 0.01 * np.pi * 64
    # and the thresholded mask agrees with a 64x-supersampled lattice count
    assert spec.masks()[0].sum() == _exact_mask_count(16, 16, 8) == 208
    # averaged over sub-pixel placements the mask area is unbiased
    rng = np.random.default_rng(0)
    areas = [SceneSpec([ConceptInstance("disc", PALETTE["red"], (16 + dx, 16 + dy), 8)]).masks()[0].sum()
             for dx, dy in rng.random((64, 2))]
    assert abs(np.mean(areas) - np.pi * 64) <= 0.01 * np.pi * 64


def test_render_is_deterministic():
    spec = random_scene(np.random.default_rng(3))
    assert render_scene(spec).tobytes() == render_scene(spec).tobytes()


def test_margin_violation():
    with pytest.raises(ValueError, match="margin"):
        render_scene(SceneSpec([ConceptInstance("square", PALETTE["blue"], (3, 16), 4)]))


def test_overlap_violation():
    a = ConceptInstance("disc", PALETTE["red"], (14, 16), 6)
    b = ConceptInstance("square", PALETTE["blue"], (18, 16), 5)
    with pytest.raises(ValueError, match="overlap"):
        SceneSpec([a, b]).validate()


def test_unknown_shape():
    with pytest.raises(ValueError):
        ConceptInstance("star", PALETTE["red"], (16, 16), 5)


@pytest.mark.parametrize("seed", range(20))
def test_random_scenes_satisfy_invariants(seed):
    spec = random_scene(np.random.default_rng(seed))
    spec.validate()
    assert 1 <= len(spec.instances) <= 3
    assert len(set(spec.classes)) == len(spec.classes)
    for m in spec.masks():
        ys, xs = np.nonzero(m)
        assert xs.min() >= 1 and ys.min() >= 1 and xs.max() <= IMAGE_SIZE - 2 and ys.max() <= IMAGE_SIZE - 2


def test_downsample_mask():
    m = np.zeros((32, 32), bool)
    m[:4, :3] = True
    d = downsample_mask(m)
    assert d.shape == (16, 16)
    # cells (0,0) and (1,0) fully covered; column 1 cells only half covered -> dropped
    assert d.sum() == 2 and d[0, 0] and d[1, 0]


def test_blank_image_has_no_detections():
    assert detect_concepts(np.zeros((32, 32, 3), np.float32)) == []


def _single_scene(rng):
    shape = CLASS_NOUNS[rng.integers(4)]
    inst = random_instance(rng, shape, stripes=bool(rng.random() < 0.3))
    return SceneSpec([inst])


def test_detector_self_consistency_500_single_scenes():
    rng = np.random.default_rng(2024)
    correct = color_ok = mask_ok = plain = 0
    for _ in range(500):
        spec = _single_scene(rng)
        dets = detect_concepts(render_scene(spec))
        inst = spec.instances[0]
        if len(dets) == 1 and dets[0].shape == inst.shape:
            correct += 1
            mask_ok += set_iou(dets[0].mask, spec.masks()[0]) >= 0.9
            if not inst.stripes:
                plain += 1
                color_ok += np.abs(np.array(dets[0].mean_color) - inst.color).max() <= 0.05
    assert correct >= 490
    assert mask_ok >= 490
    assert color_ok == plain


def test_two_instance_masks():
    rng = np.random.default_rng(7)
    for _ in range(100):
        spec = random_scene(rng, n_range=(2, 2))
        dets = detect_concepts(render_scene(spec))
        assert len(dets) == 2
        for truth in spec.masks():
            assert max(set_iou(d.mask, truth) for d in dets) >= 0.9


def test_set_iou():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[:2], b[1:3] = True, True
    assert set_iou(a, b) == pytest.approx(4 / 12)
    assert set_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_caption_articles_and_colours():
    rng = np.random.default_rng(4)
    plain = [random_scene(rng, color_prob=0.0).caption for _ in range(50)]
    assert all(RARE_WORD not in c.split() for c in plain)
    rng = np.random.default_rng(4)
    words = [w for _ in range(400) for w in random_scene(rng, color_prob=1.0, rare_prob=0.1).caption.split()]
    articles = [w for w in words if w in ("a", RARE_WORD)]
    assert 0.05 < articles.count(RARE_WORD) / len(articles) < 0.15
    # the rare word always sits directly before a class noun
    assert all(words[i + 1] in CLASS_NOUNS for i, w in enumerate(words) if w == RARE_WORD)
    rng = np.random.default_rng(5)
    for _ in range(50):
        spec = random_scene(rng, n_range=(2, 2), color_prob=1.0)
        for inst in spec.instances:
            assert f"a {color_name(inst.color)} {inst.shape}" in spec.caption

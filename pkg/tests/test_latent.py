import numpy as np
import pytest

from segphrase import gmm
from segphrase.errors import NumericalError
from segphrase.evaluation import SceneConfig, make_scene, seg_metrics
from segphrase.imaging import (
    Image,
    compute_superpixels,
    extract_features,
    labels_to_mask,
)
from segphrase.latent import (
    CollapseError,
    DegenerateBoxError,
    SegmentationModel,
    TrainConfig,
    em_learn,
    init_labels,
    make_instance,
    parse_manifest,
    segment_instance,
    segment_with_model,
)


def grid_instance(box, w=8, h=8, value=0.5, target=4):
    img = Image(w, h, 1, np.full((h, w, 1), value))
    graph = extract_features(img, compute_superpixels(img, target))
    return make_instance(graph, box)


def scene_instance(scene, target=200):
    graph = extract_features(
        scene.image, compute_superpixels(scene.image, target)
    )
    return make_instance(graph, scene.box)


# -- init_labels ----------------------------------------------------------------

def test_whole_image_box_all_foreground():
    inst = grid_instance((0, 0, 8, 8))
    assert (init_labels(inst, 1.0) == 1).all()


def test_degenerate_box_rejected():
    with pytest.raises(DegenerateBoxError):
        grid_instance((2, 2, 2, 6))
    with pytest.raises(DegenerateBoxError):
        grid_instance((0, 0, 9, 8))


def test_init_labels_hand_geometry():
    # 8x8 image, four 4x4 superpixels with centroids (2,2),(6,2),(2,6),(6,6);
    # box (0,0,6,6) shrunk by 0.5 about its center (3,3) is [1.5,4.5)^2
    inst = grid_instance((0, 0, 6, 6))
    labels = init_labels(inst, 0.5)
    # block 0: centroid (2,2) inside the shrunk box -> 1
    # blocks 1,2: centroid outside, half their area in the box -> 1
    # block 3: centroid outside, 0.25 of area in the box, not fully outside -> 0
    assert np.array_equal(labels, [1, 1, 1, 0])
    assert inst.sp_in_box == pytest.approx([1.0, 0.5, 0.5, 0.25])


def test_init_labels_fully_outside_is_background():
    inst = grid_instance((0, 0, 4, 4))
    labels = init_labels(inst, 1.0)
    assert np.array_equal(labels, [1, 0, 0, 0])


def test_seed_shrink_one_equals_box_membership_rule():
    rng = np.random.default_rng(0)
    img = Image(16, 16, 1, rng.random((16, 16, 1)))
    graph = extract_features(img, compute_superpixels(img, 12))
    inst = make_instance(graph, (3, 2, 13, 11))
    labels = init_labels(inst, 1.0)
    x0, y0, x1, y1 = inst.box
    cent = inst.graph.centroids
    in_box = (
        (cent[:, 0] >= x0) & (cent[:, 0] < x1)
        & (cent[:, 1] >= y0) & (cent[:, 1] < y1)
    )
    expected = (in_box | (inst.sp_in_box >= 0.5)) & (inst.sp_in_box > 0)
    assert np.array_equal(labels.astype(bool), expected)


def test_init_labels_shrink_range():
    inst = grid_instance((0, 0, 8, 8))
    with pytest.raises(ValueError):
        init_labels(inst, 0.0)
    with pytest.raises(ValueError):
        init_labels(inst, 1.5)


# -- em_learn ---------------------------------------------------------------------

def test_bimodal_instance_recovers_partition():
    scene = make_scene(SceneConfig(seed=5))
    inst = scene_instance(scene)
    model = em_learn([inst], TrainConfig(k=1, seed=0))
    mask = labels_to_mask(segment_instance(model, inst), inst.graph.smap)
    assert seg_metrics(mask, scene.gt_mask).jaccard == pytest.approx(1.0)


def test_max_iters_zero_is_single_m_step():
    scene = make_scene(SceneConfig(seed=6))
    inst = scene_instance(scene)
    model = em_learn([inst], TrainConfig(k=2, max_iters=0, seed=3))
    assert model.info.iterations == 0 and model.info.energy_history == []
    labels = init_labels(inst, 0.6)
    fg = inst.graph.features[labels == 1]
    bg = inst.graph.features[labels == 0]
    expect_fg = gmm.fit(fg, min(2, len(fg)), [3, 0])
    expect_bg = gmm.fit(bg, min(2, len(bg)), [3, 1])
    assert np.array_equal(model.theta_fg.means, expect_fg.means)
    assert np.array_equal(model.theta_bg.means, expect_bg.means)


def test_identical_instances_stay_identical():
    scene = make_scene(SceneConfig(seed=7))
    a, b = scene_instance(scene), scene_instance(scene)
    model = em_learn([a, b], TrainConfig(k=1, seed=1))
    la = segment_instance(model, a)
    lb = segment_instance(model, b)
    assert np.array_equal(la, lb)


def test_outside_box_clamp_respected():
    scene = make_scene(SceneConfig(seed=8))
    inst = scene_instance(scene)
    model = em_learn([inst], TrainConfig(k=1, seed=0))
    labels = segment_instance(model, inst)
    assert not labels[inst.sp_in_box == 0.0].any()


def test_training_deterministic_bit_identical():
    scene = make_scene(SceneConfig(seed=9))
    insts = [scene_instance(scene), scene_instance(make_scene(SceneConfig(seed=10)))]
    m1 = em_learn(insts, TrainConfig(k=2, seed=11))
    m2 = em_learn(insts, TrainConfig(k=2, seed=11))
    for a, b in ((m1.theta_fg, m2.theta_fg), (m1.theta_bg, m2.theta_bg)):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.variances, b.variances)
    assert m1.info.energy_history == m2.info.energy_history


def test_energy_history_non_increasing():
    scenes = [make_scene(SceneConfig(seed=s)) for s in (12, 13, 14)]
    insts = [scene_instance(s) for s in scenes]
    model = em_learn(insts, TrainConfig(k=2, seed=0))
    hist = model.info.energy_history
    assert len(hist) >= 1
    assert all(b <= a + 1e-6 for a, b in zip(hist, hist[1:]))


def test_uniform_images_collapse():
    # identical features everywhere: the tie-break relabels everything
    # background, the halved-shrink retry does the same, then the error
    inst = grid_instance((2, 2, 6, 6), w=8, h=8, target=16)
    with pytest.raises(CollapseError):
        em_learn([inst], TrainConfig(k=1, seed=0, max_iters=3))


def test_whole_image_box_collapses():
    inst = grid_instance((0, 0, 8, 8), target=16)
    with pytest.raises(CollapseError):
        em_learn([inst], TrainConfig(k=1, seed=0))


def test_em_learn_requires_instances():
    with pytest.raises(ValueError):
        em_learn([], TrainConfig())


# -- segment_with_model --------------------------------------------------------------

def _simple_model(fg_at, bg_at, dim=24):
    mk = lambda c: gmm.GaussianMixture(
        np.array([1.0]), np.full((1, dim), c), np.full((1, dim), 1e-2)
    )
    return SegmentationModel(mk(fg_at), mk(bg_at), lam=0.05)


def test_all_foreground_when_fg_density_dominates():
    img = Image(8, 8, 1, np.full((8, 8, 1), 0.5))
    graph = extract_features(img, compute_superpixels(img, 4))
    model = SegmentationModel(
        gmm.GaussianMixture(
            np.array([1.0]), graph.features[:1].copy(), np.full((1, 24), 1e-2)
        ),
        gmm.GaussianMixture(
            np.array([1.0]), graph.features[:1] + 3.0, np.full((1, 24), 1e-2)
        ),
        lam=0.05,
    )
    assert (segment_with_model(model, graph) == 1).all()


def test_equal_models_tie_break_all_background():
    img = Image(8, 8, 1, np.full((8, 8, 1), 0.5))
    graph = extract_features(img, compute_superpixels(img, 4))
    g = gmm.fit(graph.features, 1, seed=0)
    model = SegmentationModel(g, g, lam=0.05)
    assert (segment_with_model(model, graph) == 0).all()


def test_dimension_mismatch_rejected():
    img = Image(8, 8, 1, np.full((8, 8, 1), 0.5))
    graph = extract_features(img, compute_superpixels(img, 4))
    model = _simple_model(0.0, 1.0, dim=7)
    with pytest.raises(ValueError):
        segment_with_model(model, graph)


def test_held_out_two_texture_recovery():
    train = [make_scene(SceneConfig(seed=s)) for s in (20, 21)]
    test = make_scene(SceneConfig(seed=22))
    model = em_learn([scene_instance(s) for s in train], TrainConfig(k=1, seed=2))
    graph = extract_features(
        test.image, compute_superpixels(test.image, 200)
    )
    mask = labels_to_mask(segment_with_model(model, graph), graph.smap)
    assert seg_metrics(mask, test.gt_mask).jaccard >= 0.9


def test_parse_manifest(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("# comment\nimg1.pgm 1 2 3 4\n\nimg2.pgm 0 0 8 8\n")
    assert parse_manifest(path) == [
        ("img1.pgm", (1, 2, 3, 4)),
        ("img2.pgm", (0, 0, 8, 8)),
    ]

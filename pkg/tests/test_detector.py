import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

import deformrl.autodiff as ad
from deformrl.autodiff import Tensor
from deformrl.detector import (
    DetectorConfig,
    KeypointDetector,
    detector_loss,
    expected_coordinates,
    extract_features,
    load_dataset,
    map_to_image,
    read_pgm,
    render_gaussian,
    save_dataset,
    write_pgm,
)
from gradcheck import check_gradients

RNG = np.random.default_rng(42)

# Brute-force grid-summation oracle, computed independently with scalar
# loops before this module existed: single keypoint at (32,32) vs (33,32),
# sigma=2, 64x64, mean over the 4096 grid cells.
OFFSET_LOSS_ORACLE = 0.0003717567905638493


def small_config(**kw):
    defaults = dict(n_keypoints=2, height=16, width=16, sigma=2.0,
                    conv_stack=((4, 3, 2),), final_stride=2)
    defaults.update(kw)
    return DetectorConfig(**defaults)


# -- feature extraction -------------------------------------------------------

def test_extract_features_zero_image_finite():
    det = KeypointDetector(n_keypoints=2, height=16, width=16,
                           conv_stack=((4, 3, 2),), final_stride=2, n_steps=1)
    det.layers_ = __import__("deformrl.detector", fromlist=["_build_conv_layers"]) \
        ._build_conv_layers(det.config, np.random.default_rng(0))
    fm = extract_features(Tensor(np.zeros((1, 16, 16))), det.layers_)
    assert np.isfinite(fm.data).all()


def test_extract_features_output_extents():
    # total stride 4 on a 64x64 image gives a 16x16 feature lattice
    config = DetectorConfig(n_keypoints=8, height=64, width=64,
                            conv_stack=((16, 3, 2), (16, 3, 2)), final_stride=1)
    assert (config.feature_height, config.feature_width) == (16, 16)
    from deformrl.detector import _build_conv_layers
    layers = _build_conv_layers(config, np.random.default_rng(0))
    fm = extract_features(Tensor(RNG.uniform(size=(1, 64, 64))), layers)
    assert fm.shape == (1, 8, 16, 16)


def test_extract_features_single_pixel_sensitivity():
    from deformrl.detector import _build_conv_layers
    config = small_config()
    layers = _build_conv_layers(config, np.random.default_rng(3))
    base = RNG.uniform(0.2, 0.8, size=(16, 16))
    bumped = base.copy()
    bumped[8, 8] += 0.1
    fa = extract_features(Tensor(base[None]), layers)
    fb = extract_features(Tensor(bumped[None]), layers)
    assert np.abs(fa.data - fb.data).max() > 0


# -- spatial softmax expectation ----------------------------------------------

def test_expected_coordinates_uniform_centroid():
    fm = Tensor(np.zeros((1, 1, 11, 7)))
    coords = expected_coordinates(fm)
    np.testing.assert_allclose(coords.data[0, 0], [5.0, 3.0], atol=1e-6)


def test_expected_coordinates_saturated_spike():
    grid = np.zeros((1, 1, 10, 10))
    grid[0, 0, 3, 5] = 50.0
    coords = expected_coordinates(Tensor(grid))
    np.testing.assert_allclose(coords.data[0, 0], [3.0, 5.0], atol=1e-3)


def test_expected_coordinates_two_equal_spikes():
    grid = np.zeros((1, 1, 10, 10))
    grid[0, 0, 2, 2] = 40.0
    grid[0, 0, 2, 8] = 40.0
    coords = expected_coordinates(Tensor(grid))
    np.testing.assert_allclose(coords.data[0, 0], [2.0, 5.0], atol=1e-6)


def test_expected_coordinates_translation_consistency():
    grid = np.zeros((1, 1, 16, 16))
    bump = np.array([[10.0, 20.0, 10.0], [20.0, 90.0, 20.0], [10.0, 20.0, 10.0]])
    grid[0, 0, 4:7, 5:8] = bump
    shifted = np.zeros_like(grid)
    shifted[0, 0, 7:10, 9:12] = bump  # shifted by (3, 4), still interior
    base = expected_coordinates(Tensor(grid)).data[0, 0]
    moved = expected_coordinates(Tensor(shifted)).data[0, 0]
    np.testing.assert_allclose(moved - base, [3.0, 4.0], atol=1e-6)


def test_expected_coordinates_inside_hull():
    fm = Tensor(RNG.normal(size=(3, 4, 9, 9)) * 10.0)
    coords = expected_coordinates(fm).data
    assert (coords >= 0.0).all() and (coords <= 8.0).all()


# -- lattice-to-pixel mapping --------------------------------------------------

def test_map_to_image_direct_substitution():
    config = DetectorConfig(n_keypoints=1, height=64, width=64,
                            conv_stack=((4, 3, 2), (4, 3, 2)), final_stride=1)
    assert config.feature_height == 16
    out = map_to_image(np.array([[8.0, 8.0]]), config)
    np.testing.assert_array_equal(out, [[32.0, 32.0]])


def test_map_to_image_origin_fixed():
    out = map_to_image(np.array([[0.0, 0.0]]), small_config())
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


def test_map_to_image_identity_when_same_lattice():
    config = DetectorConfig(n_keypoints=1, height=16, width=16,
                            conv_stack=((4, 3, 1),), final_stride=1)
    pts = RNG.uniform(0, 15, size=(5, 2))
    np.testing.assert_array_equal(map_to_image(pts, config), pts)


def test_config_rejects_indivisible_extents():
    with pytest.raises(ValueError, match="divisible"):
        DetectorConfig(n_keypoints=1, height=60, width=64,
                       conv_stack=((4, 3, 2),), final_stride=4)


# -- gaussian rendering ----------------------------------------------------------

def test_render_gaussian_peak_is_one():
    maps = render_gaussian(np.array([[[20.0, 30.0]]]), 2.0, 64, 64)
    assert maps.data[0, 0, 20, 30] == 1.0


def test_render_gaussian_value_at_sigma():
    sigma = 2.0
    maps = render_gaussian(np.array([[[20.0, 30.0]]]), sigma, 64, 64)
    assert abs(maps.data[0, 0, 22, 30] - np.exp(-0.5)) < 1e-9


def test_render_gaussian_coincident_keypoints_sum_to_two():
    maps = render_gaussian(np.array([[[10.0, 10.0], [10.0, 10.0]]]), 2.0, 32, 32)
    aggregate = maps.data.sum(axis=1)
    assert aggregate[0, 10, 10] == pytest.approx(2.0)


def test_render_gaussian_max_at_nearest_cell():
    maps = render_gaussian(np.array([[[10.3, 20.8]]]), 2.0, 32, 32)
    flat_argmax = maps.data[0, 0].argmax()
    assert np.unravel_index(flat_argmax, (32, 32)) == (10, 21)


def test_render_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError, match="sigma"):
        render_gaussian(np.zeros((1, 1, 2)), 0.0, 8, 8)


# -- loss -------------------------------------------------------------------------

def test_detector_loss_zero_iff_equal():
    config = DetectorConfig(n_keypoints=2, height=32, width=32,
                            conv_stack=((4, 3, 2),), final_stride=2)
    kps = np.array([[[5.0, 6.0], [20.0, 22.0]]])
    assert detector_loss(Tensor(kps), kps, config).item() == 0.0
    bumped = kps.copy()
    bumped[0, 1, 0] += 0.5
    assert detector_loss(Tensor(bumped), kps, config).item() > 0.0


def test_detector_loss_symmetric():
    config = DetectorConfig(n_keypoints=1, height=32, width=32,
                            conv_stack=((4, 3, 2),), final_stride=2)
    a = np.array([[[10.0, 12.0]]])
    b = np.array([[[14.0, 9.0]]])
    ab = detector_loss(Tensor(a), b, config).item()
    ba = detector_loss(Tensor(b), a, config).item()
    assert ab == pytest.approx(ba, rel=1e-12)


def test_detector_loss_matches_grid_summation_oracle():
    config = DetectorConfig(n_keypoints=1, height=64, width=64, sigma=2.0,
                            conv_stack=((4, 3, 2), (4, 3, 2)), final_stride=2)
    truth = np.array([[[32.0, 32.0]]])
    predicted = np.array([[[33.0, 32.0]]])
    loss = detector_loss(Tensor(predicted), truth, config).item()
    assert loss == pytest.approx(OFFSET_LOSS_ORACLE, rel=1e-12)


def test_detector_loss_k_mismatch():
    config = small_config()
    with pytest.raises(ValueError):
        detector_loss(Tensor(np.zeros((1, 3, 2))), np.zeros((1, 3, 2)), config)


# -- full differentiable chain ------------------------------------------------------

def test_full_head_gradient_toy_config():
    config = small_config()
    image = RNG.uniform(size=(1, 16, 16))
    truth = np.array([[[4.0, 5.0], [11.0, 9.0]]])
    rng = np.random.default_rng(5)
    from deformrl.detector import _build_conv_layers
    layers = _build_conv_layers(config, rng)
    k0, b0 = (p.data.copy() for p in layers[0].parameters())
    k1, b1 = (p.data.copy() for p in layers[1].parameters())

    def head_loss(tk0, tb0, tk1, tb1):
        x = ad.reshape(Tensor(image), (1, 1, 16, 16))
        x = ad.relu(ad.conv2d(x, tk0, stride=2, padding="same") + tb0)
        x = ad.conv2d(x, tk1, stride=2, padding="same") + tb1
        coords = map_to_image(expected_coordinates(x), config)
        return detector_loss(coords, truth, config)

    worst = check_gradients(head_loss, [k0, b0, k1, b1], tolerance=1e-3)
    assert worst < 1e-3


# -- estimator behaviour ---------------------------------------------------------

def test_fit_memorizes_single_image_monotone_windows():
    det = KeypointDetector(n_keypoints=2, height=16, width=16, sigma=2.0,
                           conv_stack=((8, 3, 2),), final_stride=2,
                           learning_rate=3e-3, n_steps=150, batch_size=1, seed=1)
    image = np.zeros((16, 16))
    image[4, 4:12] = 1.0
    truth = np.array([[[4.0, 4.0], [4.0, 11.0]]])
    det.fit(image[None], truth)
    losses = np.array(det.loss_history_)
    windows = losses.reshape(3, 50).mean(axis=1)
    assert (np.diff(windows) < 0).all()


def test_predict_before_fit_raises():
    det = KeypointDetector()
    with pytest.raises(NotFittedError):
        det.predict(np.zeros((1, 64, 64)))


def test_fit_empty_dataset_raises():
    det = KeypointDetector(n_keypoints=2, height=16, width=16,
                           conv_stack=((4, 3, 2),), final_stride=2)
    with pytest.raises(ValueError, match="empty"):
        det.fit(np.zeros((0, 16, 16)), np.zeros((0, 2, 2)))


def test_detect_deterministic_and_length_k(tmp_path):
    det = KeypointDetector(n_keypoints=2, height=16, width=16,
                           conv_stack=((4, 3, 2),), final_stride=2,
                           n_steps=5, batch_size=2, seed=3)
    images = RNG.uniform(size=(4, 16, 16))
    truths = RNG.uniform(2, 13, size=(4, 2, 2))
    det.fit(images, truths)
    image = RNG.uniform(size=(16, 16))
    first = det.detect(image)
    second = det.detect(image)
    assert len(first) == 2
    np.testing.assert_array_equal(first.coords, second.coords)

    path = tmp_path / "det.drlc"
    det.save_params(path)
    other = KeypointDetector(n_keypoints=2, height=16, width=16,
                             conv_stack=((4, 3, 2),), final_stride=2,
                             n_steps=5, seed=99).load_params(path)
    np.testing.assert_array_equal(other.detect(image).coords, first.coords)


# -- dataset files ------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    image = RNG.uniform(size=(16, 16))
    path = tmp_path / "img.pgm"
    write_pgm(path, image)
    back = read_pgm(path)
    assert back.shape == (16, 16)
    assert np.abs(back - image).max() <= 0.5 / 255.0 + 1e-12


def test_dataset_round_trip(tmp_path):
    images = RNG.uniform(size=(3, 16, 16))
    truths = RNG.uniform(0, 15, size=(3, 2, 2))
    save_dataset(tmp_path / "data", images, truths)
    loaded_images, loaded_truths = load_dataset(tmp_path / "data")
    assert loaded_images.shape == (3, 16, 16)
    np.testing.assert_allclose(loaded_truths, truths, atol=1e-6)

import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscae.data import (
    AugmentParams,
    LabeledImage,
    SynthConfig,
    apply_augment,
    augment,
    label_by_count,
    occupancy_mask,
    read_dataset,
    sample_augment,
    synth_generate,
    transform_point,
    write_dataset,
)
from cscae.ppm import PPMError, decode_ppm, encode_ppm, read_image, write_image


# -- PPM ---------------------------------------------------------------------


def test_ppm_two_by_two_payload_bytes():
    img = np.zeros((3, 2, 2))
    img[:, 0, 0] = (1.0, 0.0, 0.0)
    img[:, 0, 1] = (0.0, 1.0, 0.0)
    img[:, 1, 0] = (0.0, 0.0, 1.0)
    img[:, 1, 1] = (0.5, 0.25, 2 / 255)
    data = encode_ppm(img)
    header = b"P6\n2 2\n255\n"
    assert data[: len(header)] == header
    # 0.5*255 = 127.5 rounds half up to 128; 0.25*255 = 63.75 -> 64
    assert list(data[len(header) :]) == [255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 64, 2]


def test_ppm_all_black_payload_is_zero(tmp_path):
    path = tmp_path / "black.ppm"
    write_image(path, np.zeros((3, 5, 7)))
    raw = path.read_bytes()
    payload = raw[len(b"P6\n7 5\n255\n") :]
    assert len(payload) == 105 and not any(payload)


def test_ppm_round_trip_quantization_bound(tmp_path):
    img = np.random.default_rng(0).random((3, 13, 9)).astype(np.float32)
    path = tmp_path / "r.ppm"
    write_image(path, img)
    back = read_image(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 255 + 1e-7
    # quantized values survive a second trip exactly
    write_image(path, back)
    assert read_image(path).tobytes() == back.tobytes()


def test_ppm_header_comments_accepted():
    body = bytes([1, 2, 3])
    img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n" + body)
    np.testing.assert_allclose(img.ravel() * 255, [1, 2, 3], rtol=1e-6)


@pytest.mark.parametrize(
    "data, match",
    [
        (b"P3\n1 1\n255\n\x00\x00\x00", "magic"),
        (b"P6\n1 x\n255\n\x00\x00\x00", "header fields"),
        (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
        (b"P6\n2 2\n255\n\x00\x00\x00", "truncated PPM payload"),
        (b"P6\n2", "truncated PPM header"),
        (b"P6\n0 2\n255\n", "dimensions"),
    ],
)
def test_ppm_malformed_inputs(data, match):
    with pytest.raises(PPMError, match=match):
        decode_ppm(data)


def test_ppm_read_error_names_the_file(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P6\n4 4\n255\n\x00")
    with pytest.raises(PPMError, match="bad.ppm"):
        read_image(path)


def test_ppm_rejects_wrong_rank():
    with pytest.raises(PPMError):
        encode_ppm(np.zeros((2, 2)))


# -- synthetic generation ------------------------------------------------------


def test_synth_config_validation():
    for bad in (
        dict(nuclei_per_image=(3, 1)),
        dict(nucleus_radius=(1.0, 3.0)),
        dict(nucleus_radius=(4.0, 25.0)),
        dict(nucleus_color=((0.2, 1.2), (0.0, 0.1), (0.0, 0.1))),
    ):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_synth_zero_nuclei_is_pure_background():
    images = synth_generate(SynthConfig(nuclei_per_image=(0, 0), seed=4), 5)
    for im in images:
        assert im.centers == []
        # smooth background plus noise: no dark blobs
        assert im.pixels.min() > 0.3


def _digest(images):
    h = hashlib.sha256()
    for im in images:
        h.update(im.pixels.tobytes())
        h.update(repr(im.centers).encode())
    return h.hexdigest()


def test_synth_deterministic_per_seed():
    cfg = SynthConfig(seed=11)
    assert _digest(synth_generate(cfg, 12)) == _digest(synth_generate(cfg, 12))
    assert _digest(synth_generate(SynthConfig(seed=12), 12)) != _digest(synth_generate(cfg, 12))


def test_synth_independent_of_split():
    cfg = SynthConfig(seed=3)
    whole = synth_generate(cfg, 10)
    parts = synth_generate(cfg, 4) + synth_generate(cfg, 6, start=4)
    assert _digest(whole) == _digest(parts)


def test_synth_images_and_centers_within_bounds():
    for im in synth_generate(SynthConfig(nuclei_per_image=(2, 4), seed=5), 30):
        assert im.pixels.shape == (3, 40, 40) and im.pixels.dtype == np.float32
        assert 0 <= im.pixels.min() and im.pixels.max() <= 1
        assert 2 <= len(im.centers) <= 4
        for x, y in im.centers:
            assert 0 <= x <= 39 and 0 <= y <= 39


def test_synth_nuclei_are_darker_than_background():
    for im in synth_generate(SynthConfig(nuclei_per_image=(1, 1), noise_std=0.0, seed=8), 10):
        inside = occupancy_mask(im.nuclei, 40)
        gray = im.pixels.mean(axis=0)
        assert gray[inside].mean() < gray[~inside].mean() - 0.2


def test_synth_occupied_area_matches_analytic_expectation():
    cfg = SynthConfig(nucleus_radius=(4.0, 6.0), nuclei_per_image=(3, 8), seed=21)
    images = synth_generate(cfg, 300)
    measured = np.mean([occupancy_mask(im.nuclei, cfg.image_size).mean() for im in images])
    # E[count] * pi * E[r^2] * E[aspect] / image area
    r_lo, r_hi = cfg.nucleus_radius
    mean_r2 = (r_hi**3 - r_lo**3) / (3 * (r_hi - r_lo))
    mean_aspect = sum(cfg.nucleus_aspect) / 2
    mean_count = sum(cfg.nuclei_per_image) / 2
    expected = mean_count * math.pi * mean_r2 * mean_aspect / cfg.image_size**2
    assert abs(measured - expected) <= 0.2 * expected


def test_synth_placement_failure_is_reported():
    cfg = SynthConfig(nucleus_radius=(8.0, 9.0), nuclei_per_image=(12, 12), max_retries=50, max_restarts=3)
    with pytest.raises(RuntimeError, match="could not place"):
        synth_generate(cfg, 1)


def test_label_by_count():
    images = synth_generate(SynthConfig(seed=2), 40)
    label_by_count(images, 2)
    assert all(im.label == int(len(im.centers) >= 2) for im in images)
    assert {im.label for im in images} == {0, 1}


# -- augmentation --------------------------------------------------------------


def _image(seed=0, size=40, centers=((10.0, 5.0),)):
    pixels = np.random.default_rng(seed).random((3, size, size)).astype(np.float32)
    return LabeledImage(pixels, list(centers))


def test_identity_augment_leaves_pixels_unchanged():
    im = _image()
    out = apply_augment(im, AugmentParams.identity(40, 40))
    assert out.pixels.tobytes() == im.pixels.tobytes() and out.centers == im.centers


def test_mirror_twice_is_identity():
    im = _image(1)
    p = AugmentParams(0, 0, 40, mirror=True)
    twice = apply_augment(apply_augment(im, p), p)
    assert twice.pixels.tobytes() == im.pixels.tobytes()
    assert twice.centers == im.centers


def test_quarter_turn_center_example():
    p = AugmentParams(0, 0, 40, rotations=1)
    assert transform_point(10, 5, p) == (5, 29)
    mask = np.zeros((3, 40, 40), dtype=np.float32)
    mask[:, 5, 10] = 1.0  # row y=5, column x=10
    out = apply_augment(LabeledImage(mask, [(10.0, 5.0)]), p)
    rows, cols = np.nonzero(out.pixels[0])
    assert (int(cols[0]), int(rows[0])) == (5, 29)
    assert out.centers == [(5.0, 29.0)]


def test_four_quarter_turns_compose_to_identity():
    im = _image(2)
    p = AugmentParams(0, 0, 40, rotations=1)
    out = im
    for _ in range(4):
        out = apply_augment(out, p)
    assert out.pixels.tobytes() == im.pixels.tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_centers_follow_dots_under_any_augmentation(seed):
    rng = np.random.default_rng(seed)
    src, crop = 48, 40
    centers = [(float(rng.integers(0, src)), float(rng.integers(0, src))) for _ in range(3)]
    dots = np.zeros((3, src, src), dtype=np.float32)
    for x, y in centers:
        dots[:, int(y), int(x)] = 1.0
    params = sample_augment(rng, src, crop)
    params = AugmentParams(params.crop_x, params.crop_y, crop, rotations=params.rotations, mirror=params.mirror)
    out = apply_augment(LabeledImage(dots, centers), params)
    rows, cols = np.nonzero(out.pixels[0] > 0.5)
    assert set(zip(cols.tolist(), rows.tolist())) == {(int(x), int(y)) for x, y in out.centers}


def test_mirror_frequency_is_one_half():
    rng = np.random.default_rng(0)
    draws = [sample_augment(rng, 48, 40).mirror for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.5) <= 0.05


def test_rotation_and_jitter_ranges():
    rng = np.random.default_rng(1)
    params = [sample_augment(rng, 48, 40) for _ in range(2000)]
    counts = np.bincount([p.rotations for p in params], minlength=4)
    assert np.all(np.abs(counts / 2000 - 0.25) < 0.05)
    assert all(0.9 <= s <= 1.1 for p in params for s in p.color_scale)
    assert all(-0.05 <= s <= 0.05 for p in params for s in p.color_shift)
    assert all(0 <= p.crop_x <= 8 and 0 <= p.crop_y <= 8 for p in params)


def test_augment_output_stays_in_unit_range():
    im = _image(3, size=48)
    out = augment(im, np.random.default_rng(5), crop_size=40)
    assert out.pixels.shape == (3, 40, 40)
    assert 0 <= out.pixels.min() and out.pixels.max() <= 1


def test_crop_larger_than_source_rejected():
    with pytest.raises(ValueError, match="larger than source"):
        augment(_image(size=32), np.random.default_rng(0), crop_size=40)
    with pytest.raises(ValueError):
        apply_augment(_image(size=32), AugmentParams(0, 0, 40))


# -- dataset directory ---------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    images = label_by_count(synth_generate(SynthConfig(seed=6), 8), 2)
    write_dataset(tmp_path, images)
    back = read_dataset(tmp_path)
    assert len(back) == 8
    for a, b in zip(images, back):
        assert np.max(np.abs(a.pixels - b.pixels)) <= 1 / 255 + 1e-7
        assert a.label == b.label
        assert len(a.centers) == len(b.centers)
        for (ax, ay), (bx, by) in zip(a.centers, b.centers):
            assert abs(ax - bx) <= 5e-4 and abs(ay - by) <= 5e-4

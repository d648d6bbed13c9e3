import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offnet import data as D
from offnet.errors import FormatError, InvalidArgumentError, OutOfBoundsError


# -- sampling ---------------------------------------------------------------


def test_train_sampling_documented_case():
    assert D.train_seed_range(20, 3, 5) == range(0, 12)

    class Fixed:
        def integers(self, lo, hi):
            return 2

    assert D.train_sample_indices(20, 3, 5, Fixed()) == [2, 6, 10]


def test_minimal_legal_plan():
    assert D.train_seed_range(2, 1, 2) == range(0, 2)


def test_train_seed_hits_every_value_and_nothing_else():
    rng = np.random.default_rng(0)
    seen = {D.train_sample_indices(20, 3, 5, rng)[0] for _ in range(10_000)}
    assert seen == set(range(12))


def test_test_indices_documented_cases():
    assert D.test_sample_indices(20, 5) == [1, 5, 9, 13, 17]
    assert D.test_sample_indices(5, 5) == [0, 1, 2, 3, 4]
    assert D.test_sample_indices(16, 5) == [1, 4, 7, 10, 13]


@pytest.mark.parametrize("L, alpha, beta", [(4, 1, 5), (20, 6, 5), (20, 0, 5), (20, 1, 0)])
def test_sampling_rejects_bad_plans(L, alpha, beta):
    with pytest.raises(InvalidArgumentError):
        D.train_sample_indices(L, alpha, beta, np.random.default_rng(0))


def test_test_indices_reject_short_clip():
    with pytest.raises(InvalidArgumentError):
        D.test_sample_indices(3, 5)


@st.composite
def plans(draw):
    beta = draw(st.integers(1, 200))
    L = draw(st.integers(beta, 10_000))
    alpha = draw(st.integers(1, beta))
    return L, alpha, beta


@settings(max_examples=300, deadline=None)
@given(plans(), st.integers(0, 2**32 - 1))
def test_sampling_properties(plan, seed):
    L, alpha, beta = plan
    interval = L // beta
    train = D.train_sample_indices(L, alpha, beta, np.random.default_rng(seed))
    test = D.test_sample_indices(L, beta)
    for idx in (train, test):
        assert all(0 <= i <= L - 1 for i in idx)
        assert all(b - a == interval for a, b in zip(idx, idx[1:]))
        assert len(set(idx)) == len(idx)
    assert len(train) == alpha and len(test) == beta
    assert train[0] in range(0, L - 1 - (alpha - 1) * interval + 1)


# -- patterns and clips -----------------------------------------------------


def test_gaussian_matches_closed_form():
    sigma = 4.0
    frame = D.render_frame(D.gaussian_blob(sigma), (15.3, 16.7), 32)
    y, x = np.mgrid[0:32, 0:32]
    ref = np.exp(-((x - 15.3) ** 2 + (y - 16.7) ** 2) / (2 * sigma**2))
    assert np.abs(frame - ref).max() < 1e-6


def test_zero_velocity_frames_are_identical():
    clip = D.gen_translating_clip(D.gaussian_blob(3), (0.0, 0.0), 5, 32, rng=np.random.default_rng(0))
    for t in range(1, 5):
        np.testing.assert_array_equal(clip.frames[t], clip.frames[0])


@pytest.mark.parametrize("pattern", [D.gaussian_blob(3), D.square(6), D.bars(10)])
def test_integer_velocity_is_a_pixel_shift(pattern):
    clip = D.gen_translating_clip(pattern, (1.0, 0.0), 4, 32, start=(12.25, 15.5))
    for t in range(3):
        np.testing.assert_allclose(clip.frames[t + 1][..., 1:], clip.frames[t][..., :-1], atol=1e-6)


def _bilinear_shift(img, dx, dy):
    """img sampled at (x - dx, y - dy) with bilinear interpolation; NaN where undefined."""
    h, w = img.shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    sx, sy = x - dx, y - dy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < w) & (y0 + 1 < h)
    x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
    out = ((1 - fx) * (1 - fy) * img[y0c, x0c] + fx * (1 - fy) * img[y0c, x0c + 1]
           + (1 - fx) * fy * img[y0c + 1, x0c] + fx * fy * img[y0c + 1, x0c + 1])
    return np.where(ok, out, np.nan)


@pytest.mark.parametrize("velocity", [(1.0, 0.0), (0.0, -1.0), (1.0, 1.0), (-2.0, 1.0)])
def test_brightness_constancy_integer_velocities(velocity):
    clip = D.gen_translating_clip(D.gaussian_blob(3), velocity, 4, 32, rng=np.random.default_rng(1))
    for t in range(3):
        moved = _bilinear_shift(clip.frames[t, 0].astype(float), *velocity)[1:-1, 1:-1]
        diff = np.abs(clip.frames[t + 1, 0, 1:-1, 1:-1] - moved)
        assert np.nanmax(diff) < 1e-5


def test_subpixel_motion_moves_the_centroid_exactly():
    clip = D.gen_translating_clip(D.gaussian_blob(2), (0.5, -0.25), 8, 48, rng=np.random.default_rng(2))
    y, x = np.mgrid[0:48, 0:48]
    cx = [(f[0] * x).sum() / f[0].sum() for f in clip.frames]
    cy = [(f[0] * y).sum() / f[0].sum() for f in clip.frames]
    np.testing.assert_allclose(np.diff(cx), 0.5, atol=1e-4)
    np.testing.assert_allclose(np.diff(cy), -0.25, atol=1e-4)


def test_leaving_the_frame_raises():
    with pytest.raises(OutOfBoundsError):
        D.gen_translating_clip(D.gaussian_blob(3), (2.0, 0.0), 16, 32)
    with pytest.raises(OutOfBoundsError):
        D.gen_translating_clip(D.gaussian_blob(3), (1.0, 0.0), 4, 32, start=(29.0, 16.0))
    with pytest.raises(InvalidArgumentError):
        D.gen_translating_clip(D.gaussian_blob(3), (1.0, 0.0), 1, 32)


def test_pattern_kind_is_validated():
    with pytest.raises(InvalidArgumentError):
        D.Pattern("disc")


def test_direction_velocities():
    assert D.direction_velocity(0, 1.0) == (1.0, 0.0)
    assert D.direction_velocity(2, 1.0) == (0.0, 1.0)
    vx, vy = D.direction_velocity(3, 2.0)
    assert vx == pytest.approx(-math.sqrt(2)) and vy == pytest.approx(math.sqrt(2))


# -- the direction dataset --------------------------------------------------


@pytest.fixture(scope="module")
def small_set():
    return D.VideoDataset.from_clips(D.gen_direction_dataset(12, 8, 32, 0.5, seed=1, pattern=D.gaussian_blob(3)))


def test_dataset_is_balanced(small_set):
    assert len(small_set) == 96
    assert np.bincount(small_set.labels).tolist() == [12] * 8


def test_per_class_motion_matches_the_class_direction(small_set):
    y, x = np.mgrid[0:32, 0:32]
    f = small_set.frames[:, :, 0]
    mass = f.sum(axis=(2, 3))
    cx, cy = (f * x).sum(axis=(2, 3)) / mass, (f * y).sum(axis=(2, 3)) / mass
    vx = (cx[:, -1] - cx[:, 0]) / 7
    vy = (cy[:, -1] - cy[:, 0]) / 7
    for k in range(8):
        ex, ey = D.direction_velocity(k, 0.5)
        sel = small_set.labels == k
        assert vx[sel].mean() == pytest.approx(ex, abs=1e-3)
        assert vy[sel].mean() == pytest.approx(ey, abs=1e-3)


def test_single_frames_do_not_reveal_the_class(small_set):
    bins = np.linspace(0, 1, 21)
    hist = np.stack([np.histogram(clip[0], bins)[0] for clip in small_set.frames]).astype(float)

    def spread(labels):
        means = np.stack([hist[labels == k].mean(axis=0) for k in range(8)])
        return np.abs(means - means.mean(axis=0)).max()

    observed = spread(small_set.labels)
    rng = np.random.default_rng(0)
    null = [spread(rng.permutation(small_set.labels)) for _ in range(200)]
    # the true labelling should look like a random one
    assert observed <= np.quantile(null, 0.99)


def test_generation_is_seeded_per_clip():
    a = D.gen_direction_dataset(2, 4, 32, 1.0, seed=5)
    b = D.gen_direction_dataset(3, 4, 32, 1.0, seed=5)
    for ca, cb in zip(a, b):
        np.testing.assert_array_equal(ca.frames, cb.frames)
    c = D.gen_direction_dataset(2, 4, 32, 1.0, seed=6)
    assert any(not np.array_equal(x.frames, y.frames) for x, y in zip(a, c))


def test_segments_gather_requested_frames(small_set):
    clip_ids = np.array([3, 10])
    frame_ids = np.array([[0, 4], [2, 7]])
    segs = small_set.segments(clip_ids, frame_ids)
    assert len(segs) == 2 and segs[0].shape == (2, 1, 32, 32)
    np.testing.assert_array_equal(segs[1].data[1], small_set.frames[10, 7])


# -- dataset directory ------------------------------------------------------


def test_write_read_round_trip(tmp_path):
    clips = D.gen_direction_dataset(2, 4, 16, 0.5, seed=3, pattern=D.gaussian_blob(2))
    D.write_dataset(tmp_path / "ds", clips)
    back = D.read_dataset(tmp_path / "ds")
    ref = D.VideoDataset.from_clips(clips)
    np.testing.assert_array_equal(back.frames, ref.frames)
    np.testing.assert_array_equal(back.labels, ref.labels)
    np.testing.assert_array_equal(back.velocities, ref.velocities)
    lines = (tmp_path / "ds" / D.MANIFEST_NAME).read_text().splitlines()
    assert len(lines) == 2 + 16


def test_blob_is_little_endian_tchw(tmp_path):
    clips = D.gen_direction_dataset(1, 3, 16, 0.5, seed=3, pattern=D.gaussian_blob(2))
    D.write_dataset(tmp_path, clips)
    raw = np.fromfile(tmp_path / "clip_000005.f32", dtype="<f4")
    np.testing.assert_array_equal(raw, clips[5].frames.ravel())


def test_write_refuses_non_empty_dir_without_force(tmp_path):
    clips = D.gen_direction_dataset(1, 3, 16, 0.5, seed=3, pattern=D.gaussian_blob(2))
    D.write_dataset(tmp_path, clips)
    with pytest.raises(InvalidArgumentError):
        D.write_dataset(tmp_path, clips)
    D.write_dataset(tmp_path, clips[:4], force=True)
    assert len(D.read_dataset(tmp_path)) == 4


def test_read_rejects_damage(tmp_path):
    clips = D.gen_direction_dataset(1, 3, 16, 0.5, seed=3, pattern=D.gaussian_blob(2))
    D.write_dataset(tmp_path, clips)
    blob = tmp_path / "clip_000002.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(FormatError, match="clip_000002"):
        D.read_dataset(tmp_path)
    (tmp_path / D.MANIFEST_NAME).write_text("not a manifest\n")
    with pytest.raises(FormatError):
        D.read_dataset(tmp_path)
    with pytest.raises(FormatError):
        D.read_dataset(tmp_path / "missing")


# -- orthogonality ----------------------------------------------------------


def _centred(sigma, v, size=64):
    c = (size - 1) / 2
    return D.gen_translating_clip(D.gaussian_blob(sigma), v, 2, size, start=(c - v[0] / 2, c - v[1] / 2))


def test_residual_is_exactly_zero_without_motion():
    assert D.orthogonality_residual(_centred(4, (0.0, 0.0))) == 0.0


def test_residual_small_for_documented_case():
    assert D.orthogonality_residual(_centred(4, (1.0, 0.0))) < 0.05


def test_residual_needs_velocity():
    clip = _centred(4, (1.0, 0.0))
    clip.velocity = None
    with pytest.raises(InvalidArgumentError):
        D.orthogonality_residual(clip)


def test_residual_detects_wrong_velocity():
    clip = _centred(4, (1.0, 0.0))
    clip.velocity = (-1.0, 0.0)
    assert D.orthogonality_residual(clip) > 0.5


def test_residual_grows_with_speed():
    for sigma in (3.0, 4.0, 6.0):
        res = [D.orthogonality_residual(_centred(sigma, (s, 0.0))) for s in (0.5, 1.0, 1.5, 2.0)]
        assert res == sorted(res)


def test_residual_grows_as_blobs_shrink_below_a_pixel():
    res = [D.orthogonality_residual(_centred(s, (0.5, 0.0))) for s in (1.0, 0.8, 0.6, 0.4)]
    assert res == sorted(res)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from adversa.codec import (
    LatentClip,
    PixelShuffleCodec,
    binarize_latent,
    decode,
    encode,
    literal_latent_mask,
    load_latent,
    mask_clip,
    rasterize_latent_mask,
    save_latent,
)
from adversa.errors import ConventionError, ShapeError
from adversa.scenario import BBoxTrack, VideoClip, box_pixel_bounds, clip_tracks, generate_scenario, reverse_clip


def _track(box, T=4):
    return BBoxTrack(0, np.tile(np.asarray(box, float), (T, 1)), np.ones(T, bool))


def _random_tracks(rng, n, T):
    out = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 0.8, 2)
        w, h = rng.uniform(0.02, 0.2, 2)
        out.append(_track([x0, y0, min(1, x0 + w), min(1, y0 + h)], T))
    return out


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (2, 16, 24, 3), elements=st.floats(0, 1, width=32)))
def test_round_trip_is_exact(x):
    z = encode(x)
    assert z.shape == (2, 2, 3, 192)
    assert z.range == "unit"
    np.testing.assert_array_equal(decode(z), x)


def test_zero_clip_gives_zero_latent_and_dims():
    z = encode(np.zeros((3, 64, 64, 3), np.float32))
    assert z.shape == (3, 8, 8, 192)
    assert not z.values.any()


def test_signed_view_round_trip():
    x = np.random.default_rng(0).random((2, 8, 8, 3)).astype(np.float32)
    z = encode(x).to_signed()
    assert z.range == "signed" and z.values.min() >= -1
    np.testing.assert_allclose(decode(z), x, atol=1e-7)


def test_permutation_differs_by_seed_but_round_trips():
    x = np.random.default_rng(1).random((1, 16, 16, 3)).astype(np.float32)
    a, b = PixelShuffleCodec(seed=0), PixelShuffleCodec(seed=1)
    assert not np.array_equal(a.encode(x).values, b.encode(x).values)
    np.testing.assert_array_equal(b.decode(b.encode(x)), x)


@pytest.mark.parametrize("shape", [(1, 60, 64, 3), (1, 64, 63, 3), (1, 64, 64, 1), (64, 64, 3)])
def test_bad_shapes(shape):
    with pytest.raises(ShapeError):
        encode(np.zeros(shape, np.float32))


def test_mask_clip_cases():
    x = np.random.default_rng(2).random((4, 16, 16, 3))
    np.testing.assert_array_equal(mask_clip(x, []), x)
    assert not mask_clip(x, [_track([0, 0, 1, 1])]).any()


def test_mask_clip_matches_point_in_box_loop():
    rng = np.random.default_rng(3)
    T, H, W = 3, 16, 24
    x = rng.random((T, H, W, 3)) + 0.1
    tracks = _random_tracks(rng, 3, T)
    out = mask_clip(x, tracks)
    for t in range(T):
        for i in range(H):
            for j in range(W):
                inside = any(
                    tr.boxes[t, 0] <= (j + 0.5) / W < tr.boxes[t, 2] and tr.boxes[t, 1] <= (i + 0.5) / H < tr.boxes[t, 3]
                    for tr in tracks
                )
                if inside:
                    assert not out[t, i, j].any()
                else:
                    np.testing.assert_array_equal(out[t, i, j], x[t, i, j])


def test_mask_commutes_with_reversal():
    s = generate_scenario(4)
    clip = VideoClip(s.frames[20:36], np.arange(20, 36))
    tr = clip_tracks(s.tracks, clip)
    rev = reverse_clip(clip)
    np.testing.assert_array_equal(mask_clip(rev.frames, [t.reversed() for t in tr]), mask_clip(clip.frames, tr)[::-1])
    # a VideoClip may be given full-length tracks
    np.testing.assert_array_equal(mask_clip(clip, s.tracks), mask_clip(clip.frames, tr))


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize_latent(LatentClip(np.array([0.5, 0.49, 1.0, 0.0]))), [1, 0, 1, 0])
    assert not binarize_latent(LatentClip(np.zeros((2, 2)))).any()
    with pytest.raises(ConventionError):
        binarize_latent(LatentClip(np.zeros(3), "signed"))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)))
def test_binarize_idempotent(z):
    m = binarize_latent(z)
    np.testing.assert_array_equal(binarize_latent(m), m)


def test_raster_mask_cases():
    shape = (4, 2, 2, 192)
    assert rasterize_latent_mask([], shape).all()
    assert not rasterize_latent_mask([_track([0, 0, 1, 1])], shape).any()


def test_raster_mask_matches_pixel_downsample():
    rng = np.random.default_rng(5)
    T, H, W, f = 3, 32, 48, 8
    for _ in range(20):
        tracks = _random_tracks(rng, int(rng.integers(1, 4)), T)
        m = rasterize_latent_mask(tracks, (T, H // f, W // f, 5))
        pix = np.zeros((T, H, W), bool)
        for tr in tracks:
            for t in range(T):
                r0, r1, c0, c1 = box_pixel_bounds(tr.boxes[t], H, W)
                pix[t, r0:r1, c0:c1] = True
        touched = pix.reshape(T, H // f, f, W // f, f).any(axis=(2, 4))
        np.testing.assert_array_equal(m, np.repeat((~touched)[..., None].astype(np.float32), 5, axis=-1))


def test_literal_mask_is_binarized_masked_latent():
    s = generate_scenario(8)
    clip = VideoClip(s.frames[30:46], np.arange(30, 46))
    tr = clip_tracks(s.tracks, clip)
    m = literal_latent_mask(clip.frames, tr)
    assert set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m, (encode(mask_clip(clip.frames, tr)).values >= 0.5).astype(np.float32))


def test_latent_file_round_trip(tmp_path):
    z = LatentClip(np.random.default_rng(6).random((2, 3, 4, 5)).astype(np.float32) * 2 - 1, "signed")
    save_latent(tmp_path / "z.lat", z)
    head = (tmp_path / "z.lat").read_bytes().split(b"\n", 1)[0].decode()
    assert "dtype=float32" in head and "shape=2,3,4,5" in head and "range=signed" in head
    back = load_latent(tmp_path / "z.lat")
    assert back.range == "signed"
    np.testing.assert_array_equal(back.values, z.values)

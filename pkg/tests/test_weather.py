import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import rasterize_loop, streak_render_oracle
from hbenhance.weather import (
    VARIANT_TAGS, DatasetError, DatasetManifest, HazeParams, RaindropParams, RainStreakParams, SynthConfig,
    WeatherParamError, WeatherRecipe, apply_haze, apply_raindrops, build_paired_dataset, compose_variants,
    dehaze_known, derive_seed, rasterize_segments, render_rain_streaks, sample_streaks, transmission_map,
    write_image,
)


def rand_img(seed, h=16, w=16):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, 3))


# -- seeds ---------------------------------------------------------------------

def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a"), derive_seed(0, "b"), derive_seed(1, "a")}) == 3
    assert 0 <= derive_seed(5, "x") < 2 ** 64


# -- haze ----------------------------------------------------------------------

def test_transmission_hand_values():
    assert np.all(transmission_map(np.random.rand(4, 4), 0.0) == 1.0)
    np.testing.assert_allclose(transmission_map(np.full((3, 3), math.log(2)), 1.0), 0.5, rtol=1e-15)


def test_transmission_scalar_loop():
    d = np.random.default_rng(0).uniform(0, 3, (4, 4))
    t = transmission_map(d, 0.7)
    for i in range(4):
        for j in range(4):
            assert t[i, j] == math.exp(-0.7 * d[i, j])


def test_haze_identity_at_zero_beta():
    img = rand_img(1)
    assert np.array_equal(apply_haze(img, HazeParams((0.9, 0.8, 0.7), 0.0)), img)


def test_haze_saturates_to_airlight():
    img = rand_img(2)
    depth = np.full((16, 16), 2.0)
    out = apply_haze(img, HazeParams((0.8, 0.7, 0.6), 4.0, depth))
    assert np.abs(out - np.array([0.8, 0.7, 0.6])).max() < 1e-3


def test_haze_2x2_hand_arithmetic():
    j = np.array([[[0.0, 0.2, 0.4], [1.0, 0.5, 0.1]], [[0.3, 0.3, 0.3], [0.9, 0.0, 0.6]]])
    out = apply_haze(j, HazeParams((0.8, 0.8, 0.8), 1.0, np.full((2, 2), math.log(2))))
    np.testing.assert_allclose(out, 0.5 * j + 0.4, atol=1e-15)


def test_dehaze_round_trip():
    img = rand_img(3, 32, 24) * 0.8 + 0.1
    p = HazeParams((0.9, 0.85, 0.8), 1.5)
    assert np.abs(dehaze_known(apply_haze(img, p), p) - img).max() <= 1e-5


def test_haze_param_validation():
    with pytest.raises(WeatherParamError):
        apply_haze(rand_img(0), HazeParams((0.9, 0.9, 0.9), -1.0))
    with pytest.raises(WeatherParamError):
        apply_haze(rand_img(0), HazeParams((1.2, 0.9, 0.9), 1.0))
    with pytest.raises(WeatherParamError):
        transmission_map(np.array([[-1.0]]), 1.0)


# -- streaks ---------------------------------------------------------------------

def test_zero_density_identity():
    img = rand_img(4)
    assert np.array_equal(render_rain_streaks(img, RainStreakParams(density=0), 0), img)


def test_streaks_deterministic():
    img = rand_img(5, 64, 64)
    p = RainStreakParams(density=4000, streak_length=9, orientation_deg=20)
    assert np.array_equal(render_rain_streaks(img, p, 11), render_rain_streaks(img, p, 11))
    assert not np.array_equal(render_rain_streaks(img, p, 11), render_rain_streaks(img, p, 12))


def test_streaks_match_rasterizer_oracle():
    img = rand_img(0, 64, 64)
    p = RainStreakParams(intensity_class="light", orientation_deg=-25.0, density=4000, streak_length=9.6,
                         streak_alpha=0.4)
    segs = sample_streaks(64, 64, p, 0)
    assert len(segs) == round(4000 * 64 * 64 / 1e6)
    np.testing.assert_array_equal(render_rain_streaks(img, p, 0), streak_render_oracle(img, segs, p))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-3, 19, allow_nan=False)] * 4), max_size=4), st.floats(0.3, 3.0))
def test_rasterizer_matches_loop(segments, width):
    segs = np.array(segments, dtype=np.float64).reshape(-1, 4)
    np.testing.assert_array_equal(rasterize_segments(12, 16, segs, width), rasterize_loop(12, 16, segs, width))


# -- drops -----------------------------------------------------------------------

def test_drop_identities():
    img = rand_img(6, 32, 32)
    assert np.array_equal(apply_raindrops(img, RaindropParams(drop_count=0), 1), img)
    assert np.array_equal(apply_raindrops(img, RaindropParams(drop_count=4, drop_alpha=0.0), 1), img)


def test_drop_on_constant_image():
    img = np.full((32, 32, 3), 0.37)
    out = apply_raindrops(img, RaindropParams(drop_count=1), 0, drops=np.array([[16.0, 16.0, 5.0]]))
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_drop_radius_too_large():
    with pytest.raises(WeatherParamError):
        apply_raindrops(rand_img(0), RaindropParams(radius_range=(2, 9)), 0)


# -- composition -------------------------------------------------------------------

def test_four_variants_with_distinct_tags():
    vs = compose_variants(rand_img(7, 32, 32), 3)
    assert [v[0] for v in vs] == list(VARIANT_TAGS)
    assert len({v[0] for v in vs}) == 4


def test_zeroed_config_gives_clean_copies():
    img = rand_img(8, 32, 32)
    for _, out, _ in compose_variants(img, 0, SynthConfig.zeroed()):
        assert np.array_equal(out, img)


def test_compose_reproducible_and_recipe_round_trip():
    img = rand_img(9, 32, 32)
    a, b = compose_variants(img, 4), compose_variants(img, 4)
    for (ta, ia, ra), (tb, ib, rb) in zip(a, b):
        assert ta == tb and np.array_equal(ia, ib)
        assert ra.to_dict() == rb.to_dict()
        assert WeatherRecipe.from_dict(json.loads(json.dumps(ra.to_dict()))).to_dict() == ra.to_dict()


def test_heavy_is_denser_than_light():
    recs = {t: r for t, _, r in compose_variants(rand_img(0, 32, 32), 0)}
    assert recs["heavy-hazeA"].streak.density > recs["light-hazeA"].streak.density


# -- datasets ----------------------------------------------------------------------

def _clean_dir(tmp_path, n=3):
    d = tmp_path / "clean"
    for i in range(n):
        write_image(d / f"img{i}.png", rand_img(i, 24, 32))
    return d


def test_three_images_give_twelve_records(tmp_path):
    m = build_paired_dataset(_clean_dir(tmp_path), tmp_path / "out", seed=0)
    assert len(m.records) == 12
    assert len(list((tmp_path / "out" / "degraded").rglob("*.png"))) == 12
    assert DatasetManifest.read(tmp_path / "out" / "manifest.jsonl").records == m.records


def test_rerun_is_identical(tmp_path):
    src = _clean_dir(tmp_path)
    build_paired_dataset(src, tmp_path / "a", seed=1)
    build_paired_dataset(src, tmp_path / "b", seed=1)
    ra = (tmp_path / "a" / "manifest.jsonl").read_text().replace(str(tmp_path / "a"), "")
    rb = (tmp_path / "b" / "manifest.jsonl").read_text().replace(str(tmp_path / "b"), "")
    assert ra == rb
    for f in (tmp_path / "a" / "degraded").rglob("*.png"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_empty_dir_errors_without_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        build_paired_dataset(tmp_path / "empty", tmp_path / "out")
    assert not (tmp_path / "out" / "manifest.jsonl").exists()


def test_unreadable_file_is_skipped(tmp_path):
    src = _clean_dir(tmp_path, 2)
    (src / "broken.png").write_bytes(b"not an image")
    m = build_paired_dataset(src, tmp_path / "out")
    assert len(m.records) == 8
    assert any("broken" in s for s in m.skipped)

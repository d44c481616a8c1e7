import numpy as np
import pytest

from voxelrec.datagen import (ALBEDO, AMBIENT, AZIMUTHS_DEG, DatasetFormatError, SceneFactors, ShapeSpec,
                              cell_centres, dataset_paths, factor_batches, light_direction, make_dataset,
                              read_dataset, render, render_video, sample_shape, shade, surface_albedo, voxelize)


def test_sampling_is_seeded_and_in_range():
    a = sample_shape("head", np.random.default_rng(3))
    b = sample_shape("head", np.random.default_rng(3))
    assert np.array_equal(a.params, b.params) and a.params.shape == (8,)
    assert sample_shape("chair", np.random.default_rng(0)).params.shape == (6,)
    with pytest.raises(ValueError):
        sample_shape("car", np.random.default_rng(0))


@pytest.mark.parametrize("family", ["head", "chair"])
def test_many_samples_voxelize_nonempty(family):
    rng = np.random.default_rng(0)
    for _ in range(1000 if family == "head" else 200):
        assert voxelize(sample_shape(family, rng), 30).any()


def test_ellipsoid_occupancy_matches_analytic_volume():
    ax, ay, az = 0.5, 0.5, 0.5
    spec = ShapeSpec("head", [ax, ay, az, 0, 0, 0.1, 0.2, 0])
    for res in (30, 32, 80):
        frac = voxelize(spec, res).mean()
        analytic = 4 / 3 * np.pi * ax * ay * az / 8
        assert abs(frac - analytic) / analytic < 0.03


def test_cell_centres_symmetric():
    c = cell_centres(32)
    assert np.allclose(c, -c[::-1]) and c[0] == pytest.approx(-31 / 32)


def test_head_volume_is_mirror_symmetric():
    v = voxelize(sample_shape("head", np.random.default_rng(5)), 32)
    assert np.array_equal(v, v[:, :, ::-1])


def test_brightest_pixel_when_normal_faces_light():
    light = light_direction(1)
    assert np.allclose(shade(light[None], light)[0], np.clip((AMBIENT + 1.0) * ALBEDO, 0, 1))
    assert np.allclose(shade(-light[None], light)[0], AMBIENT * ALBEDO)


def test_left_and_right_light_mirror_each_other():
    spec = sample_shape("head", np.random.default_rng(2))
    left = render(spec, SceneFactors(2, 0), 32)
    right = render(spec, SceneFactors(2, 2), 32)
    assert np.allclose(left, right[:, :, ::-1], atol=1e-6)


def test_albedo_pattern_is_symmetric_and_head_only():
    rng = np.random.default_rng(4)
    head = sample_shape("head", rng)
    p = rng.uniform(-1, 1, size=(500, 3))
    f = surface_albedo(head, p)
    assert np.array_equal(f, surface_albedo(head, p * [-1, 1, 1]))
    assert set(np.unique(f)) <= {0.15, 0.3, 0.45, 1.0} and f.min() < 1.0
    assert np.all(surface_albedo(sample_shape("chair", rng), p) == 1.0)


def test_frontal_view_shows_darker_eyes_than_cheeks():
    spec = ShapeSpec("head", [0.55, 0.75, 0.7, 0.2, 0.15, 0.1, 0.2, 0.08])
    img = render(spec, SceneFactors(2, 1), 80).mean(axis=0)
    # eye centre vs a cheek point below it, in pixel coordinates
    col = int(round((0.36 * 0.55 + 1) / 2 * 80 - 0.5))
    eye_row = int(round((1 - 0.1 * 0.75) / 2 * 80 - 0.5))
    cheek_row = int(round((1 + 0.3 * 0.75) / 2 * 80 - 0.5))
    assert img[eye_row, col] < 0.5 * img[cheek_row, col]


def test_render_is_deterministic_and_bounded():
    spec = sample_shape("head", np.random.default_rng(1))
    a, b = render(spec, SceneFactors(1, 1), 32), render(spec, SceneFactors(1, 1), 32)
    assert np.array_equal(a, b) and a.shape == (3, 32, 32)
    assert a.min() >= 0 and a.max() <= 1 and a[:, 0, 0].max() == 0


def _projected_silhouette(vol, azimuth):
    # rotate occupied voxel centres into the camera frame and splat
    res = vol.shape[0]
    c = cell_centres(res)
    z, y, x = np.meshgrid(c, -c, c, indexing="ij")
    pts = np.stack([x[vol > 0], y[vol > 0], z[vol > 0]], axis=1)
    a = np.deg2rad(azimuth)
    xr = np.cos(a) * pts[:, 0] + np.sin(a) * pts[:, 2]
    col = np.clip(np.round((xr * res + res - 1) / 2).astype(int), 0, res - 1)
    row = np.clip(np.round((-pts[:, 1] * res + res - 1) / 2).astype(int), 0, res - 1)
    sil = np.zeros((res, res), bool)
    sil[row, col] = True
    return sil


@pytest.mark.parametrize("family", ["head", "chair"])
def test_image_and_volume_agree(family):
    rng = np.random.default_rng(11)
    for _ in range(3):
        spec = sample_shape(family, rng)
        vol = voxelize(spec, 32)
        for ai, az in enumerate(AZIMUTHS_DEG):
            img = render(spec, SceneFactors(ai, 1), 32).max(axis=0) > 0
            sil = _projected_silhouette(vol, az)
            assert (img & sil).sum() / (img | sil).sum() > 0.8


def test_factor_grid_and_round_trip(tmp_path):
    ds = make_dataset(2, "head", 32, seed=4, path=tmp_path / "d")
    assert len(ds) == 30
    cells = {(s, a, l) for s, a, l in zip(ds.shape_ids, ds.azimuth, ds.lighting)}
    assert len(cells) == 30
    back = read_dataset(tmp_path / "d")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.volumes, ds.volumes)
    assert np.array_equal(back.shape_ids, ds.shape_ids) and np.array_equal(back.lighting, ds.lighting)
    data, meta = dataset_paths(tmp_path / "d")
    assert data.read_bytes()[:4] == b"VXDS"
    assert meta.read_text().splitlines()[1] == "1,0,0,1"
    make_dataset(2, "head", 32, seed=4, path=tmp_path / "e")
    assert data.read_bytes() == dataset_paths(tmp_path / "e")[0].read_bytes()


def test_video_dataset(tmp_path):
    ds = make_dataset(2, "head", 32, video=True, seed=0, path=tmp_path / "v")
    assert len(ds) == 2 and ds.images.shape == (2, 15, 32, 32) and ds.frames == 5
    assert np.all(ds.azimuth == -1)
    spec = ds.specs[0]
    assert np.array_equal(ds.images[0], render_video(spec, int(ds.lighting[0]), 32).astype(np.float32))
    # profile frames differ from the frontal frame
    assert not np.allclose(ds.frame(0)[0], ds.frame(2)[0])
    assert read_dataset(tmp_path / "v").frames == 5


def test_chair_dataset_resolution():
    ds = make_dataset(1, "chair", 30, seed=0)
    assert ds.volumes.shape == (15, 30, 30, 30) and ds.images.shape == (15, 3, 32, 32)


def test_corrupt_dataset_rejected(tmp_path):
    make_dataset(1, "head", 32, seed=0, path=tmp_path / "d")
    data, _ = dataset_paths(tmp_path / "d")
    blob = data.read_bytes()
    data.write_bytes(blob[:-100])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "d")
    data.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "d")


@pytest.mark.parametrize("varied", ["shape", "pose", "lighting"])
def test_factor_batches_isolate_one_factor(varied):
    ds = make_dataset(6, "head", 32, seed=0)
    cols = {"shape": ds.shape_ids, "pose": ds.azimuth, "lighting": ds.lighting}
    size = 3
    batches = factor_batches(ds, varied, 50, size, seed=1)
    assert len(batches) == 50
    for b in batches:
        for f, col in cols.items():
            vals = col[b]
            if f == varied:
                assert len(set(vals)) == size
            else:
                assert len(set(vals)) == 1
    again = factor_batches(ds, varied, 50, size, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(batches, again))


def test_factor_batches_size_five_for_pose():
    ds = make_dataset(3, "head", 32, seed=0)
    b = factor_batches(ds, "pose", 100, 5, seed=0)
    assert all(len(set(ds.azimuth[x])) == 5 for x in b)
    with pytest.raises(ValueError):
        factor_batches(ds, "lighting", 1, 5)

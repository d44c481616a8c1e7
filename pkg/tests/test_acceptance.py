"""End-to-end acceptance checks, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
The model-training checks share datasets and models through
module-scoped fixtures.
"""

import itertools
import time

import numpy as np
import pytest
from scipy import stats

from conftest import conv_loop, gradcheck
from voxelrec import cli
from voxelrec import datagen as dg
from voxelrec import evaluation as ev
from voxelrec.layers import (BatchNormState, RReluConfig, batchnorm, conv2d, conv3d, linear, maxpool, prelu, rrelu,
                             upsample_nearest)
from voxelrec.mesh import marching_cubes
from voxelrec.model import Model, NetworkConfig
from voxelrec.stn import IDENTITY_THETA, affine_grid, bilinear_sample
from voxelrec.tensor import Tensor, backward
from voxelrec.train import TrainConfig, image_loss, mse_loss, train

FIXTURES = 20
SMALL = dict(encoder_channels=(4, 6, 8), stn_channels=4, volume_channels=(8, 6, 4, 4), image_channels=(8, 6, 4, 4, 4))


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ---------------------------------------------------------------------------
# gradients and oracles


def _bn(x, g, b):
    s = BatchNormState(gamma=g, beta=b, running_mean=np.zeros(g.shape), running_var=np.ones(g.shape))
    return batchnorm(x, s)


def _grad_cases(rng):
    """Yield (name, op, arrays) with FIXTURES random cases per op."""
    for _ in range(FIXTURES):
        s, p = int(rng.integers(4, 7)), int(rng.integers(0, 2))
        yield "conv2d", (lambda x, w, b, p=p: conv2d(x, w, b, padding=p)), [
            rng.normal(size=(2, 2, s, s)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        yield "conv3d", (lambda x, w, b, p=p: conv3d(x, w, b, padding=p)), [
            rng.normal(size=(1, 2, 4, 4, 4)), rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)]
        rank = int(rng.integers(2, 4))
        yield "maxpool", (lambda x: maxpool(x, 2)[0]), [rng.normal(size=(2, 2) + (4,) * rank)]
        yield "upsample", (lambda x: upsample_nearest(x, 2)), [rng.normal(size=(2, 2) + (3,) * rank)]
        yield "batchnorm", _bn, [rng.normal(size=(4, 3, 3, 3)), rng.normal(size=3), rng.normal(size=3)]
        cfg = RReluConfig(training=False)
        yield "rrelu", (lambda x: rrelu(x, cfg)), [rng.normal(size=(3, 5))]
        yield "prelu", prelu, [rng.normal(size=(3, 5)), rng.uniform(0.05, 0.5, size=1)]
        yield "linear", linear, [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)]
        hw = tuple(int(v) for v in rng.integers(2, 5, size=2))
        yield "affine_grid", (lambda t, hw=hw: affine_grid(t, *hw)), [rng.normal(size=(2, 6))]
        th = np.tile(IDENTITY_THETA, (2, 1)) + 0.2 * rng.normal(size=(2, 6))
        yield "bilinear_sample", (lambda x, t: bilinear_sample(x, affine_grid(t, 4, 4))), [
            rng.normal(size=(2, 2, 5, 5)), th]
        target = rng.normal(size=(3, 4))
        yield "mse", (lambda x, t=target: mse_loss(x, t)), [rng.normal(size=(3, 4))]


@criterion(1, "gradient integrity")
def test_gradient_integrity():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, op, arrays in _grad_cases(rng):
        err = gradcheck(op, arrays, rng)
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    assert min(counts.values()) >= FIXTURES and len(counts) == 11
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    assert not bad, f"relative gradient error too large: {bad}"
    assert elapsed < 120, f"took {elapsed:.0f}s"


def _maxpool_loop(x, k):
    sp = [s // k for s in x.shape[2:]]
    out = np.zeros(x.shape[:2] + tuple(sp), dtype=x.dtype)
    for i, j in itertools.product(range(x.shape[0]), range(x.shape[1])):
        for pos in itertools.product(*[range(s) for s in sp]):
            out[(i, j, *pos)] = x[(i, j, *[slice(q * k, q * k + k) for q in pos])].max()
    return out


@criterion(2, "oracle equivalence")
def test_oracle_equivalence():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    for _ in range(FIXTURES):
        for rank in (2, 3):
            s = int(rng.integers(4, 8))
            k, p = int(rng.choice([1, 3, 5])), int(rng.integers(0, 3))
            if s + 2 * p < k:
                p = k
            x = rng.normal(size=(2, 2) + (s,) * rank).astype(np.float32)
            w = rng.normal(size=(3, 2) + (k,) * rank).astype(np.float32)
            b = rng.normal(size=3).astype(np.float32)
            conv = conv2d if rank == 2 else conv3d
            got = conv(Tensor(x), Tensor(w), Tensor(b), padding=p).data
            ref = conv_loop(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), padding=p)
            assert np.abs(got - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())
            xi = rng.integers(-50, 50, size=(2, 3) + (4,) * rank).astype(np.float32)
            assert np.array_equal(maxpool(Tensor(xi), 2)[0].data, _maxpool_loop(xi, 2))
        train_imgs = rng.integers(0, 4, size=(30, 12)).astype(np.float32)
        q = rng.integers(0, 4, size=12).astype(np.float32)
        d = [((t - q) ** 2).sum() for t in train_imgs]
        assert ev.nearest_neighbour(q, train_imgs) == int(np.argmin(d))
        a = rng.uniform(size=(3, 5, 5, 5))
        t = (rng.uniform(size=(3, 5, 5, 5)) > 0.5).astype(np.uint8)
        loop = sum(abs(float(a.flat[i]) - float(t.flat[i])) for i in range(a.size)) / a.size
        assert abs(ev.voxel_error(a, t) - loop) <= 1e-5
    assert time.perf_counter() - start < 120


@criterion(3, "spatial transformer contract")
def test_stn_contract():
    rng = np.random.default_rng(303)
    for _ in range(FIXTURES):
        n, h, w = 2, int(rng.integers(3, 9)), int(rng.integers(3, 9))
        x = rng.normal(size=(n, 3, h, w)).astype(np.float32)
        grid = affine_grid(Tensor(np.tile(IDENTITY_THETA, (n, 1)).astype(np.float32)), h, w)
        assert np.abs(bilinear_sample(Tensor(x), grid).data - x).max() <= 1e-6
    ident = affine_grid(Tensor(np.array([[1.0, 0, 0, 0, 1, 0]])), 3, 3).data[0]
    assert ident[0, :, 0].tolist() == [-1.0, 0.0, 1.0]
    assert ident[:, 0, 1].tolist() == [-1.0, 0.0, 1.0]
    base = affine_grid(Tensor(np.array([[1.0, 0, 0, 0, 1, 0]])), 4, 5).data
    moved = affine_grid(Tensor(np.array([[1.0, 0, 0.5, 0, 1, 0]])), 4, 5).data
    assert np.array_equal(moved[..., 0], base[..., 0] + 0.5)
    assert np.array_equal(moved[..., 1], base[..., 1])
    zoom = affine_grid(Tensor(np.array([[0.5, 0, 0, 0, 0.5, 0]])), 5, 5).data
    assert zoom.min() == -0.5 and zoom.max() == 0.5
    mid = bilinear_sample(Tensor(np.array([[[[0.0, 2.0]]]])), Tensor(np.zeros((1, 1, 1, 2))))
    assert mid.data.item() == 1.0


@criterion(4, "gradient suppression")
def test_gradient_suppression():
    start = time.perf_counter()
    for k in range(10):
        rng = np.random.default_rng(400 + k)
        cfg = NetworkConfig.faces(seed=k, **SMALL)
        m = Model(cfg)
        images = rng.uniform(size=(int(rng.integers(2, 5)), 3, 32, 32)).astype(np.float32)
        loss, code = image_loss(m, images, suppress=True)
        backward(loss)
        assert code.grad is not None
        assert np.abs(code.grad[:, :cfg.shape_len]).max() == 0.0
        assert np.abs(code.grad[:, cfg.shape_len:]).max() > 0.0
        assert np.abs(m.fc_code.weight.grad[:, :cfg.shape_len]).max() == 0.0
        assert np.abs(m.fc_code.weight.grad[:, cfg.shape_len:]).max() > 0.0
    assert time.perf_counter() - start < 60


# ---------------------------------------------------------------------------
# desk-scale training checks
#
# Face data: 134 shapes x 15 views = 2,010 training pairs; test shapes
# come from a separate seed and id range. Benchmarks binarise
# predictions at 0.5 so both conditions compare occupancy grids.

SCORE_THRESHOLD = 0.5
TWIN_SEEDS = (0, 1, 2)  # first seed plus the two allowed retries


@pytest.fixture(scope="module")
def faces():
    train_set = dg.make_dataset(134, "head", 32, seed=1)
    test_set = dg.make_dataset(14, "head", 32, seed=2, first_shape_id=10000)
    return train_set, test_set


_twins: dict = {}


def twin_model(train_set, seed):
    if seed not in _twins:
        m = Model(NetworkConfig.faces(seed=seed, use_fc3000=True))
        train(m, train_set, TrainConfig(mode="twin", seed=seed))
        _twins[seed] = m
    return _twins[seed]


@pytest.mark.slow
@criterion(5, "prediction beats nearest neighbour")
def test_nn_benchmark_direction(faces):
    train_set, test_set = faces
    start = time.perf_counter()
    assert len(train_set) >= 2000
    m = Model(NetworkConfig.faces(seed=0))
    train(m, train_set, TrainConfig(mode="volume_only", seed=0))
    r = ev.nn_benchmark(m, train_set, test_set.subset(np.arange(200)), SCORE_THRESHOLD)
    print("nn benchmark:", r.ttest.summary())
    assert time.perf_counter() - start < 30 * 60
    better = bool(r.ttest.mean_a < r.ttest.mean_b and r.ttest.p < 0.01)
    assert better, r.ttest.summary()


@pytest.mark.slow
@criterion(6, "disentanglement bifurcation")
def test_disentanglement(faces):
    train_set, test_set = faces
    batches = {f: dg.factor_batches(test_set, f, 100, 3, seed=k) for k, f in enumerate(dg.FACTORS)}
    outcomes = []
    for seed in TWIN_SEEDS:
        rel = ev.invariance_profile(twin_model(train_set, seed), test_set, batches).relative()
        zs, zt = rel["Z_shape"], rel["Z_transform"]
        ok = max(zs, key=zs.get) == "shape" and zt["pose"] > zt["shape"]
        outcomes.append((seed, ok, zs, zt))
        print(f"twin seed {seed}: Z_shape {zs} Z_transform {zt}")
        if ok:
            break
    passed = bool(outcomes[-1][1])
    assert passed, outcomes


@pytest.mark.slow
@criterion(7, "shape code ranks same face higher")
def test_recognition_rank(faces):
    train_set, test_set = faces
    m = twin_model(train_set, TWIN_SEEDS[0])
    shape = ev.recognition_rank(ev.shape_code_extractor(m), test_set, "pose", 100, 150, seed=0)
    full = ev.recognition_rank(ev.full_code_extractor(m), test_set, "pose", 100, 150, seed=0)
    print(f"mean rank under pose change: shape code {shape.mean_rank:.2f}, full code {full.mean_rank:.2f}")
    assert bool(shape.mean_rank <= full.mean_rank), (shape.mean_rank, full.mean_rank)


def single_frames(videos, seed):
    """One random frame per video as a still-image dataset."""
    k = np.random.default_rng(seed).integers(5, size=len(videos))
    frames = videos.images.reshape(len(videos), 5, 3, *videos.images.shape[-2:])[np.arange(len(videos)), k]
    return dg.Dataset(frames, videos.volumes, videos.shape_ids, k, videos.lighting)


@pytest.mark.slow
@criterion(8, "video beats best single frame")
def test_video_direction():
    train_videos = dg.make_dataset(2000, "head", 32, video=True, seed=21)
    test_videos = dg.make_dataset(100, "head", 32, video=True, seed=22, first_shape_id=20000)
    video_model = Model(NetworkConfig.video(seed=0))
    train(video_model, train_videos, TrainConfig(mode="volume_only", seed=0))
    image_model = Model(NetworkConfig.faces(seed=0, use_fc3000=True))
    train(image_model, single_frames(train_videos, 3), TrainConfig(mode="volume_only", seed=0))
    r = ev.video_benchmark(video_model, image_model, test_videos, SCORE_THRESHOLD)
    print("video benchmark:", r.ttest.summary())
    assert bool(r.ttest.mean_a <= r.ttest.mean_b), r.ttest.summary()


# ---------------------------------------------------------------------------
# statistics, meshes, reproducibility


@criterion(9, "paired t-test oracle")
def test_t_test_oracle():
    r = ev.paired_t_test([1.0, 2, 3, 4, 5], [0.0, 0, 0, 0, 0])
    assert r.df == 4 and abs(r.t - 4.242640687119285) < 1e-6
    rng = np.random.default_rng(909)
    for _ in range(FIXTURES):
        n = int(rng.integers(3, 300))
        a = rng.normal(size=n)
        b = a + rng.normal(loc=rng.normal(scale=0.3), size=n)
        got = ev.paired_t_test(a, b)
        want = stats.ttest_rel(a, b)
        assert got.df == n - 1
        assert abs(got.t - want.statistic) < 1e-6
        assert abs(got.p - want.pvalue) < 1e-6


@criterion(10, "mesh soundness")
def test_mesh_soundness():
    r = 10.0
    c = np.arange(32) - 15.5
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    sphere = (x * x + y * y + z * z <= r * r).astype(np.uint8)
    m = marching_cubes(sphere, 0.5)
    assert m.is_watertight()
    assert m.euler_characteristic() == 2
    assert abs(m.area() / (4 * np.pi * r * r) - 1) < 0.10


@criterion(11, "bit-identical training")
def test_train_reproducible(tmp_path):
    data = tmp_path / "faces"
    assert cli.main(["gen-data", "--family", "head", "--shapes", "2", "--out", str(data), "--seed", "5"]) == 0
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--data", str(data), "--out", str(out), "--seed", "7"]) == 0
        blobs.append((out / "weights.vxrc").read_bytes())
    assert blobs[0] == blobs[1]

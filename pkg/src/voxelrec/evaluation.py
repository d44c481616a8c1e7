"""Measurement protocols: voxel error, nearest-neighbour benchmark, paired
t-test, invariance profiling, recognition rank, video comparison and code
swapping."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datagen import FACTORS, Dataset
from .model import Model
from .tensor import Tensor, no_grad

FACE_THRESHOLD = 0.01
CHAIR_THRESHOLD = 0.2


def binarize(v, threshold: float = FACE_THRESHOLD) -> np.ndarray:
    return (np.asarray(v) >= threshold).astype(np.uint8)


def voxel_error(pred, truth) -> float:
    """Mean absolute per-voxel occupancy difference."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"voxel_error: shapes {p.shape} and {t.shape} differ")
    return float(np.abs(p - t).mean())


def nearest_neighbour(query, train_images) -> int:
    """Index of the training image at the smallest Euclidean pixel distance.

    Ties resolve to the lowest index.
    """
    train = np.asarray(train_images, dtype=np.float64)
    if len(train) == 0:
        raise ValueError("nearest_neighbour: empty training set")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    d = ((train.reshape(len(train), -1) - q) ** 2).sum(axis=1)
    return int(np.argmin(d))


# ---------------------------------------------------------------------------
# Student t


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 500) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc_regularized(df / 2.0, 0.5, df / (df + t * t)))


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_two_sided_p(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    mean_a: float
    sd_a: float
    mean_b: float
    sd_b: float
    n: int

    def summary(self) -> str:
        return (f"t({self.df})={self.t:.4f} p={self.p:.4g} "
                f"M_a={self.mean_a:.5f} (SD {self.sd_a:.5f}) M_b={self.mean_b:.5f} (SD {self.sd_b:.5f})")


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired-samples t-test on ``a - b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired_t_test needs equal-length 1-D samples, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("paired_t_test needs at least 2 pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ValueError("paired differences have zero variance; t is undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    df = n - 1
    return TTestResult(t, df, student_t_two_sided_p(t, df), float(a.mean()), float(np.std(a, ddof=1)),
                       float(b.mean()), float(np.std(b, ddof=1)), n)


# ---------------------------------------------------------------------------
# model helpers


def _batched(model: Model, images: np.ndarray, fn, batch_size: int = 20) -> np.ndarray:
    model.set_training(False)
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(fn(Tensor(np.asarray(images[i:i + batch_size], dtype=np.float32))))
    return np.concatenate(out)


def predict_volumes(model: Model, images, batch_size: int = 20) -> np.ndarray:
    """Continuous volume predictions (inference mode)."""
    return _batched(model, images, lambda x: model.decode_volume(model.split_code(model.encode(x))[0]).data,
                    batch_size)


def encode_codes(model: Model, images, batch_size: int = 20) -> np.ndarray:
    return _batched(model, images, lambda x: model.encode(x).data, batch_size)


def shape_code_extractor(model: Model) -> Callable:
    k = model.config.shape_len
    return lambda images: encode_codes(model, images)[:, :k]


def full_code_extractor(model: Model) -> Callable:
    return lambda images: encode_codes(model, images)


# ---------------------------------------------------------------------------
# nearest-neighbour benchmark


@dataclass
class BenchmarkResult:
    ttest: TTestResult
    errors_a: np.ndarray
    errors_b: np.ndarray
    labels: tuple[str, str] = ("prediction", "nearest_neighbour")
    extra: dict = field(default_factory=dict)

    def rows(self):
        cols = {k: v for k, v in self.extra.items() if np.ndim(v) == 1}
        for i in range(len(self.errors_a)):
            row = {"item": i, f"{self.labels[0]}_error": float(self.errors_a[i]),
                   f"{self.labels[1]}_error": float(self.errors_b[i])}
            row.update({k: v[i].item() if hasattr(v[i], "item") else v[i] for k, v in cols.items()})
            yield row


def prediction_errors(pred: np.ndarray, truth: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Per-item voxel error; continuous predictions are clipped to [0, 1]
    unless ``threshold`` asks for binarization first."""
    p = binarize(pred, threshold) if threshold is not None else np.clip(pred, 0.0, 1.0)
    return np.array([voxel_error(a, b) for a, b in zip(p, truth)])


def nn_benchmark(model: Model, train_set: Dataset, test_set: Dataset, threshold: float | None = None) -> BenchmarkResult:
    preds = predict_volumes(model, test_set.images)
    pred_err = prediction_errors(preds, test_set.volumes, threshold)
    train_flat = train_set.images.reshape(len(train_set), -1).astype(np.float64)
    nn_idx = np.array([nearest_neighbour(q, train_flat) for q in test_set.images.reshape(len(test_set), -1)])
    nn_err = np.array([voxel_error(train_set.volumes[j], t) for j, t in zip(nn_idx, test_set.volumes)])
    return BenchmarkResult(paired_t_test(pred_err, nn_err), pred_err, nn_err,
                           extra={"nearest_index": nn_idx})


# ---------------------------------------------------------------------------
# invariance profile


@dataclass
class InvarianceProfile:
    layers: list[str]
    raw: dict[str, dict[str, float]]  # layer -> factor -> mean SD
    spread: dict[str, dict[str, float]]  # layer -> factor -> SD over batches

    def relative(self) -> dict[str, dict[str, float]]:
        out = {}
        for layer in self.layers:
            total = sum(self.raw[layer].values())
            out[layer] = {f: (v / total if total > 0 else 0.0) for f, v in self.raw[layer].items()}
        return out

    def share(self, layer: str, factor: str) -> float:
        return self.relative()[layer][factor]


def _trace_units(model: Model, images: np.ndarray, include_image: bool) -> dict[str, np.ndarray]:
    model.set_training(False)
    tr = model.forward_trace(np.asarray(images, dtype=np.float32), include_image=include_image)
    k = model.config.shape_len
    out = {}
    for name, act in tr.layers.items():
        flat = np.asarray(act, dtype=np.float64).reshape(len(images), -1)
        if name == "Z":
            out["Z_shape"] = flat[:, :k]
            out["Z_transform"] = flat[:, k:]
        else:
            out[name] = flat
    return out


def batch_activation_sd(acts: np.ndarray) -> float:
    """SD across the batch per unit, averaged over units."""
    if len(acts) < 2:
        return 0.0
    return float(np.std(acts, axis=0, ddof=1).mean())


def invariance_profile(model: Model, dataset: Dataset, factor_batches: dict[str, list[np.ndarray]],
                       include_image: bool = False) -> InvarianceProfile:
    """Mean activation SD per layer for batches isolating each factor."""
    if not factor_batches or any(len(b) == 0 for b in factor_batches.values()):
        raise ValueError("invariance_profile needs a non-empty batch set per factor")
    raw: dict[str, dict[str, float]] = {}
    spread: dict[str, dict[str, float]] = {}
    layers: list[str] = []
    for factor in FACTORS:
        if factor not in factor_batches:
            continue
        per_layer: dict[str, list[float]] = {}
        for idx in factor_batches[factor]:
            units = _trace_units(model, dataset.images[idx], include_image)
            for name, acts in units.items():
                per_layer.setdefault(name, []).append(batch_activation_sd(acts))
        for name, vals in per_layer.items():
            if name not in layers:
                layers.append(name)
            raw.setdefault(name, {})[factor] = float(np.mean(vals))
            spread.setdefault(name, {})[factor] = float(np.std(vals))
    return InvarianceProfile(layers, raw, spread)


# ---------------------------------------------------------------------------
# recognition rank


@dataclass
class RankResult:
    ranks: np.ndarray
    gallery_size: int

    @property
    def mean_rank(self) -> float:
        return float(np.mean(self.ranks))


def rank_of_target(probe_code: np.ndarray, gallery_codes: np.ndarray, target: int) -> int:
    """1-based rank of ``gallery_codes[target]`` by distance to the probe.

    Gallery items at exactly the target's distance do not push it down.
    """
    d = np.sqrt(((np.asarray(gallery_codes, dtype=np.float64) - probe_code) ** 2).sum(axis=1))
    return int((d < d[target]).sum()) + 1


def recognition_rank(code_extractor: Callable, dataset: Dataset, factor: str = "pose", trials: int = 100,
                     gallery_size: int = 150, seed: int = 0, codes: np.ndarray | None = None) -> RankResult:
    """Rank of the same shape seen under a different ``factor`` value.

    Each trial picks a probe, one target sharing the probe's shape but
    differing in ``factor`` (other factor fixed), and ``gallery_size - 1``
    distractors drawn uniformly from images of other shapes.
    """
    if factor not in ("pose", "lighting"):
        raise ValueError("factor must be 'pose' or 'lighting'")
    codes = code_extractor(dataset.images) if codes is None else codes
    rng = np.random.default_rng(seed)
    col, other = (dataset.azimuth, dataset.lighting) if factor == "pose" else (dataset.lighting, dataset.azimuth)
    ranks = []
    n = len(dataset)
    for _ in range(trials):
        for _attempt in range(1000):
            probe = int(rng.integers(n))
            cand = np.nonzero((dataset.shape_ids == dataset.shape_ids[probe]) & (col != col[probe])
                              & (other == other[probe]))[0]
            if len(cand):
                break
        else:
            raise ValueError(f"no probe has a same-shape target with a different {factor}")
        target = int(cand[rng.integers(len(cand))])
        pool = np.nonzero(dataset.shape_ids != dataset.shape_ids[probe])[0]
        if len(pool) < gallery_size - 1:
            raise ValueError(f"only {len(pool)} distractors available for a gallery of {gallery_size}")
        distractors = rng.choice(pool, size=gallery_size - 1, replace=False)
        gallery = np.concatenate([[target], distractors])
        ranks.append(rank_of_target(codes[probe], codes[gallery], 0))
    return RankResult(np.array(ranks), gallery_size)


# ---------------------------------------------------------------------------
# video vs single image


def video_benchmark(video_model: Model, image_model: Model, test_videos: Dataset,
                    threshold: float | None = None) -> BenchmarkResult:
    """Video-model error against the best of the five single-frame errors."""
    if test_videos.frames != 5:
        raise ValueError("video_benchmark needs a 5-frame video dataset")
    vid_err = prediction_errors(predict_volumes(video_model, test_videos.images), test_videos.volumes, threshold)
    frame_err = np.stack([
        prediction_errors(predict_volumes(image_model, test_videos.frame(k)), test_videos.volumes, threshold)
        for k in range(5)
    ], axis=1)
    best = frame_err.min(axis=1)
    return BenchmarkResult(paired_t_test(vid_err, best), vid_err, best, ("video", "best_single_frame"),
                           extra={"best_frame": frame_err.argmin(axis=1)})


# ---------------------------------------------------------------------------
# code swapping


def interpolate_codes(model: Model, image_a, image_b) -> np.ndarray:
    """Decode the shape code of ``image_a`` with the transformation code of ``image_b``."""
    a = np.asarray(image_a, dtype=np.float32)
    b = np.asarray(image_b, dtype=np.float32)
    single = a.ndim == 3
    if single:
        a, b = a[None], b[None]
    model.set_training(False)
    with no_grad():
        za, _ = model.split_code(model.encode(Tensor(a)))
        _, zb = model.split_code(model.encode(Tensor(b)))
        out = model.decode_image(za, zb).data
    return out[0] if single else out


def reconstruct(model: Model, images) -> np.ndarray:
    return interpolate_codes(model, images, images)


def silhouette(image: np.ndarray, level: float = 0.05) -> np.ndarray:
    """Foreground mask of a C x H x W image."""
    return np.asarray(image).max(axis=0) > level


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


@dataclass
class SwapStudy:
    pairs: np.ndarray  # P x 3: index a, index b, index of a's shape under b's factors
    iou_a: np.ndarray
    iou_b: np.ndarray

    def rows(self):
        for (a, b, ref), ia, ib in zip(self.pairs, self.iou_a, self.iou_b):
            yield {"image_a": int(a), "image_b": int(b), "reference": int(ref),
                   "iou_shape_a": float(ia), "iou_image_b": float(ib)}


def swap_study(model: Model, dataset: Dataset, n_pairs: int = 20, seed: int = 0) -> SwapStudy:
    """Swap codes between random pairs of different shapes.

    The swapped output is compared by silhouette IoU with the rendering of
    a's shape under b's pose and lighting and with image b itself.
    """
    if dataset.frames != 1:
        raise ValueError("swap_study needs a single-image dataset")
    rng = np.random.default_rng(seed)
    lookup = {(int(s), int(p), int(l)): i for i, (s, p, l) in
              enumerate(zip(dataset.shape_ids, dataset.azimuth, dataset.lighting))}
    pairs = []
    for _ in range(100 * n_pairs):
        if len(pairs) == n_pairs:
            break
        a, b = (int(x) for x in rng.integers(len(dataset), size=2))
        ref = lookup.get((int(dataset.shape_ids[a]), int(dataset.azimuth[b]), int(dataset.lighting[b])))
        if dataset.shape_ids[a] != dataset.shape_ids[b] and ref is not None:
            pairs.append((a, b, ref))
    if not pairs:
        raise ValueError("no usable image pairs for the swap study")
    pairs = np.array(pairs)
    out = interpolate_codes(model, dataset.images[pairs[:, 0]], dataset.images[pairs[:, 1]])
    ia = np.array([iou(silhouette(o), silhouette(dataset.images[r])) for o, r in zip(out, pairs[:, 2])])
    ib = np.array([iou(silhouette(o), silhouette(dataset.images[b])) for o, b in zip(out, pairs[:, 1])])
    return SwapStudy(pairs, ia, ib)


# ---------------------------------------------------------------------------
# reports


def write_report(result, out_dir, name: str) -> dict:
    """Write ``<name>.csv`` and ``<name>.json`` and return the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(result, BenchmarkResult):
        rows = list(result.rows())
        summary = {"suite": name, **asdict(result.ttest), "labels": list(result.labels)}
    elif isinstance(result, RankResult):
        rows = [{"trial": i, "rank": int(r)} for i, r in enumerate(result.ranks)]
        summary = {"suite": name, "mean_rank": result.mean_rank, "trials": len(result.ranks),
                   "gallery_size": result.gallery_size}
    elif isinstance(result, InvarianceProfile):
        rel = result.relative()
        rows = [{"layer": layer, "factor": f, "mean_sd": result.raw[layer][f], "relative_sd": rel[layer][f],
                 "sd_over_batches": result.spread[layer][f]} for layer in result.layers for f in result.raw[layer]]
        summary = {"suite": name, "relative": rel}
    elif isinstance(result, SwapStudy):
        rows = list(result.rows())
        summary = {"suite": name, "pairs": len(rows), "mean_iou_shape_a": float(result.iou_a.mean()),
                   "mean_iou_image_b": float(result.iou_b.mean())}
    else:
        rows, summary = result
    if rows:
        with open(out_dir / f"{name}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    (out_dir / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary

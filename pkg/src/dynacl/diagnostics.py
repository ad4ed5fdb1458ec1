"""Input-space measurements of what augmentation does to a training set:
the train/test gap (RBF-kernel MMD) and the minimal cross-class L-inf
distance between augmented samples."""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .augment import AugmentationPolicy, ImageBatch, apply, augment_batch, sample_params, sample_rng
from .errors import ConfigError, ContractError

SEPARABILITY_THRESHOLD = 16 / 255


@dataclass(frozen=True)
class MmdConfig:
    bandwidths: tuple[float, ...] = (10.0, 15.0, 20.0, 50.0)
    estimator: str = "biased"
    max_samples: Optional[int] = None

    def __post_init__(self):
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ConfigError("bandwidths must be positive")
        if self.estimator not in ("biased", "unbiased"):
            raise ConfigError(f"estimator must be 'biased' or 'unbiased', got {self.estimator!r}")


def _flat(x):
    x = np.asarray(x)
    if x.ndim == 0 or len(x) == 0:
        raise ContractError("both sample sets must be non-empty")
    return x.reshape(len(x), -1).astype(np.float64)


def mmd_per_bandwidth(a, b, cfg: MmdConfig = MmdConfig()) -> dict[float, float]:
    """Squared MMD for each bandwidth with ``k(x, y) = exp(-|x - y|^2 / (2 sigma^2))``."""
    a, b = _flat(a), _flat(b)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if cfg.max_samples is not None:
        a, b = a[:cfg.max_samples], b[:cfg.max_samples]
    daa = kernels.sq_dists(a, a)
    dbb = kernels.sq_dists(b, b)
    dab = kernels.sq_dists(a, b)
    m, n = len(a), len(b)
    out = {}
    for bw in cfg.bandwidths:
        g = -1.0 / (2.0 * bw * bw)
        kaa, kbb, kab = np.exp(daa * g), np.exp(dbb * g), np.exp(dab * g)
        if cfg.estimator == "unbiased":
            if m < 2 or n < 2:
                raise ContractError("the unbiased estimator needs at least two samples per set")
            xx = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
            yy = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        else:
            xx, yy = kaa.mean(), kbb.mean()
        out[float(bw)] = float(xx + yy - 2.0 * kab.mean())
    return out


def mmd_rbf(a, b, cfg: MmdConfig = MmdConfig()) -> float:
    """Mean over bandwidths of the squared MMD, clamped at zero."""
    vals = mmd_per_bandwidth(a, b, cfg)
    return max(0.0, float(np.mean(list(vals.values()))))


@dataclass
class ClasswiseResult:
    pair_minima: np.ndarray
    global_min: float
    threshold: float
    samples: int = 0
    classes: list = field(default_factory=list)

    @property
    def separable(self) -> bool:
        return self.global_min > self.threshold


def augmented_pool(batch: ImageBatch, policy: AugmentationPolicy, augs_per_sample: int, seed: int):
    """``augs_per_sample`` independent views of every image, flattened; labels repeated."""
    n = len(batch)
    c = batch.image_shape[0]
    h, w = policy.output_size
    pool = np.empty((n * augs_per_sample, c * h * w), dtype=np.float32)
    for i in range(n):
        g = sample_rng(seed, 0, i)
        for a in range(augs_per_sample):
            pool[i * augs_per_sample + a] = apply(batch.data[i], sample_params(policy, g, batch.image_shape)).ravel()
    return pool, np.repeat(batch.labels, augs_per_sample)


def cap_per_class(batch: ImageBatch, sample_cap: Optional[int], seed: int = 0) -> ImageBatch:
    if sample_cap is None:
        return batch
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == c)
        keep.append(np.sort(rng.permutation(idx)[:sample_cap]))
    return batch.subset(np.sort(np.concatenate(keep)))


def min_linf_between_classes(vectors, labels, image_shape=None) -> np.ndarray:
    """k x k matrix of minimal cross-class L-inf distances (diagonal is inf)."""
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    classes, dense = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ContractError("need at least two classes")
    if image_shape is not None:
        pooled = kernels.pooled_summary(x, *image_shape)
    else:
        pooled = x.mean(1, keepdims=True).astype(np.float32)
    means = x.mean(1, dtype=np.float64)
    return kernels.min_cross_class_linf(x, pooled, means, dense.astype(np.int64), len(classes))


def min_classwise_distance(batch: ImageBatch, policy: AugmentationPolicy, augs_per_sample: int = 50,
                           sample_cap: Optional[int] = 200, seed: int = 0,
                           threshold: float = SEPARABILITY_THRESHOLD) -> ClasswiseResult:
    """Minimal L-inf distance between augmented samples of different classes."""
    if batch.labels is None:
        raise ContractError("classwise distance needs labels")
    if len(np.unique(batch.labels)) < 2:
        raise ContractError("classwise distance needs at least two classes")
    batch = cap_per_class(batch, sample_cap, seed)
    pool, labels = augmented_pool(batch, policy, augs_per_sample, seed)
    shape = (batch.image_shape[0], *policy.output_size)
    pairs = min_linf_between_classes(pool, labels, shape)
    return ClasswiseResult(pairs, float(pairs[np.isfinite(pairs)].min()), threshold, len(pool),
                           [int(c) for c in np.unique(labels)])


@dataclass
class SweepRow:
    strength: float
    seed: int
    mmd_mean: Optional[float] = None
    mmd_per_bandwidth: dict = field(default_factory=dict)
    classwise_min: Optional[float] = None
    separable_at_2eps: Optional[bool] = None

    def as_csv_row(self, bandwidths) -> dict:
        row = {"strength": self.strength, "mmd_mean": self.mmd_mean}
        for bw in bandwidths:
            row[f"mmd_bw_{bw:g}"] = self.mmd_per_bandwidth.get(float(bw))
        row.update(classwise_min=self.classwise_min, separable_at_2eps=self.separable_at_2eps, seed=self.seed)
        return row


def sweep(train: ImageBatch, strengths: Sequence[float], which: str = "both", test: Optional[ImageBatch] = None,
          mmd_cfg: MmdConfig = MmdConfig(), augs_per_sample: int = 50, sample_cap: Optional[int] = 200,
          seed: int = 0, threshold: float = SEPARABILITY_THRESHOLD) -> list[SweepRow]:
    """One diagnostic row per strength.

    MMD compares one augmented view of every training image against the raw
    ``test`` images; the classwise column augments each training sample
    ``augs_per_sample`` times.
    """
    if which not in ("mmd", "classwise", "both"):
        raise ConfigError(f"which must be mmd, classwise or both, got {which!r}")
    if any(not 0.0 <= s <= 1.0 for s in strengths):
        raise ConfigError("strengths must lie in [0, 1]")
    if which in ("mmd", "both") and test is None:
        raise ContractError("the MMD column needs a test set")
    rows = []
    out_size = train.image_shape[1:]
    for s in strengths:
        policy = AugmentationPolicy(float(s), output_size=out_size)
        row = SweepRow(strength=float(s), seed=seed)
        if which in ("mmd", "both"):
            aug = augment_batch(train, policy, seed)
            per = mmd_per_bandwidth(aug.data, test.data, mmd_cfg)
            row.mmd_per_bandwidth = per
            row.mmd_mean = max(0.0, float(np.mean(list(per.values()))))
        if which in ("classwise", "both"):
            res = min_classwise_distance(train, policy, augs_per_sample, sample_cap, seed, threshold)
            row.classwise_min = res.global_min
            row.separable_at_2eps = res.separable
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path, bandwidths=MmdConfig().bandwidths) -> Path:
    path = Path(path)
    fields = ["strength", "mmd_mean", *[f"mmd_bw_{b:g}" for b in bandwidths],
              "classwise_min", "separable_at_2eps", "seed"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv_row(bandwidths))
    return path

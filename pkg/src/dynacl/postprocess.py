"""Phase 2: k-means pseudo-labels from clean-branch features, then linear
probing and adversarial full finetuning (LP-AFT) on the adversarial branch."""
import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .attack import AttackSpec
from .augment import ImageBatch
from .encoder import (DualBranchEncoder, EncoderConfig, encoder_config_dict, load_checkpoint,
                      save_checkpoint)
from .errors import ContractError, DataError
from .objectives import trades_loss

log = logging.getLogger(__name__)


class Classifier(nn.Module):
    """Linear head on top of one branch of a dual-BN encoder."""

    def __init__(self, encoder, num_classes: int, branch: str = "adv"):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.feature_dim, num_classes)
        self.head.to(next(encoder.parameters()).dtype)
        self.branch = branch

    def forward(self, x, branch: Optional[str] = None):
        return self.head(self.encoder.features(x, branch or self.branch))


@torch.no_grad()
def extract_features(encoder, images, branch: str = "clean", batch_size: int = 512,
                     projection: bool = False) -> np.ndarray:
    """Eval-mode features, no augmentation. Pre-projection unless ``projection``."""
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size]).to(dtype)
        z = encoder(x, branch) if projection else encoder.features(x, branch)
        out.append(z.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.feature_dim))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class PseudoLabelSet:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list
    iterations: int
    empty_reseeds: int = 0

    def save(self, path, manifest_hash: str) -> Path:
        """Flat int64 array plus a JSON sidecar keyed to the dataset hash."""
        path = Path(path)
        np.save(path, self.assignments.astype(np.int64))
        meta = {"manifest_hash": manifest_hash, "k": int(len(self.centroids)),
                "n": int(len(self.assignments)), "inertia": float(self.inertia)}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path

    @staticmethod
    def load_assignments(path, manifest_hash: str) -> np.ndarray:
        path = Path(path)
        meta_path = path.with_suffix(".json")
        if not path.is_file() or not meta_path.is_file():
            raise DataError(f"pseudo-label file or sidecar missing: {path}")
        meta = json.loads(meta_path.read_text())
        if meta["manifest_hash"] != manifest_hash:
            raise DataError("pseudo labels were computed for a different dataset")
        return np.load(path)


def _kmeans_pp(x, k, rng, trials=None):
    """Greedy k-means++: each step draws ``trials`` D^2-weighted candidates and
    keeps the one that lowers the potential most."""
    n = len(x)
    trials = trials or 2 + int(np.log(k))
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = rng.choice(n, size=trials, p=d2 / total)
        cand_d2 = np.minimum(d2[None, :], kernels.sq_dists(x[cand], x))
        best = int(np.argmin(cand_d2.sum(1)))
        centroids[c] = x[cand[best]]
        d2 = cand_d2[best]
    return centroids


def kmeans(features, k: int, max_iters: int = 100, seed: int = 0, normalize: bool = True,
           init=None, n_init: int = 4) -> PseudoLabelSet:
    """Lloyd iterations from greedy k-means++ seeding (or from explicit ``init`` centroids).

    With k-means++ seeding the best of ``n_init`` restarts (lowest inertia) is
    kept. Inertia is recorded after every assignment step and checked to be
    non-increasing. An empty cluster is re-seeded at the point farthest from
    its current centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ContractError(f"need 1 <= k <= N, got k={k}, N={n}")
    if n_init < 1:
        raise ContractError(f"n_init must be >= 1, got {n_init}")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    if init is not None:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (k, x.shape[1]):
            raise ContractError(f"init must be {k} x {x.shape[1]}, got {centroids.shape}")
        return _lloyd(x, centroids, max_iters)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, _kmeans_pp(x, k, rng), max_iters)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _lloyd(x, centroids, max_iters) -> PseudoLabelSet:
    k = len(centroids)
    labels, d2 = kernels.assign_nearest(x, centroids)
    history = [float(d2.sum())]
    reseeds = 0
    it = 0
    for it in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            far = int(np.argmax(((x - centroids[labels]) ** 2).sum(1)))
            centroids[c] = x[far]
            labels[far] = c
            reseeds += 1
        new_labels, d2 = kernels.assign_nearest(x, centroids)
        inertia = float(d2.sum())
        # tolerance covers summation-order noise only
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased at iteration {it}: {history[-1]} -> {inertia}")
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    # fixpoint: make every centroid the exact mean of its members
    for c in range(k):
        members = labels == c
        if members.any():
            centroids[c] = x[members].mean(0)
    return PseudoLabelSet(labels, centroids, history[-1], history, it, reseeds)


# ---------------------------------------------------------------------------
# LP-AFT
# ---------------------------------------------------------------------------


def train_linear_head(head: nn.Linear, features, labels, epochs: int, lr: float, batch_size: int,
                      seed: int = 0, milestones=(), gamma: float = 0.1, weight_decay: float = 0.0):
    """Plain cross-entropy on precomputed features."""
    dtype = head.weight.dtype
    f = torch.as_tensor(features).to(dtype)
    y = torch.as_tensor(labels).long()
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(milestones), gamma)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(len(f))
        total = 0.0
        for start in range(0, len(f), batch_size):
            idx = torch.as_tensor(perm[start:start + batch_size])
            loss = F.cross_entropy(head(f[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        sched.step()
        losses.append(total / len(f))
    return losses


def lp_aft(encoder, dataset: ImageBatch, pseudo_labels, attack: AttackSpec = AttackSpec.trades(),
           lp_epochs: int = 10, aft_epochs: int = 25, lp_lr: float = 0.1, aft_lr: float = 0.01,
           batch_size: int = 128, beta: float = 6.0, seed: int = 0, lp_batch_size: int = 512):
    """Linear probe on the frozen adversarial branch, then TRADES on the whole
    ``head o encoder`` (adversarial branch for clean and perturbed passes).

    The encoder passed in is copied, never modified.
    """
    labels = np.asarray(getattr(pseudo_labels, "assignments", pseudo_labels), dtype=np.int64)
    if len(labels) != len(dataset):
        raise ContractError("pseudo labels must cover the dataset")
    k = int(len(pseudo_labels.centroids)) if hasattr(pseudo_labels, "centroids") else int(labels.max()) + 1
    torch.manual_seed(seed)
    clf = Classifier(copy.deepcopy(encoder), k, branch="adv")
    history = {"lp_loss": [], "aft_loss": []}

    feats = extract_features(clf.encoder, dataset.data, branch="adv")
    history["lp_loss"] = train_linear_head(clf.head, feats, labels, lp_epochs, lp_lr, lp_batch_size, seed)

    if aft_epochs > 0:
        opt = torch.optim.SGD(clf.parameters(), lr=aft_lr, momentum=0.9, weight_decay=5e-4)
        rng = np.random.default_rng(seed + 1)
        gen = torch.Generator().manual_seed(seed + 1)
        dtype = clf.head.weight.dtype
        y_all = torch.as_tensor(labels)
        for ep in range(aft_epochs):
            clf.train()
            perm = rng.permutation(len(dataset))
            total = 0.0
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                if len(idx) < 2:
                    continue
                x = torch.as_tensor(dataset.data[idx]).to(dtype)
                loss = trades_loss(clf, x, y_all[idx], beta, attack, gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            history["aft_loss"].append(total / len(perm))
            log.info("AFT epoch %d loss %.4f", ep, history["aft_loss"][-1])
    clf.eval()
    clf.history = history
    return clf


def save_classifier(clf: Classifier, path, **meta) -> Path:
    return save_checkpoint(path, {
        "kind": "classifier",
        "encoder_config": encoder_config_dict(clf.encoder.config),
        "dtype": str(clf.head.weight.dtype).replace("torch.", ""),
        "num_classes": int(clf.head.out_features),
        "branch": clf.branch,
        "state": clf.state_dict(),
        "meta": meta,
    })


def load_classifier(path) -> Classifier:
    blob = load_checkpoint(path)
    if blob.get("kind") != "classifier":
        raise ContractError(f"{path} is not a classifier checkpoint (kind={blob.get('kind')!r})")
    cfg = blob["encoder_config"]
    enc = DualBranchEncoder(EncoderConfig(**{**cfg, "blocks": tuple(cfg["blocks"])}))
    enc.to(getattr(torch, blob["dtype"]))
    clf = Classifier(enc, blob["num_classes"], blob["branch"])
    clf.load_state_dict(blob["state"])
    clf.eval()
    return clf

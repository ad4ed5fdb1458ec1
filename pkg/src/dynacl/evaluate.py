"""Downstream protocols (SLF / ALF / AFF), label-fraction subsampling and reporting."""
import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attack import AttackSpec, accuracies, pgd
from .augment import ImageBatch
from .errors import ConfigError, ContractError
from .objectives import trades_loss
from .postprocess import Classifier

PROTOCOLS = ("slf", "alf", "aff")


@dataclass(frozen=True)
class EvalProtocolConfig:
    protocol: str = "slf"
    epochs: int = 25
    lr: float = 0.01
    milestones: tuple[int, ...] = (10, 20)
    gamma: float = 0.1
    batch_size: int = 512
    label_fraction: float = 1.0
    weight_decay: float = 2e-4
    # attack used while training (ALF perturbations / AFF TRADES inner max)
    train_attack: AttackSpec = field(default_factory=AttackSpec.trades)
    # attack used for reporting robust accuracy
    attack: AttackSpec = field(default_factory=AttackSpec.pgd20)
    trades_beta: float = 6.0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")

    @classmethod
    def defaults(cls, protocol: str, dataset: str = "cifar10", **kw):
        """Standard recipe: linear protocols 25 epochs, LR 0.01 (CIFAR-10) or 0.1
        (CIFAR-100 / STL-10), decay x0.1 at 10 and 20, batch 512; AFF 25 epochs,
        LR 0.1, decay at 15 and 20, batch 128."""
        protocol = protocol.lower()
        if protocol == "aff":
            base = dict(protocol="aff", epochs=25, lr=0.1, milestones=(15, 20), batch_size=128)
        else:
            base = dict(protocol=protocol, epochs=25, lr=0.01 if dataset == "cifar10" else 0.1,
                        milestones=(10, 20), batch_size=512)
        base.update(kw)
        return cls(**base)


def stratified_label_subset(labels, fraction: float, seed: int = 0) -> np.ndarray:
    """Indices keeping ``round(fraction * N_c)`` (at least 1) samples of every class."""
    labels = np.asarray(labels)
    if fraction >= 1.0:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = max(1, int(round(fraction * len(idx))))
        keep.append(rng.choice(idx, size=n, replace=False))
    return np.sort(np.concatenate(keep))


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def finetune(encoder, dataset: ImageBatch, cfg: EvalProtocolConfig, seed: int = 0) -> Classifier:
    """Train a classifier on a copy of ``encoder``'s adversarial branch.

    SLF and ALF keep the encoder frozen in eval mode; AFF trains everything with
    TRADES, using the clean branch for the reference distribution when
    generating perturbations.
    """
    if dataset.labels is None:
        raise ContractError("finetuning needs labels")
    keep = stratified_label_subset(dataset.labels, cfg.label_fraction, seed)
    if len(keep) == 0:
        raise ContractError("labelled subset is empty")
    data = dataset.subset(keep)
    torch.manual_seed(seed)
    clf = Classifier(copy.deepcopy(encoder), int(dataset.num_classes), branch="adv")
    dtype = clf.head.weight.dtype
    linear = cfg.protocol in ("slf", "alf")
    params = clf.head.parameters() if linear else clf.parameters()
    if linear:
        for p in clf.encoder.parameters():
            p.requires_grad_(False)
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.milestones), cfg.gamma)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    x_all = torch.from_numpy(data.data).to(dtype)
    y_all = torch.from_numpy(data.labels)
    history = []
    for _ in range(cfg.epochs):
        if linear:
            clf.eval()
        else:
            clf.train()
        perm = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = torch.as_tensor(perm[start:start + cfg.batch_size])
            x, y = x_all[idx], y_all[idx]
            if cfg.protocol == "slf":
                with torch.no_grad():
                    feats = clf.encoder.features(x, "adv")
                loss = F.cross_entropy(clf.head(feats), y)
            elif cfg.protocol == "alf":
                x_adv = pgd(lambda xa: F.cross_entropy(clf(xa), y, reduction="sum"), x, cfg.train_attack, gen)
                with torch.no_grad():
                    feats = clf.encoder.features(x_adv, "adv")
                loss = F.cross_entropy(clf.head(feats), y)
            else:
                if len(idx) < 2:
                    continue
                loss = trades_loss(clf, x, y, cfg.trades_beta, cfg.train_attack, gen,
                                   reference=lambda xc: clf(xc, branch="clean"))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        sched.step()
        history.append(total / len(perm))
    if linear:
        for p in clf.encoder.parameters():
            p.requires_grad_(True)
    clf.eval()
    clf.history = history
    clf.protocol = cfg.protocol
    return clf


@dataclass
class MetricsRecord:
    standard_accuracy: float
    robust_accuracy: float
    attack: dict
    protocol: str
    seed: int
    wall_time: float
    label: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def report(classifier, test: ImageBatch, attack: AttackSpec = AttackSpec.pgd20(), protocol: str = "",
           seed: int = 0, label: str = "", batch_size: int = 256) -> MetricsRecord:
    if len(test) == 0:
        raise ContractError("empty test set")
    start = time.perf_counter()
    sa, ra = accuracies(classifier, test.data, test.labels, attack, batch_size, seed)
    rec = MetricsRecord(sa, ra, {**asdict(attack), "name": attack.describe()}, protocol, seed,
                        time.perf_counter() - start, label)
    return rec


def append_jsonl(path, record) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = record.to_json() if hasattr(record, "to_json") else json.dumps(record, sort_keys=True)
    with path.open("a") as fh:
        fh.write(line + "\n")


def write_table(records, path) -> Path:
    """One row per run label; columns ``<PROTOCOL>_SA`` / ``<PROTOCOL>_RA`` in percent."""
    rows: dict[str, dict] = {}
    for r in records:
        row = rows.setdefault(r.label or "run", {"method": r.label or "run"})
        p = (r.protocol or "eval").upper()
        row[f"{p}_SA"] = f"{100 * r.standard_accuracy:.2f}"
        row[f"{p}_RA"] = f"{100 * r.robust_accuracy:.2f}"
    cols = ["method"] + [f"{p.upper()}_{m}" for p in PROTOCOLS for m in ("SA", "RA")]
    extra = sorted({k for row in rows.values() for k in row} - set(cols))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols + extra)
        w.writeheader()
        for row in rows.values():
            w.writerow(row)
    return path

"""Dual-BN residual encoder, projection head, momentum target and checkpoints."""
import contextlib
import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DataError

BRANCHES = ("clean", "adv")
CHECKPOINT_FORMAT = "dynacl.checkpoint"
CHECKPOINT_VERSION = 1


def _check_branch(branch):
    if branch not in BRANCHES:
        raise ContractError(f"branch must be one of {BRANCHES}, got {branch!r}")


class DualBatchNorm(nn.Module):
    """Two independent BN layers; ``branch`` picks which one runs.

    With ``freeze_stats`` set, train mode normalises with batch statistics but
    leaves the running estimates alone (used while generating attacks).
    """

    def __init__(self, num_features, dim=2):
        super().__init__()
        bn = nn.BatchNorm2d if dim == 2 else nn.BatchNorm1d
        self.bn_clean = bn(num_features)
        self.bn_adv = bn(num_features)
        self.branch = "clean"
        self.freeze_stats = False

    def forward(self, x):
        bn = self.bn_clean if self.branch == "clean" else self.bn_adv
        if self.training and self.freeze_stats:
            return F.batch_norm(x, None, None, bn.weight, bn.bias, True, 0.0, bn.eps)
        return bn(x)


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = DualBatchNorm(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = DualBatchNorm(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                DualBatchNorm(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 64
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    in_channels: int = 3
    proj_dim: int = 128

    @classmethod
    def desk(cls):
        return cls(width=16)


class DualBranchEncoder(nn.Module):
    """CIFAR-style ResNet whose BN layers (backbone and head) exist per branch."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        w = config.width
        self.conv1 = nn.Conv2d(config.in_channels, w, 3, 1, 1, bias=False)
        self.bn1 = DualBatchNorm(w)
        layers = []
        in_planes = w
        for i, n in enumerate(config.blocks):
            planes = w * 2 ** i
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(in_planes, planes, stride))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.feature_dim = in_planes
        f = in_planes
        self.head = nn.Sequential(
            nn.Linear(f, f, bias=False), DualBatchNorm(f, dim=1), nn.ReLU(inplace=True),
            nn.Linear(f, f, bias=False), DualBatchNorm(f, dim=1), nn.ReLU(inplace=True),
            nn.Linear(f, config.proj_dim),
        )

    def dual_bns(self):
        return [m for m in self.modules() if isinstance(m, DualBatchNorm)]

    def set_branch(self, branch):
        _check_branch(branch)
        for m in self.dual_bns():
            m.branch = branch

    def _backbone(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(f"expected N x {self.config.in_channels} x H x W input, got {tuple(x.shape)}")
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layers(out)
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)

    def features(self, x, branch="clean"):
        """Pre-projection representation (``feature_dim`` wide)."""
        self.set_branch(branch)
        return self._backbone(x)

    def forward(self, x, branch="clean"):
        self.set_branch(branch)
        return self.head(self._backbone(x))


@contextlib.contextmanager
def frozen_stats(*models):
    """Keep BN running statistics fixed inside the block (train-mode batch stats still used)."""
    bns = [m for model in models if model is not None for m in model.dual_bns()]
    saved = [m.freeze_stats for m in bns]
    for m in bns:
        m.freeze_stats = True
    try:
        yield
    finally:
        for m, s in zip(bns, saved):
            m.freeze_stats = s


class MomentumState:
    """EMA target copy; never receives gradients."""

    def __init__(self, online: DualBranchEncoder, momentum: float = 0.99):
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"momentum must lie in [0, 1], got {momentum}")
        self.momentum = momentum
        self.target = copy.deepcopy(online)
        for p in self.target.parameters():
            p.requires_grad_(False)


@torch.no_grad()
def momentum_update(online: DualBranchEncoder, state: MomentumState) -> MomentumState:
    """``target <- m * target + (1 - m) * online`` for parameters and float BN buffers."""
    m = state.momentum
    for pt, po in zip(state.target.parameters(), online.parameters()):
        pt.mul_(m).add_(po.detach(), alpha=1.0 - m)
    for bt, bo in zip(state.target.buffers(), online.buffers()):
        if bt.dtype.is_floating_point:
            bt.mul_(m).add_(bo, alpha=1.0 - m)
        else:
            bt.copy_(bo)
    return state


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create checkpoint directory {path.parent}: {exc}") from exc
    blob = {"header": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}, **payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(blob, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for damaged files
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    header = blob.get("header") if isinstance(blob, dict) else None
    if not header or header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a dynacl checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {header.get('version')} unsupported "
                        f"(expected {CHECKPOINT_VERSION})")
    return blob


def encoder_config_dict(config: EncoderConfig) -> dict:
    d = asdict(config)
    d["blocks"] = list(d["blocks"])
    return d


def encoder_from_checkpoint(blob: dict, which: str = "momentum") -> DualBranchEncoder:
    """Rebuild an encoder; ``which`` selects the momentum target (if stored) or the online net."""
    cfg = blob["encoder_config"]
    enc = DualBranchEncoder(EncoderConfig(**{**cfg, "blocks": tuple(cfg["blocks"])}))
    key = "target_state" if which == "momentum" and blob.get("target_state") is not None else "model_state"
    enc.load_state_dict(blob[key])
    dtype = blob.get("dtype", "float32")
    return enc.to(getattr(torch, dtype))

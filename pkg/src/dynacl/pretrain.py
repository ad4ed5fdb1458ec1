"""Phase 1: momentum contrastive adversarial pretraining with strength annealing."""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .attack import AttackSpec
from .augment import AugmentationPolicy, ImageBatch, augment_views
from .data import content_hash
from .encoder import (DualBranchEncoder, EncoderConfig, MomentumState, encoder_config_dict,
                      load_checkpoint, momentum_update, save_checkpoint)
from .errors import ConfigError, ContractError, NumericError
from .objectives import ObjectiveConfig, dynacl_loss
from .schedule import SchedulePlan, strength_at

log = logging.getLogger(__name__)

MODES = ("dynacl", "acl", "standard_cl", "fixed_strength")


class LARS(torch.optim.Optimizer):
    """SGD with layer-wise trust ratio; 1-d tensors (BN, biases) skip adaptation and decay."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-6, trust_coefficient=0.001):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      trust_coefficient=trust_coefficient))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if p.ndim > 1:
                    g = g.add(p, alpha=group["weight_decay"])
                    w_norm, g_norm = torch.norm(p), torch.norm(g)
                    if w_norm > 0 and g_norm > 0:
                        g = g.mul(group["trust_coefficient"] * w_norm / g_norm)
                state = self.state[p]
                if "momentum_buffer" not in state:
                    state["momentum_buffer"] = torch.clone(g).detach()
                else:
                    state["momentum_buffer"].mul_(group["momentum"]).add_(g)
                p.add_(state["momentum_buffer"], alpha=-group["lr"])


@dataclass(frozen=True)
class PretrainConfig:
    plan: SchedulePlan = field(default_factory=SchedulePlan)
    attack: AttackSpec = field(default_factory=AttackSpec.pretraining)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mode: str = "dynacl"
    fixed_strength: Optional[float] = None
    batch_size: int = 512
    optimizer: str = "lars"
    lr: float = 5.0
    weight_decay: float = 1e-6
    sgd_momentum: float = 0.9
    warmup_epochs: int = 10
    # None disables the momentum target (online net is its own target)
    target_momentum: Optional[float] = 0.99
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "fixed_strength" and self.fixed_strength is None:
            raise ConfigError("mode=fixed_strength needs fixed_strength")
        if self.optimizer not in ("lars", "sgd"):
            raise ConfigError(f"optimizer must be 'lars' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def reference(cls):
        """Full recipe: ResNet-18, 1000 epochs, LARS + cosine, K = 50, lam = 2/3."""
        return cls()

    @classmethod
    def desk(cls, **kw):
        """Reduced recipe: width-16 ResNet-18, 100 epochs, batch 256, momentum SGD."""
        base = dict(plan=SchedulePlan(total_epochs=100, decay_period=5, reweighting_rate=2 / 3),
                    encoder=EncoderConfig.desk(), batch_size=256, optimizer="sgd", lr=0.5,
                    weight_decay=5e-4)
        base.update(kw)
        return cls(**base)

    @property
    def effective_plan(self) -> SchedulePlan:
        if self.mode == "acl":
            return SchedulePlan.acl(self.plan.total_epochs)
        if self.mode == "fixed_strength":
            return replace(self.plan, constant_strength=self.fixed_strength)
        return self.plan

    @property
    def effective_attack(self) -> AttackSpec:
        if self.mode == "standard_cl":
            return self.attack.with_(epsilon=0.0)
        return self.attack


def config_to_dict(cfg: PretrainConfig) -> dict:
    d = asdict(cfg)
    d["encoder"] = encoder_config_dict(cfg.encoder)
    return d


def config_from_dict(d: dict) -> PretrainConfig:
    d = dict(d)
    enc = dict(d.pop("encoder", {}))
    if "blocks" in enc:
        enc["blocks"] = tuple(enc["blocks"])
    return PretrainConfig(
        plan=SchedulePlan(**d.pop("plan", {})),
        attack=AttackSpec(**d.pop("attack", {})),
        objective=ObjectiveConfig(**d.pop("objective", {})),
        encoder=EncoderConfig(**enc),
        **d,
    )


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


class Trainer:
    """Owns model, target, optimizer and epoch counter for one pretraining run.

    All randomness is derived from ``(seed, epoch, ...)`` so a run resumed from
    a checkpoint replays exactly the draws of an uninterrupted one.
    """

    def __init__(self, config: PretrainConfig, dataset_shape, dataset_hash: Optional[str] = None):
        self.config = config
        self.plan = config.effective_plan
        self.attack = config.effective_attack
        self.dataset_shape = tuple(int(v) for v in dataset_shape)
        self.dataset_hash = dataset_hash
        self.dtype = getattr(torch, config.dtype)
        torch.manual_seed(config.seed)
        self.model = DualBranchEncoder(config.encoder).to(self.dtype)
        self.momentum = (None if config.target_momentum is None
                         else MomentumState(self.model, config.target_momentum))
        if config.optimizer == "lars":
            self.optimizer = LARS(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        else:
            self.optimizer = torch.optim.SGD(self.model.parameters(), lr=config.lr,
                                             momentum=config.sgd_momentum, weight_decay=config.weight_decay)
        self.epoch = 0
        self.records: list[dict] = []
        self.batch_losses: list[float] = []

    @property
    def done(self) -> bool:
        return self.epoch >= self.plan.total_epochs

    def lr_at(self, epoch: int) -> float:
        cfg = self.config
        T, warm = self.plan.total_epochs, min(cfg.warmup_epochs, self.plan.total_epochs)
        if epoch < warm:
            return cfg.lr * (epoch + 1) / warm
        span = max(1, T - warm)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - warm) / span))

    def _check_dataset(self, dataset: ImageBatch):
        if tuple(dataset.data.shape) != self.dataset_shape:
            raise ContractError(f"dataset shape {tuple(dataset.data.shape)} does not match the run's "
                                f"{self.dataset_shape}")

    def train_epoch(self, dataset: ImageBatch, before_batch: Optional[Callable] = None) -> dict:
        self._check_dataset(dataset)
        cfg, t = self.config, self.epoch
        start = time.perf_counter()
        s = strength_at(self.plan, t)
        policy = AugmentationPolicy(s, output_size=dataset.image_shape[1:])
        lr = self.lr_at(t)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        n = len(dataset)
        bs = min(cfg.batch_size, n)
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, t, 1])).permutation(n)
        n_batches = n // bs
        self.model.train()
        if self.momentum is not None:
            self.momentum.target.train()
        sums = {"loss": 0.0, "nce": 0.0, "adv_nce": 0.0}
        self.batch_losses = []
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            v1, v2 = augment_views(dataset.subset(idx), policy, cfg.seed, epoch=t, indices=idx)
            x1 = torch.from_numpy(v1.data).to(self.dtype)
            x2 = torch.from_numpy(v2.data).to(self.dtype)
            gen_seed = _seed_int(cfg.seed, t, b, 2)
            if before_batch is not None:
                before_batch(self, t, b, x1, x2, gen_seed)
            gen = torch.Generator().manual_seed(gen_seed)
            try:
                total, parts = dynacl_loss(self.model, self.momentum, x1, x2, self.plan, t,
                                           self.attack, cfg.objective, gen)
            except NumericError as exc:
                raise NumericError(f"epoch {t}, batch {b}: {exc}") from exc
            if not torch.isfinite(total):
                raise NumericError(f"non-finite loss at epoch {t}, batch {b}")
            assert parts["strength"] == s
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
            if self.momentum is not None:
                momentum_update(self.model, self.momentum)
            self.batch_losses.append(float(total.detach()))
            sums["loss"] += float(total.detach())
            sums["nce"] += float(parts["nce"])
            sums["adv_nce"] += float(parts["adv_nce"])
        record = {
            "epoch": t,
            "strength": s,
            "weight": parts["weight"],
            "clean_coef": parts["clean_coef"],
            "adv_coef": parts["adv_coef"],
            "lr": lr,
            "batches": n_batches,
            **{k: v / n_batches for k, v in sums.items()},
            "wall_time": time.perf_counter() - start,
        }
        self.records.append(record)
        self.epoch += 1
        log.info("epoch %d s=%.3f w=%.3f loss=%.4f", t, s, record["weight"], record["loss"])
        return record

    def run(self, dataset: ImageBatch, until: Optional[int] = None, checkpoint_dir=None,
            on_record: Optional[Callable[[dict], None]] = None, before_batch=None) -> list[dict]:
        stop = self.plan.total_epochs if until is None else min(until, self.plan.total_epochs)
        every = self.config.checkpoint_every
        while self.epoch < stop:
            rec = self.train_epoch(dataset, before_batch)
            if on_record is not None:
                on_record(rec)
            if checkpoint_dir is not None and every and self.epoch % every == 0:
                self.save(Path(checkpoint_dir) / f"epoch_{self.epoch:04d}.pt")
        if checkpoint_dir is not None:
            self.save(Path(checkpoint_dir) / "last.pt")
        return self.records

    # -- persistence -------------------------------------------------------

    def state(self) -> dict:
        return {
            "kind": "pretrain",
            "config": config_to_dict(self.config),
            "encoder_config": encoder_config_dict(self.config.encoder),
            "dtype": self.config.dtype,
            "model_state": self.model.state_dict(),
            "target_state": None if self.momentum is None else self.momentum.target.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "plan": asdict(self.plan),
            "records": [dict(r) for r in self.records],
            "dataset_shape": list(self.dataset_shape),
            "dataset_hash": self.dataset_hash,
            "rng_state": torch.get_rng_state(),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state())

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        blob = load_checkpoint(path)
        if blob.get("kind") != "pretrain":
            raise ContractError(f"{path} is not a pretraining checkpoint")
        tr = cls(config_from_dict(blob["config"]), blob["dataset_shape"], blob.get("dataset_hash"))
        tr.model.load_state_dict(blob["model_state"])
        if tr.momentum is not None:
            tr.momentum.target.load_state_dict(blob["target_state"])
        tr.optimizer.load_state_dict(blob["optimizer_state"])
        tr.epoch = int(blob["epoch"])
        tr.records = [dict(r) for r in blob["records"]]
        torch.set_rng_state(blob["rng_state"])
        return tr


def pretrain(config: PretrainConfig, dataset: ImageBatch, out_dir=None, until=None,
             on_record=None, before_batch=None) -> Trainer:
    """Train from scratch; returns the trainer (model, target, records)."""
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    tr = Trainer(config, dataset.data.shape, content_hash(dataset))
    tr.run(dataset, until=until, checkpoint_dir=out_dir, on_record=on_record, before_batch=before_batch)
    return tr


def resume(checkpoint_path, dataset: ImageBatch, out_dir=None, until=None, on_record=None) -> Trainer:
    """Continue a run from a checkpoint. A finished run is returned as is."""
    tr = Trainer.from_checkpoint(checkpoint_path)
    tr._check_dataset(dataset)
    if tr.dataset_hash is not None and content_hash(dataset) != tr.dataset_hash:
        raise ContractError("dataset content differs from the one the checkpoint was trained on")
    if not tr.done:
        tr.run(dataset, until=until, checkpoint_dir=out_dir, on_record=on_record)
    return tr

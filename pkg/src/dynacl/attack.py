"""L-infinity PGD over an arbitrary differentiable loss, and robust accuracy."""
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, NumericError


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 20
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0
    norm: str = "linf"
    loss: str = "ce"

    def __post_init__(self):
        if self.norm != "linf":
            raise ConfigError(f"only the L-inf threat model is supported, got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0 or int(self.iterations) != self.iterations:
            raise ConfigError(f"iterations must be a non-negative integer, got {self.iterations}")
        if self.iterations > 0 and self.epsilon > 0 and self.step_size <= 0:
            raise ConfigError("step_size must be > 0 when iterations > 0 and epsilon > 0")
        if self.clip_min > self.clip_max:
            raise ConfigError("clip_min > clip_max")
        if self.loss not in ("ce", "margin"):
            raise ConfigError(f"unknown attack loss {self.loss!r}")

    @classmethod
    def pgd20(cls):
        return cls()

    @classmethod
    def pretraining(cls, epsilon=8 / 255):
        return cls(epsilon=epsilon, step_size=epsilon / 4, iterations=5, random_start=True)

    @classmethod
    def trades(cls):
        return cls(epsilon=8 / 255, step_size=2 / 255, iterations=10, random_start=True)

    def with_(self, **kw) -> "AttackSpec":
        return AttackSpec(**{**asdict(self), **kw})

    def describe(self) -> str:
        return (f"PGD-{self.iterations}({self.loss}) linf eps={self.epsilon:.5g} "
                f"step={self.step_size:.5g} rs={self.random_start}")


def _project(x, x0, spec):
    x = torch.maximum(torch.minimum(x, x0 + spec.epsilon), x0 - spec.epsilon)
    return x.clamp(spec.clip_min, spec.clip_max)


def pgd(loss_fn: Callable[[torch.Tensor], torch.Tensor], x0: torch.Tensor, spec: AttackSpec,
        generator: Optional[torch.Generator] = None,
        callback: Optional[Callable[[int, torch.Tensor], None]] = None) -> torch.Tensor:
    """Sign-gradient ascent on ``loss_fn`` projected onto the eps-ball and clip range.

    ``callback(i, x)`` sees every iterate, the random start included (i = 0).
    The result is detached.
    """
    x0 = x0.detach()
    if spec.epsilon == 0 or (spec.iterations == 0 and not spec.random_start):
        return x0.clone()
    x = x0.clone()
    if spec.random_start:
        noise = torch.empty_like(x0).uniform_(-spec.epsilon, spec.epsilon, generator=generator)
        x = _project(x0 + noise, x0, spec)
    if callback is not None:
        callback(0, x)
    for i in range(1, spec.iterations + 1):
        x.requires_grad_(True)
        with torch.enable_grad():
            loss = loss_fn(x)
            grad, = torch.autograd.grad(loss, x)
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient at PGD iteration {i}")
        x = _project(x.detach() + spec.step_size * grad.sign(), x0, spec)
        if callback is not None:
            callback(i, x)
    return x.detach()


def margin_loss(logits, y):
    true = logits.gather(1, y[:, None]).squeeze(1)
    other = logits.clone()
    other.scatter_(1, y[:, None], float("-inf"))
    return (other.max(1).values - true).sum()


def classification_attack(model, x, y, spec: AttackSpec, generator=None):
    if spec.loss == "margin":
        fn = lambda xa: margin_loss(model(xa), y)
    else:
        fn = lambda xa: F.cross_entropy(model(xa), y, reduction="sum")
    return pgd(fn, x, spec, generator)


def robust_accuracy(classifier, images, labels, spec: AttackSpec = AttackSpec(),
                    batch_size: int = 256, seed: int = 0) -> float:
    """Fraction of samples still classified correctly under ``spec``."""
    return accuracies(classifier, images, labels, spec, batch_size, seed)[1]


def accuracies(classifier, images, labels, spec: AttackSpec = AttackSpec(),
               batch_size: int = 256, seed: int = 0) -> tuple[float, float]:
    """``(standard, robust)`` accuracy. A sample counts as robust only if it is
    classified correctly both before and after the attack."""
    if len(images) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    classifier.eval()
    g = torch.Generator().manual_seed(seed)
    dtype = next(classifier.parameters()).dtype
    clean_ok = robust_ok = 0
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size]).to(dtype)
        y = torch.as_tensor(labels[start:start + batch_size]).long()
        with torch.no_grad():
            pred = classifier(x).argmax(1)
        ok = pred == y
        x_adv = classification_attack(classifier, x, y, spec, g)
        with torch.no_grad():
            adv_ok = (classifier(x_adv).argmax(1) == y) & ok
        clean_ok += int(ok.sum())
        robust_ok += int(adv_ok.sum())
    n = len(images)
    return clean_ok / n, robust_ok / n

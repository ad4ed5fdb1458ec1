"""Training objectives: InfoNCE, adversarial NCE, the dual-branch dynamic loss,
TRADES and supervised adversarial cross-entropy."""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .attack import AttackSpec, pgd
from .encoder import frozen_stats
from .errors import ConfigError, ContractError, NumericError
from .schedule import SchedulePlan, loss_coefficients, strength_at, weight_at


@dataclass(frozen=True)
class ObjectiveConfig:
    temperature: float = 0.5
    denominator_includes_positive: bool = True
    trades_beta: float = 6.0
    # "mirror": the target embeds the same (clean or perturbed) views through the
    # same branch as the online net; "clean": the adversarial loss contrasts
    # against target clean-branch embeddings of the clean views
    adv_target: str = "mirror"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.trades_beta < 0:
            raise ConfigError(f"trades_beta must be >= 0, got {self.trades_beta}")
        if self.adv_target not in ("mirror", "clean"):
            raise ConfigError(f"adv_target must be 'mirror' or 'clean', got {self.adv_target!r}")


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite embedding passed to the contrastive loss")


def info_nce(anchor, positive, negatives, temperature=0.5, include_positive=False):
    """Mean over anchors of ``-log(exp(sim(a,p)/tau) / sum_m exp(sim(a,n_m)/tau))``.

    ``negatives`` is N x M x d. With ``include_positive`` the positive term is
    added to the denominator (NT-Xent form).
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ContractError("negatives must be N x M x d with M >= 1")
    _check_finite(anchor, positive, negatives)
    a = F.normalize(anchor, dim=-1)
    p = F.normalize(positive, dim=-1)
    n = F.normalize(negatives, dim=-1)
    pos = (a * p).sum(-1) / temperature
    neg = torch.einsum("nd,nmd->nm", a, n) / temperature
    if include_positive:
        neg = torch.cat([neg, pos[:, None]], dim=1)
    return (torch.logsumexp(neg, dim=1) - pos).mean()


def _nce_direction(q, k_pos, k_same, temperature, include_positive):
    n = q.shape[0]
    q = F.normalize(q, dim=1)
    pool = F.normalize(torch.cat([k_same, k_pos]), dim=1)
    logits = q @ pool.T / temperature
    idx = torch.arange(n)
    pos = logits[idx, n + idx]
    own = torch.zeros_like(logits, dtype=torch.bool)
    own[idx, idx] = True
    own[idx, n + idx] = True
    neg = logits.masked_fill(own, float("-inf"))
    if include_positive:
        neg = torch.cat([neg, pos[:, None]], dim=1)
    return (torch.logsumexp(neg, dim=1) - pos).mean()


def batch_nce(q1, q2, k1=None, k2=None, temperature=0.5, include_positive=True):
    """Symmetric in-batch InfoNCE.

    Anchor ``q1[i]`` is paired with ``k2[i]``; its negatives are the other
    2(N-1) embeddings ``{k1[j], k2[j] : j != i}``, and vice versa for ``q2``.
    Without a target (``k = None``) the online embeddings play both roles.
    """
    if q1.shape[0] < 2:
        raise ContractError("in-batch negatives need at least two samples")
    if k1 is None:
        k1, k2 = q1, q2
    _check_finite(q1, q2, k1, k2)
    return 0.5 * (_nce_direction(q1, k2, k1, temperature, include_positive)
                  + _nce_direction(q2, k1, k2, temperature, include_positive))


def _split(z):
    h = z.shape[0] // 2
    return z[:h], z[h:]


def nce_loss(enc, view1, view2, cfg: ObjectiveConfig = ObjectiveConfig(), target=None, branch="clean"):
    x = torch.cat([view1, view2])
    q1, q2 = _split(enc(x, branch))
    k1 = k2 = None
    if target is not None:
        with torch.no_grad(), frozen_stats(target):
            k1, k2 = _split(target(x, branch))
    return batch_nce(q1, q2, k1, k2, cfg.temperature, cfg.denominator_includes_positive)


def perturb_views(enc, view1, view2, spec: AttackSpec, cfg: ObjectiveConfig = ObjectiveConfig(),
                  target=None, generator=None):
    """Joint PGD on both views (each sample acts as anchor and negative) through the adversarial branch."""
    x = torch.cat([view1, view2])
    clean_keys = None
    if target is not None and cfg.adv_target == "clean":
        with torch.no_grad(), frozen_stats(target):
            clean_keys = _split(target(x, "clean"))

    def loss_fn(xa):
        q1, q2 = _split(enc(xa, "adv"))
        if target is None:
            k1 = k2 = None
        elif clean_keys is not None:
            k1, k2 = clean_keys
        else:
            k1, k2 = _split(target(xa, "adv"))
        return batch_nce(q1, q2, k1, k2, cfg.temperature, cfg.denominator_includes_positive)

    with frozen_stats(enc, target):
        x_adv = pgd(loss_fn, x, spec, generator)
    return _split(x_adv)


def adv_nce(enc, view1, view2, spec: AttackSpec, cfg: ObjectiveConfig = ObjectiveConfig(),
            target=None, generator=None):
    """Contrastive loss at PGD-maximised views, adversarial branch.

    Gradients flow through the final evaluation only.
    """
    a1, a2 = perturb_views(enc, view1, view2, spec, cfg, target, generator)
    x = torch.cat([a1, a2])
    q1, q2 = _split(enc(x, "adv"))
    k1 = k2 = None
    if target is not None:
        with torch.no_grad(), frozen_stats(target):
            if cfg.adv_target == "clean":
                k1, k2 = _split(target(torch.cat([view1, view2]), "clean"))
            else:
                k1, k2 = _split(target(x, "adv"))
    return batch_nce(q1, q2, k1, k2, cfg.temperature, cfg.denominator_includes_positive)


def dynacl_loss(enc, momentum_state, view1, view2, plan: SchedulePlan, t: int,
                spec: AttackSpec, cfg: ObjectiveConfig = ObjectiveConfig(), generator=None):
    """``(1 - w) * NCE(clean branch) + (1 + w) * AdvNCE(adv branch)`` at epoch ``t``.

    Returns the total and a dict of the components and coefficients.
    """
    clean_coef, adv_coef = loss_coefficients(plan, t)
    target = None if momentum_state is None else momentum_state.target
    l_clean = nce_loss(enc, view1, view2, cfg, target, "clean")
    l_adv = adv_nce(enc, view1, view2, spec, cfg, target, generator)
    total = clean_coef * l_clean + adv_coef * l_adv
    parts = {
        "nce": l_clean.detach(), "adv_nce": l_adv.detach(),
        "clean_coef": clean_coef, "adv_coef": adv_coef,
        "strength": strength_at(plan, t), "weight": weight_at(plan, t),
    }
    return total, parts


def trades_objective(logits_clean, logits_adv, y, beta):
    """``CE(clean) + beta * KL(p_clean || p_adv)``, batch mean."""
    ce = F.cross_entropy(logits_clean, y)
    kl = F.kl_div(F.log_softmax(logits_adv, dim=1), F.softmax(logits_clean, dim=1), reduction="batchmean")
    return ce + beta * kl


def _check_labels(logits, y):
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")


def trades_perturb(classifier, x, spec: AttackSpec = AttackSpec.trades(), generator=None, reference=None):
    """PGD on ``KL(p_ref(x) || p(x'))``; ``reference`` defaults to ``classifier``."""
    was_training = classifier.training
    classifier.eval()
    try:
        with torch.no_grad():
            p_ref = F.softmax((reference or classifier)(x), dim=1)
        fn = lambda xa: F.kl_div(F.log_softmax(classifier(xa), dim=1), p_ref, reduction="sum")
        x_adv = pgd(fn, x, spec, generator)
    finally:
        classifier.train(was_training)
    return x_adv


def trades_loss(classifier, x, y, beta=6.0, spec: AttackSpec = AttackSpec.trades(),
                generator=None, reference=None, x_adv=None):
    if beta < 0:
        raise ConfigError(f"TRADES beta must be >= 0, got {beta}")
    if x_adv is None:
        x_adv = trades_perturb(classifier, x, spec, generator, reference)
    logits = classifier(x)
    _check_labels(logits, y)
    return trades_objective(logits, classifier(x_adv), y, beta)


def sup_at_loss(classifier, x, y, spec: AttackSpec = AttackSpec(), generator=None):
    """Cross-entropy at PGD-maximised inputs."""
    def fn(xa):
        logits = classifier(xa)
        _check_labels(logits, y)
        return F.cross_entropy(logits, y, reduction="sum")

    x_adv = pgd(fn, x, spec, generator)
    logits = classifier(x_adv)
    _check_labels(logits, y)
    return F.cross_entropy(logits, y)

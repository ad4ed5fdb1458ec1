import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from _oracles import pgd_loop
from _toys import toy_data, trained_toy
from dynacl.attack import AttackSpec, accuracies, classification_attack, pgd, robust_accuracy
from dynacl.errors import ConfigError, ContractError, NumericError

specs = st.builds(AttackSpec, epsilon=st.floats(0, 0.3), step_size=st.floats(1e-4, 0.2),
                  iterations=st.integers(0, 6), random_start=st.booleans())


@settings(max_examples=300, deadline=None)
@given(specs, st.integers(0, 2 ** 31))
def test_every_iterate_feasible(spec, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(3, 5, generator=g, dtype=torch.float64)
    w = torch.randn(3, 5, generator=g, dtype=torch.float64)
    seen = []

    def check(i, x):
        seen.append(i)
        assert (x - x0).abs().max() <= spec.epsilon + 1e-12
        assert x.min() >= 0 and x.max() <= 1

    out = pgd(lambda x: (torch.sin(3 * x) * w).sum(), x0, spec, g, check)
    assert (out - x0).abs().max() <= spec.epsilon + 1e-12 and out.min() >= 0 and out.max() <= 1
    if spec.epsilon > 0 and (spec.iterations or spec.random_start):
        assert seen == list(range(spec.iterations + 1))


def test_zero_eps_identity():
    x0 = torch.rand(4, 3)
    out = pgd(lambda x: x.sum(), x0, AttackSpec(epsilon=0.0))
    assert torch.equal(out, x0) and out is not x0


def test_one_step_linear_closed_form():
    g = torch.Generator().manual_seed(0)
    x0 = 0.3 + 0.4 * torch.rand(50, generator=g, dtype=torch.float64)
    w = torch.randn(50, generator=g, dtype=torch.float64)
    spec = AttackSpec(epsilon=0.05, step_size=0.02, iterations=1, random_start=False)
    out = pgd(lambda x: (w * x).sum(), x0, spec)
    assert torch.equal(out, (x0 + 0.02 * w.sign()).clamp(x0 - 0.05, x0 + 0.05).clamp(0, 1))
    # step larger than the ball: clipped to the boundary
    big = spec.with_(step_size=0.2)
    assert torch.equal(pgd(lambda x: (w * x).sum(), x0, big), x0 + 0.05 * w.sign())


def test_matches_textbook_loop():
    net, data = trained_toy()
    x = torch.from_numpy(data.data[:16])
    y = torch.from_numpy(data.labels[:16])
    fn = lambda xa: F.cross_entropy(net(xa), y, reduction="sum")
    spec = AttackSpec(iterations=7, random_start=False)
    ref = pgd_loop(fn, x, spec.epsilon, spec.step_size, 7, x)
    torch.testing.assert_close(pgd(fn, x, spec), ref, rtol=0, atol=1e-7)


def test_deterministic_given_seed():
    net, data = trained_toy()
    x, y = torch.from_numpy(data.data[:16]), torch.from_numpy(data.labels[:16])
    a = classification_attack(net, x, y, AttackSpec(), torch.Generator().manual_seed(3))
    b = classification_attack(net, x, y, AttackSpec(), torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_nonfinite_gradient_reports_iteration():
    spec = AttackSpec(iterations=3, random_start=False)
    with pytest.raises(NumericError, match="iteration 1"):
        pgd(lambda x: (x * float("nan")).sum(), torch.rand(3), spec)


def test_spec_validation():
    for kw in (dict(epsilon=-1), dict(iterations=-1), dict(step_size=0.0), dict(norm="l2"),
               dict(clip_min=1, clip_max=0), dict(loss="hinge")):
        with pytest.raises(ConfigError):
            AttackSpec(**kw)


class Const(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.bias = nn.Parameter(torch.tensor(logits))

    def forward(self, x):
        return self.bias.expand(len(x), -1) + 0 * x.flatten(1).sum(1, keepdim=True)


def test_constant_classifier():
    labels = np.array([0, 1, 1, 2, 1, 0])
    sa, ra = accuracies(Const([0.0, 5.0, 1.0]), np.random.rand(6, 2).astype(np.float32), labels)
    assert sa == ra == 0.5


def test_zero_eps_ra_equals_sa_and_ra_le_sa():
    net, _ = trained_toy()
    test = toy_data(seed=9)
    sa, ra = accuracies(net, test.data, test.labels, AttackSpec(epsilon=0.0))
    assert sa == ra
    sa, ra = accuracies(net, test.data, test.labels, AttackSpec())
    assert ra <= sa
    assert robust_accuracy(net, test.data, test.labels, AttackSpec()) == ra


def test_monotone_budget():
    net, _ = trained_toy()
    test = toy_data(seed=9)
    ras = [accuracies(net, test.data, test.labels, AttackSpec(epsilon=e, step_size=e / 4 if e else 0.0))[1]
           for e in (0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255)]
    assert all(b <= a + 0.005 for a, b in zip(ras, ras[1:])), ras


def test_margin_variant_and_empty():
    net, _ = trained_toy()
    test = toy_data(seed=9)
    _, ra_ce = accuracies(net, test.data[:64], test.labels[:64], AttackSpec())
    _, ra_m = accuracies(net, test.data[:64], test.labels[:64], AttackSpec(loss="margin"))
    assert 0 <= ra_m <= 1 and 0 <= ra_ce <= 1
    with pytest.raises(ContractError):
        accuracies(net, test.data[:0], test.labels[:0])

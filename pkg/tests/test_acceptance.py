"""Acceptance suite: one PASS/FAIL line per criterion (shown in the terminal summary).

Criteria that need the CIFAR-10 binary archive look for it under
``$DYNACL_DATA_DIR`` and report SKIP when it is absent. The desk-scale ablation
additionally needs ``--runslow``.
"""
import copy
import time
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from _oracles import central_diff, nce_loop, pgd_loop, rel_err
from _toys import trained_toy
from dynacl.attack import AttackSpec, pgd
from dynacl.data import (CIFAR_RECORD_BYTES, SynthSpec, data_root, load_cifar10_binary, parse_cifar10_batch,
                         serialize_cifar10_batch, stratified_subset, synth_dataset, write_cifar10_binary)
from dynacl.encoder import EncoderConfig
from dynacl.errors import DataError
from dynacl.objectives import (ObjectiveConfig, adv_nce, info_nce, nce_loss, sup_at_loss, trades_loss,
                               trades_perturb)
from dynacl.postprocess import kmeans
from dynacl.pretrain import PretrainConfig, pretrain, resume
from dynacl.schedule import SchedulePlan, loss_coefficients, strength_at, weight_at

TINY = EncoderConfig(width=4, blocks=(1, 1, 1, 1), proj_dim=8)


def _cifar():
    root = data_root()
    if root is None:
        return None
    try:
        return load_cifar10_binary(root)
    except DataError:
        return None


# ---------------------------------------------------------------------------
# 1. schedule
# ---------------------------------------------------------------------------

def _hand(T, K, lam, t):
    s = 1 - Fraction((t // K) * K, T)
    w = Fraction(lam) * (1 - s)
    return s, w, (1 - w, 1 + w)


def test_c1_schedule_table(verdict):
    start = time.perf_counter()
    lam = Fraction(2, 3)
    # hand-evaluated entries (T = 1000): (K, t, s, w)
    table = [
        (1, 0, Fraction(1), Fraction(0)),
        (1, 1, Fraction(999, 1000), Fraction(1, 1500)),
        (1, 999, Fraction(1, 1000), Fraction(333, 500)),
        (25, 24, Fraction(1), Fraction(0)),
        (25, 30, Fraction(39, 40), Fraction(1, 60)),
        (25, 999, Fraction(1, 40), Fraction(13, 20)),
        (50, 49, Fraction(1), Fraction(0)),
        (50, 120, Fraction(9, 10), Fraction(1, 15)),
        (50, 500, Fraction(1, 2), Fraction(1, 3)),
        (50, 999, Fraction(1, 20), Fraction(19, 30)),
        (100, 99, Fraction(1), Fraction(0)),
        (100, 100, Fraction(9, 10), Fraction(1, 15)),
        (100, 999, Fraction(1, 10), Fraction(3, 5)),
    ]
    bad = []
    for K, t, s, w in table:
        p = SchedulePlan(1000, K, 2 / 3)
        got = (strength_at(p, t), weight_at(p, t), loss_coefficients(p, t))
        want = (float(s), float(w), (float(1 - w), float(1 + w)))
        if got != want:
            bad.append((K, t, got, want))
    # full sweep of every epoch against the rational formula
    for K in (1, 25, 50, 100):
        p = SchedulePlan(1000, K, 2 / 3)
        for t in range(1000):
            s, w, (c, a) = _hand(1000, K, lam, t)
            if (strength_at(p, t), weight_at(p, t), loss_coefficients(p, t)) != (float(s), float(w),
                                                                                  (float(c), float(a))):
                bad.append((K, t))
    elapsed = time.perf_counter() - start
    verdict(1, "schedule table", not bad and elapsed < 1.0,
            f"{len(table)} hand entries + 4000 epochs, mismatches={len(bad)}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. ACL degeneracy against a direct implementation
# ---------------------------------------------------------------------------

def nt_xent(z, keys, tau):
    """SimCLR-style 2N x 2N formulation; keys default to the queries."""
    keys = z if keys is None else keys
    zn = z / z.norm(dim=1, keepdim=True)
    kn = keys / keys.norm(dim=1, keepdim=True)
    n2 = len(z)
    sim = (zn @ kn.T / tau).masked_fill(torch.eye(n2, dtype=torch.bool), float("-inf"))
    pos = torch.arange(n2).roll(n2 // 2)
    return (torch.logsumexp(sim, 1) - sim[torch.arange(n2), pos]).mean()


def _direct_acl_batch(model, target, x1, x2, gen_seed, spec: AttackSpec, tau):
    x = torch.cat([x1, x2])
    with torch.no_grad():
        keys = None if target is None else target(x, "clean")
    l_clean = nt_xent(model(x, "clean"), keys, tau)

    def adv_objective(xa):
        return nt_xent(model(xa, "adv"), None if target is None else target(xa, "adv"), tau)

    noise = torch.empty_like(x).uniform_(-spec.epsilon, spec.epsilon,
                                         generator=torch.Generator().manual_seed(gen_seed))
    x_adv = pgd_loop(adv_objective, x, spec.epsilon, spec.step_size, spec.iterations, (x + noise).clamp(0, 1))
    with torch.no_grad():
        l_adv = adv_objective(x_adv)
    return float((l_clean + l_adv).detach())


def test_c2_acl_degeneracy(verdict):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    q1, q2, k1, k2 = (torch.randn(5, 4, generator=g, dtype=torch.float64) for _ in range(4))
    oracle_ok = (abs(float(nt_xent(torch.cat([q1, q2]), torch.cat([k1, k2]), 0.5))
                     - nce_loop(q1, q2, k1, k2, 0.5, True)) < 1e-12)

    data = synth_dataset(SynthSpec(classes=2, per_class=256, image_size=16))
    worst = 0.0
    counts = []
    for target_momentum in (None, 0.99):
        cfg = PretrainConfig(plan=SchedulePlan(1, 1, 2 / 3), encoder=TINY, mode="acl", batch_size=128,
                             optimizer="sgd", lr=0.05, warmup_epochs=0, dtype="float64",
                             target_momentum=target_momentum)
        direct = []

        def hook(tr, t, b, x1, x2, gen_seed):
            model = copy.deepcopy(tr.model)
            target = None if tr.momentum is None else copy.deepcopy(tr.momentum.target)
            direct.append(_direct_acl_batch(model, target, x1, x2, gen_seed, tr.attack,
                                            tr.config.objective.temperature))

        tr = pretrain(cfg, data, before_batch=hook)
        assert tr.records[0]["strength"] == 1.0 and tr.records[0]["weight"] == 0.0
        counts.append(len(direct))
        for got, want in zip(tr.batch_losses, direct):
            worst = max(worst, abs(got - want) / abs(want))
    elapsed = time.perf_counter() - start
    ok = oracle_ok and counts == [4, 4] and worst < 1e-6 and elapsed < 120
    verdict(2, "ACL degeneracy", ok, f"8 batches (with/without momentum target), "
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. gradient checks
# ---------------------------------------------------------------------------

class _Lin(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(w)

    def forward(self, x):
        return torch.tanh(x.flatten(1)) @ self.w


def test_c3_gradient_checks(verdict):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    errs = {}
    a = torch.randn(6, 5, generator=g, dtype=torch.float64, requires_grad=True)
    p = torch.randn(6, 5, generator=g, dtype=torch.float64)
    n = torch.randn(6, 4, 5, generator=g, dtype=torch.float64)
    for inc in (False, True):
        a.grad = None
        info_nce(a, p, n, 0.5, inc).backward()
        errs[f"info_nce(include_positive={inc})"] = rel_err(a.grad, central_diff(lambda v: info_nce(v, p, n, 0.5, inc), a))

    x = torch.rand(5, 2, 2, 2, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1, 0])
    w0 = torch.randn(8, 3, generator=g, dtype=torch.float64)
    net = _Lin(w0.clone())
    spec = AttackSpec.trades().with_(iterations=3)
    x_adv = trades_perturb(net, x, spec, torch.Generator().manual_seed(1))
    net.w.grad = None
    trades_loss(net, x, y, 6.0, x_adv=x_adv).backward()

    def f_w(w):
        return trades_loss(_Lin(w), x, y, 6.0, x_adv=x_adv)

    errs["trades wrt weights"] = rel_err(net.w.grad, central_diff(f_w, w0))
    xv = x.clone().requires_grad_(True)
    trades_loss(net, xv, y, 6.0, x_adv=x_adv).backward()
    errs["trades wrt clean input"] = rel_err(xv.grad, central_diff(lambda v: trades_loss(net, v, y, 6.0, x_adv=x_adv), x))
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    verdict(3, "gradient checks", worst < 1e-4 and elapsed < 60,
            ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. PGD invariants
# ---------------------------------------------------------------------------

def test_c4_pgd_invariants(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    violations = 0
    checked = 0
    for trial in range(10_000):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=rng.integers(1, 4)))
        eps = float(rng.choice([0.0, rng.uniform(0, 0.5)]))
        spec = AttackSpec(epsilon=eps, step_size=float(rng.uniform(1e-3, 0.3)), iterations=int(rng.integers(0, 6)),
                          random_start=bool(rng.integers(0, 2)))
        x0 = torch.from_numpy(rng.uniform(-0.2, 1.2, size=shape)).clamp(0, 1)
        w = torch.from_numpy(rng.standard_normal(shape))
        kind = trial % 3
        loss = [lambda x: (w * x).sum(), lambda x: ((x - w) ** 2).sum(), lambda x: torch.sin(3 * w * x).sum()][kind]

        def check(i, x):
            nonlocal violations, checked
            checked += 1
            if (x - x0).abs().max() > eps + 1e-12 or x.min() < 0 or x.max() > 1:
                violations += 1

        out = pgd(loss, x0, spec, torch.Generator().manual_seed(trial), callback=check)
        check(-1, out)
        if eps == 0 and not torch.equal(out, x0):
            violations += 1

    # one step on a linear loss
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(200, generator=g, dtype=torch.float64)
    w = torch.randn(200, generator=g, dtype=torch.float64)
    spec = AttackSpec(epsilon=0.03, step_size=0.01, iterations=1, random_start=False)
    closed = torch.equal(pgd(lambda x: (w * x).sum(), x0, spec),
                         (x0 + 0.01 * w.sign()).clamp(0, 1))

    # adversarial >= clean on trained toys
    net, data = trained_toy()
    x, y = torch.from_numpy(data.data), torch.from_numpy(data.labels)
    no_rs = AttackSpec(iterations=10, random_start=False)
    sup_wins = []
    for s in range(0, len(x), 32):
        xb, yb = x[s:s + 32], y[s:s + 32]
        with torch.no_grad():
            clean = F.cross_entropy(net(xb), yb).item()
        sup_wins.append(sup_at_loss(net, xb, yb, no_rs).item() >= clean)

    syn = synth_dataset(SynthSpec(classes=2, per_class=128, image_size=16))
    cfg = PretrainConfig(plan=SchedulePlan(3, 1), encoder=TINY, batch_size=64, optimizer="sgd", lr=0.05,
                         warmup_epochs=0, target_momentum=None)
    enc = pretrain(cfg, syn).model
    xs = torch.from_numpy(syn.data)
    view_rng = torch.Generator().manual_seed(3)
    nce_wins = []
    for s in range(0, len(xs), 32):
        v1 = xs[s:s + 32]
        v2 = (v1 + 0.05 * torch.randn(v1.shape, generator=view_rng)).clamp(0, 1)
        clean = nce_loss(enc, v1, v2, ObjectiveConfig(), None, "adv").item()
        adv = adv_nce(enc, v1, v2, AttackSpec.pretraining().with_(random_start=False)).item()
        nce_wins.append(adv >= clean)
    elapsed = time.perf_counter() - start
    frac_sup, frac_nce = np.mean(sup_wins), np.mean(nce_wins)
    ok = violations == 0 and closed and frac_sup >= 0.95 and frac_nce >= 0.95 and elapsed < 300
    verdict(4, "PGD invariants", ok,
            f"10000 trials / {checked} iterates, violations={violations}, one-step closed form={closed}, "
            f"adv>=clean sup-AT {frac_sup:.0%} of {len(sup_wins)}, AdvNCE {frac_nce:.0%} of {len(nce_wins)}, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. augmentation diagnostics on CIFAR-10
# ---------------------------------------------------------------------------

def test_c5_diagnostics_direction(verdict):
    from dynacl.diagnostics import SEPARABILITY_THRESHOLD, sweep

    name = "diagnostics direction"
    splits = _cifar()
    if splits is None:
        verdict.skip(5, name, "CIFAR-10 binary archive not found under $DYNACL_DATA_DIR")
    start = time.perf_counter()
    train = stratified_subset(splits[0], 100, seed=0)
    test = stratified_subset(splits[1], 100, seed=0)
    rows = sweep(train, (0.0, 0.5, 1.0), "both", test, augs_per_sample=50, sample_cap=100, seed=0)
    mmd = [r.mmd_mean for r in rows]
    cw = [r.classwise_min for r in rows]
    tol = 0.05
    mmd_up = all(b > a - tol * abs(a) for a, b in zip(mmd, mmd[1:])) and mmd[-1] > mmd[0]
    cw_down = all(b < a + tol * abs(a) for a, b in zip(cw, cw[1:])) and cw[-1] < cw[0]
    flip = cw[0] > SEPARABILITY_THRESHOLD and cw[-1] < SEPARABILITY_THRESHOLD
    elapsed = time.perf_counter() - start
    verdict(5, name, mmd_up and cw_down and flip and elapsed < 900,
            f"MMD {['%.4g' % v for v in mmd]}, classwise min {['%.4f' % v for v in cw]} "
            f"(2eps={SEPARABILITY_THRESHOLD:.4f}), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. desk-scale ablation
# ---------------------------------------------------------------------------

def test_c6_desk_ablation(verdict, request, tmp_path):
    from pathlib import Path

    from dynacl.config import load_config, load_split
    from dynacl.encoder import encoder_from_checkpoint, load_checkpoint
    from dynacl.evaluate import EvalProtocolConfig, finetune, report
    from dynacl.postprocess import extract_features, lp_aft

    name = "desk-scale ablation"
    if not request.config.getoption("--runslow"):
        verdict.skip(6, name, "slow tier (hours on GPU, overnight on CPU): pass --runslow")
    if _cifar() is None:
        verdict.skip(6, name, "CIFAR-10 binary archive not found under $DYNACL_DATA_DIR")
    configs = Path(__file__).resolve().parents[1] / "configs"
    results = {}
    for label in ("dynacl", "acl"):
        cfg = load_config(configs / f"desk_{label}.yaml")
        train, _ = load_split(cfg.data, "train")
        test, _ = load_split(cfg.data, "test")
        tr = pretrain(cfg.pretrain, train, out_dir=tmp_path / label)
        enc = encoder_from_checkpoint(load_checkpoint(tmp_path / label / "last.pt"))
        ecfg = EvalProtocolConfig.defaults("slf", "cifar10")
        clf = finetune(enc, train, ecfg, seed=cfg.seed)
        results[label] = report(clf, test, AttackSpec.pgd20(), "slf", cfg.seed).robust_accuracy
        if label == "dynacl":
            pp = cfg.postprocess
            feats = extract_features(enc, train.data, branch="clean")
            pl = kmeans(feats, pp.k or 10, pp.max_iters, seed=cfg.seed, normalize=pp.normalize, n_init=pp.n_init)
            post = lp_aft(enc, train, pl, pp.attack, pp.lp_epochs, pp.aft_epochs, pp.lp_lr, pp.aft_lr,
                          pp.batch_size, pp.beta, seed=cfg.seed)
            clf_pp = finetune(post.encoder, train, ecfg, seed=cfg.seed)
            results["dynacl++"] = report(clf_pp, test, AttackSpec.pgd20(), "slf", cfg.seed).robust_accuracy
        del tr
    gap = 100 * (results["dynacl"] - results["acl"])
    pp_delta = 100 * (results["dynacl++"] - results["dynacl"])
    verdict(6, name, gap >= 2.0 and pp_delta >= -0.5,
            f"SLF PGD-20 RA: DYNACL {100 * results['dynacl']:.2f}, ACL {100 * results['acl']:.2f} "
            f"(gap {gap:+.2f}), with post-processing {100 * results['dynacl++']:.2f} ({pp_delta:+.2f})")


# ---------------------------------------------------------------------------
# 7. determinism
# ---------------------------------------------------------------------------

def _state_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        va, vb = a[k], b[k]
        if isinstance(va, torch.Tensor):
            if not (isinstance(vb, torch.Tensor) and va.dtype == vb.dtype and torch.equal(va, vb)):
                return False
        elif isinstance(va, dict):
            if not isinstance(vb, dict) or not _state_equal(va, vb):
                return False
        elif isinstance(va, list):
            if len(va) != len(vb) or not all(_state_equal({0: x}, {0: y}) for x, y in zip(va, vb)):
                return False
        elif va != vb:
            return False
    return True


def _stream(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def test_c7_determinism(verdict, tmp_path):
    start = time.perf_counter()
    data = synth_dataset(SynthSpec(classes=2, per_class=64, image_size=16))
    cfg = PretrainConfig(plan=SchedulePlan(4, 1, 2 / 3), encoder=TINY, batch_size=32, optimizer="sgd",
                         lr=0.05, warmup_epochs=1)
    full = pretrain(cfg, data)
    twin = pretrain(cfg, data)
    part = pretrain(cfg, data, until=2)
    part.save(tmp_path / "mid.pt")
    resumed = resume(tmp_path / "mid.pt", data)
    same_stream = _stream(full.records) == _stream(twin.records) and full.batch_losses == twin.batch_losses
    bitwise = all(_state_equal(x, y) for x, y in (
        (full.model.state_dict(), resumed.model.state_dict()),
        (full.momentum.target.state_dict(), resumed.momentum.target.state_dict()),
        (full.optimizer.state_dict(), resumed.optimizer.state_dict()),
    ))
    resumed_stream = _stream(full.records) == _stream(resumed.records)
    elapsed = time.perf_counter() - start
    verdict(7, "determinism", same_stream and bitwise and resumed_stream and elapsed < 600,
            f"twin runs identical={same_stream}, resume-at-2 bitwise state={bitwise}, "
            f"metric stream={resumed_stream}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8. k-means oracle
# ---------------------------------------------------------------------------

def test_c8_kmeans(verdict):
    start = time.perf_counter()
    recovered = 0
    monotone = True
    for trial in range(100):
        g = np.random.default_rng(trial)
        k, d, sigma = 4, 6, 0.5
        centres = np.zeros((k, d))
        for c in range(1, k):
            centres[c] = centres[c - 1]
            centres[c, c % d] += 10 * sigma
        y = g.integers(0, k, 200)
        y[:k] = np.arange(k)
        x = centres[y] + sigma * g.standard_normal((200, d))
        pl = kmeans(x, k, seed=trial, normalize=False)
        # recovery up to relabelling: every cluster is pure and every blob is one cluster
        pairs = set(zip(pl.assignments.tolist(), y.tolist()))
        recovered += len(pairs) == k and len({a for a, _ in pairs}) == k
        h = pl.inertia_history
        monotone &= all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))
    elapsed = time.perf_counter() - start
    verdict(8, "k-means oracle", recovered == 100 and monotone and elapsed < 60,
            f"recovered {recovered}/100 at 10 sigma, inertia monotone={monotone}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 9. CIFAR-10 binary format
# ---------------------------------------------------------------------------

def test_c9_format_fidelity(verdict, tmp_path):
    start = time.perf_counter()
    g = np.random.default_rng(0)

    def records(n):
        rec = g.integers(0, 256, (n, CIFAR_RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = g.integers(0, 10, n)
        return rec.tobytes()

    raw = records(10000)
    batch = parse_cifar10_batch(raw, "data_batch_1.bin")
    roundtrip = serialize_cifar10_batch(batch) == raw
    partial = tmp_path / "partial"
    partial.mkdir()
    (partial / "data_batch_1.bin").write_bytes(raw)
    errors = []
    malformed = {
        "truncated": lambda: parse_cifar10_batch(raw[:-1], "t.bin"),
        "empty": lambda: parse_cifar10_batch(b"", "e.bin"),
        "label byte 10": lambda: parse_cifar10_batch(bytes([10]) + raw[1:], "l.bin"),
        "missing directory": lambda: load_cifar10_binary(tmp_path / "nowhere"),
        "missing batch file": lambda: load_cifar10_binary(partial),
        "wrong archive layout": lambda: write_cifar10_binary(batch, batch, tmp_path / "out"),
    }
    for label, fn in malformed.items():
        try:
            fn()
        except DataError as exc:
            errors.append((label, str(exc)))
    raised = {label for label, _ in errors}
    elapsed = time.perf_counter() - start
    ok = roundtrip and set(malformed) <= raised and elapsed < 10
    verdict(9, "format fidelity", ok, f"10000-record batch byte-exact={roundtrip}, "
            f"malformed inputs rejected {len(raised & set(malformed))}/{len(malformed)}, {elapsed:.1f}s")

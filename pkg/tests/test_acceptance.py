"""Desk-scale acceptance suite.

Each test checks one criterion at its stated tolerance, records a one-line
PASS/FAIL verdict (printed in the terminal summary), then asserts.  The
end-to-end criteria share trained toy runs through session fixtures.
"""

import copy
import itertools
import math
import statistics
import time

import numpy as np
import pytest
import torch

from pvda.config import PARAM_GROUPS, HeadConfig, ScheduleConfig, Variant, toy_profile
from pvda.encoder import ring_masks, square_ring_partition
from pvda.experiment import build_datasets, evaluate_encoder, load_encoder, no_adversary, trial, with_seed
from pvda.heads import ViewDiscriminator
from pvda.losses import EPS, adversarial_loss, location_loss, view_loss
from pvda.retrieval import RetrievalResult, average_precision, recall_at_k
from pvda.training import BatchSource, alpha_at, init_state, lr_at, train_step

SEEDS = (0, 1, 2, 3, 4)
VERDICTS: list[str] = []


def verdict(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    assert passed, line


# ---------------------------------------------------------------------------
# 1. schedules

def test_criterion_01_schedule_fidelity():
    t0 = time.perf_counter()
    cfg = ScheduleConfig()
    ok = True
    for e in range(450):
        ok &= alpha_at(e, cfg) == 0.9 + 0.1 * (e // 140)
        within = e % 140
        n = (within >= 60) + (within >= 120)
        for g in PARAM_GROUPS:
            ok &= lr_at(e, g, cfg) == cfg.base_lrs[g] * 0.8 ** n
    ok &= [alpha_at(e, cfg) for e in (0, 140, 280)] == [0.9, 1.0, 1.1]
    ok &= [lr_at(e, "classifier", cfg) for e in (59, 60, 119, 120, 139, 140)] == \
        [0.01, 0.01 * 0.8, 0.01 * 0.8, 0.01 * 0.8 ** 2, 0.01 * 0.8 ** 2, 0.01]
    nr = ScheduleConfig(variant=Variant.NO_RESTART)
    for e in range(450):
        ok &= alpha_at(e, nr) == 0.9 + 0.1 * (e // 140)
        ok &= lr_at(e, "classifier", nr) == 0.01 * 0.8 ** (e // 140)
    decays = [e for e in range(1, 450) if lr_at(e, "classifier", nr) != lr_at(e - 1, "classifier", nr)]
    ok &= decays == [140, 280, 420]
    dt = time.perf_counter() - t0
    verdict(1, ok and dt < 1.0, f"450 epochs exact, NO_RESTART decays at {decays}, {dt:.3f}s")


# ---------------------------------------------------------------------------
# 2. loss oracles

def _scalar_location(probs, labels):
    return -sum(math.log(max(probs[b][p][labels[b]], EPS)) for b in range(len(labels)) for p in range(len(probs[b])))


def _scalar_view(q, views, flip=False):
    total = 0.0
    for b, v in enumerate(views):
        target = (1 - v) if flip else v
        total -= math.log(max(q[b][target], EPS))
    return total


def test_criterion_02_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    identity = True
    for _ in range(100):
        b, c = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        probs = torch.softmax(torch.from_numpy(rng.normal(size=(b, 4, c)) * 4), -1)
        labels = torch.from_numpy(rng.integers(0, c, size=b))
        q = torch.softmax(torch.from_numpy(rng.normal(size=(b, 2)) * 4), -1)
        views = torch.from_numpy(rng.integers(0, 2, size=b))
        pairs = [
            (location_loss(probs, labels).item(), _scalar_location(probs.tolist(), labels.tolist())),
            (view_loss(q, views).item(), _scalar_view(q.tolist(), views.tolist())),
            (adversarial_loss(q, views).item(), _scalar_view(q.tolist(), views.tolist(), flip=True)),
        ]
        for got, want in pairs:
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
        identity &= adversarial_loss(q, views).item() == view_loss(q, 1 - views).item()
    dt = time.perf_counter() - t0
    verdict(2, worst <= 1e-10 and identity and dt < 10, f"max rel err {worst:.2e}, flip identity {identity}, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 3. partition geometry

def test_criterion_03_partition_geometry():
    t0 = time.perf_counter()
    ok = True
    counts = {}
    for side in (8, 16, 24, 32):
        m = ring_masks(side)
        ok &= bool((m.sum(0) == 1).all())
        step = side // 4
        expect = [(k * step) ** 2 - ((k - 1) * step) ** 2 for k in range(1, 5)]
        counts[side] = m.sum(dim=(1, 2)).tolist()
        ok &= counts[side] == expect
        g = torch.Generator().manual_seed(side)
        maps = torch.randn(3, 5, side, side, generator=g, dtype=torch.float64)
        ref = square_ring_partition(maps)
        for t in (maps.rot90(1, (2, 3)), maps.rot90(2, (2, 3)), maps.rot90(3, (2, 3)), maps.flip(2), maps.flip(3)):
            ok &= torch.allclose(square_ring_partition(t), ref, rtol=0, atol=1e-12)
    ok &= counts[16] == [16, 48, 80, 112]
    dt = time.perf_counter() - t0
    verdict(3, ok and dt < 5, f"counts at 16: {counts[16]}, disjoint+exhaustive+invariant, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 4. gradient checks

def _rel_fd_error(fn, x, h=1e-6, max_coords=None, seed=0):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().reshape(-1)
    flat = x.detach().reshape(-1)
    idx = torch.arange(flat.numel())
    if max_coords is not None and flat.numel() > max_coords:
        idx = torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(seed))[:max_coords]
    numeric = torch.empty(len(idx), dtype=torch.float64)
    for n, i in enumerate(idx):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        numeric[n] = (fn(plus.view_as(x)) - fn(minus.view_as(x))).item() / (2 * h)
    return ((analytic[idx] - numeric).norm() / numeric.norm()).item()


def test_criterion_04_gradient_checks():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(4)
    errs = {}
    labels = torch.randint(0, 5, (3,), generator=g)
    views = torch.tensor([0, 1, 1, 0])
    errs["location"] = _rel_fd_error(lambda z: location_loss(torch.softmax(z, -1), labels),
                                     torch.randn(3, 4, 5, generator=g, dtype=torch.float64))
    errs["view"] = _rel_fd_error(lambda z: view_loss(torch.softmax(z, -1), views),
                                 torch.randn(4, 2, generator=g, dtype=torch.float64))
    errs["adversarial"] = _rel_fd_error(lambda z: adversarial_loss(torch.softmax(z, -1), views),
                                        torch.randn(4, 2, generator=g, dtype=torch.float64))
    torch.manual_seed(4)
    disc = ViewDiscriminator(8, 8, HeadConfig(disc_channels=(8, 8, 8), disc_norm=True)).double()
    errs["discriminator"] = _rel_fd_error(lambda x: view_loss(disc.probs(x), views),
                                          torch.randn(4, 8, 8, 8, generator=g, dtype=torch.float64), max_coords=200)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    verdict(4, worst < 1e-3 and dt < 30, "rel errs " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
            + f", {dt:.1f}s")


# ---------------------------------------------------------------------------
# 5. freeze contracts

def _snap(module):
    return [p.detach().clone() for p in module.parameters()]


def _equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_criterion_05_freeze_contracts(monkeypatch):
    t0 = time.perf_counter()
    cfg = toy_profile()
    data = build_datasets(cfg)
    state = init_state(cfg, data.train.num_locations)
    m = state.model
    source = BatchSource(data.train, cfg.train.batch_size, True)
    step1_ok, step2_ok, calls = [], [], {"adam": 0, "sgd": 0}
    adam_step, sgd_step = state.adam.step, state.sgd.step

    def adam_checked(*a, **k):
        before = _snap(m.encoder) + _snap(m.classifier)
        out = adam_step(*a, **k)
        step1_ok.append(_equal(before, _snap(m.encoder) + _snap(m.classifier)))
        calls["adam"] += 1
        return out

    def sgd_checked(*a, **k):
        before = _snap(m.discriminator)
        out = sgd_step(*a, **k)
        step2_ok.append(_equal(before, _snap(m.discriminator)))
        calls["sgd"] += 1
        return out

    monkeypatch.setattr(state.adam, "step", adam_checked)
    monkeypatch.setattr(state.sgd, "step", sgd_checked)
    for _ in range(50):
        train_step(state, *source.draw(state.rng))
    dt = time.perf_counter() - t0
    ok = all(step1_ok) and all(step2_ok) and calls["sgd"] == 50 and calls["adam"] == 50 * cfg.train.disc_steps
    verdict(5, ok and dt < 60, f"50 steps, {calls['adam']} step-1 and {calls['sgd']} step-2 updates all "
            f"bit-identical on the frozen side: {ok}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 6. metric oracles

def _brute_ap(ranked, relevant):
    hits, total = 0, 0.0
    for pos, gid in enumerate(ranked, 1):
        if gid in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def test_criterion_06_metric_oracles():
    t0 = time.perf_counter()
    ok, checked = True, 0
    for n in range(1, 9):
        ranked = list(range(n))
        res = RetrievalResult(0, np.array(ranked), np.linspace(1, 0, n))
        for mask in itertools.product([0, 1], repeat=n):
            rel = {i for i in ranked if mask[i]}
            if not rel:
                continue
            ap = average_precision(res, rel)
            ok &= abs(ap - _brute_ap(ranked, rel)) <= 1e-12
            if len(rel) == 1:
                ok &= abs(ap - 1 / (next(iter(rel)) + 1)) <= 1e-15
            checked += 1
    rng = np.random.default_rng(6)
    for _ in range(200):
        nq, g = int(rng.integers(1, 10)), int(rng.integers(1, 15))
        results = [RetrievalResult(q, rng.permutation(g), np.zeros(g)) for q in range(nq)]
        relevance = {q: set(rng.choice(g, size=int(rng.integers(1, g + 1)), replace=False).tolist())
                     for q in range(nq)}
        vals = [recall_at_k(results, relevance, k) for k in range(1, g + 2)]
        ok &= all(a <= b for a, b in zip(vals, vals[1:]))
    dt = time.perf_counter() - t0
    verdict(6, ok and dt < 30, f"{checked} relevance patterns exact, R@K monotone, {dt:.1f}s")


# ---------------------------------------------------------------------------
# end-to-end toy runs

@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def alignment_runs(toy_root):
    """PVDA and alpha=0 runs for each seed; returns (rows, seconds)."""
    base = toy_profile()
    t0 = time.perf_counter()
    rows = {"pvda": [], "alpha0": []}
    for seed in SEEDS:
        cfg = with_seed(base, seed)
        rows["pvda"].append(trial(cfg, toy_root / "pvda" / f"seed_{seed}"))
        rows["alpha0"].append(trial(no_adversary(cfg), toy_root / "alpha0" / f"seed_{seed}"))
    return rows, time.perf_counter() - t0


def _median(rows, key):
    return statistics.median(r[key] for r in rows)


def test_criterion_07_alignment_effect(alignment_runs):
    rows, dt = alignment_runs
    r1_p, r1_b = _median(rows["pvda"], "uav_sat_single/R@1"), _median(rows["alpha0"], "uav_sat_single/R@1")
    pr_p, pr_b = _median(rows["pvda"], "view_probe"), _median(rows["alpha0"], "view_probe")
    gain = 100 * (r1_p - r1_b)
    per_seed = " ".join(f"{a['uav_sat_single/R@1']:.3f}/{b['uav_sat_single/R@1']:.3f}"
                        for a, b in zip(rows["pvda"], rows["alpha0"]))
    ok = gain >= 5.0 and pr_p <= 0.75 and pr_b >= 0.90 and dt <= 20 * 60
    verdict(7, ok, f"median R@1 PVDA {r1_p:.4f} vs alpha=0 {r1_b:.4f} (gain {gain:+.2f} pts, need >= +5); "
            f"view probe {pr_p:.3f} (need <= 0.75) vs {pr_b:.3f} (need >= 0.90); per-seed R@1 {per_seed}; "
            f"{dt / 60:.1f} min")


@pytest.fixture(scope="session")
def ablation_runs(alignment_runs, toy_root):
    rows, pvda_time = alignment_runs
    t0 = time.perf_counter()
    out = {Variant.PVDA.value: rows["pvda"]}
    for variant in (Variant.CONSTANT_ALPHA, Variant.NO_RESTART):
        out[variant.value] = []
        for seed in SEEDS:
            cfg = with_seed(toy_profile(), seed)
            cfg.schedule.variant = variant
            out[variant.value].append(trial(cfg, toy_root / variant.value / f"seed_{seed}", probe=False))
    return out, pvda_time / 2 + time.perf_counter() - t0


def test_criterion_08_ablation_direction(ablation_runs):
    runs, dt = ablation_runs
    ap = {v: _median(rows, "uav_sat_single/AP") for v, rows in runs.items()}
    ok = all(ap["PVDA"] >= ap[v] - 0.01 for v in ("CONSTANT_ALPHA", "NO_RESTART")) and dt <= 45 * 60
    verdict(8, ok, "median AP " + ", ".join(f"{v} {a:.4f}" for v, a in ap.items()) + f"; {dt / 60:.1f} min")


def test_criterion_09_multi_query_fusion(alignment_runs):
    rows, _ = alignment_runs
    t0 = time.perf_counter()
    cfg = with_seed(toy_profile(), SEEDS[0])
    encoder = load_encoder(rows["pvda"][0]["checkpoint"])
    evals = evaluate_encoder(encoder, build_datasets(cfg), ("uav_sat_single", "uav_sat_multi"))
    single, multi = evals["uav_sat_single"].report["AP"], evals["uav_sat_multi"].report["AP"]
    dt = time.perf_counter() - t0
    others = ", ".join(f"{r['uav_sat_multi/AP'] - r['uav_sat_single/AP']:+.4f}" for r in rows["pvda"])
    verdict(9, multi >= single and dt <= 120,
            f"seed-0 checkpoint AP single {single:.4f} multi {multi:.4f} (delta {multi - single:+.4f}); "
            f"all seeds deltas {others}; {dt:.1f}s")


def test_criterion_10_reproducibility(alignment_runs, toy_root):
    rows, dt7 = alignment_runs
    t0 = time.perf_counter()
    cfg = with_seed(toy_profile(), SEEDS[0])
    first = toy_root / "pvda" / f"seed_{SEEDS[0]}"
    again = toy_root / "repeat"
    trial(copy.deepcopy(cfg), again)
    same_log = (first / "train_log.csv").read_bytes() == (again / "train_log.csv").read_bytes()
    metrics = sorted(p.name for p in (first / "eval").glob("metrics_*.json"))
    same_metrics = bool(metrics) and all(
        (first / "eval" / n).read_bytes() == (again / "eval" / n).read_bytes() for n in metrics)
    dt = time.perf_counter() - t0
    verdict(10, same_log and same_metrics and dt <= 2 * dt7,
            f"train log identical {same_log}, metrics JSON identical {same_metrics} ({len(metrics)} files), "
            f"{dt:.0f}s")

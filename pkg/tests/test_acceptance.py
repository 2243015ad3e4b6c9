"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 1-4 are exact checks against independent oracles. Criteria 5 and 7-13
share a single desk-preset run built through the command-line interface, with
a second run in a fresh directory for the determinism check. Seed-averaged
criteria keep the upstream models of that run fixed and vary the seeds of the
models trained on top of them.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from mmjoints.analysis import basis_comparison, covariance_study
from mmjoints.cli import resolve_config, run
from mmjoints.cli.commands import TRAIN_STAGES, Context, _activity_set
from mmjoints.core import DatasetStats, reliability_score, sensing_score
from mmjoints.eval import ACTIVITY_MODES, EnrichedSet, activity_downstream, refine_downstream
from mmjoints.latent import decompose_pose
from mmjoints.latent.descriptor import MODES
from mmjoints.nn import cross_entropy, huber, kl_to_standard_normal, mse, opl, triplet
from mmjoints.simulator import ACTIVITIES
from mmjoints.stats import (
    DiagonalGaussian,
    GaussianMixture,
    assessment_matrix,
    component_assessment,
    hungarian,
    jensen_upper_bound,
    lap_loss,
    lap_loss_grad,
    mc_jeffrey,
)

SEEDS = range(5)
KINDS = ("Trained", "UpperOnly", "LowerOnly", "RandomInit")
BROKEN = ("UpperOnly", "LowerOnly", "RandomInit")
AFTER_DESCRIBE = ("refine", "recognize", "analyze", "report")


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# -- exact oracles --------------------------------------------------------------
def brute_force_assignment(cost):
    n = cost.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        total = math.fsum(cost[i, perm[i]] for i in range(n))
        if best is None or total < best:
            best, best_perm = total, list(perm)
    return best_perm, best


def random_mixture(rng, G, D):
    return GaussianMixture(rng.dirichlet(np.ones(G)), rng.normal(0, 1.5, (G, D)), rng.uniform(0.3, 2.0, (G, D)))


def central_difference(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def relative_error(analytic, numeric):
    return float((np.abs(analytic - numeric) / np.maximum(1e-7, np.abs(analytic) + np.abs(numeric))).max())


def test_criterion_01_divergence_bound(criteria):
    rng = np.random.default_rng(2024)
    n_pairs, D = 200, 4
    t0 = time.perf_counter()
    held = 0
    for k in range(n_pairs):
        p_s = DiagonalGaussian(rng.normal(size=D), rng.uniform(0.3, 2.0, D))
        p_g = random_mixture(rng, int(rng.integers(1, 5)), D)
        bound = jensen_upper_bound(p_s, p_g)[1]
        est, se = mc_jeffrey(p_s, p_g, 100_000, seed=k)
        held += bound >= est - 3 * se
    elapsed = time.perf_counter() - t0
    ok = held >= 0.99 * n_pairs and elapsed < 120
    criteria.record(1, "Jensen bound dominates Monte-Carlo Jeffrey divergence", ok,
                    f"{held}/{n_pairs} pairs, {elapsed:.1f}s")
    assert ok


def test_criterion_02_assignment_oracle(criteria):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    mismatches = 0
    for G in range(2, 7):
        for _ in range(100):
            est, tgt = random_mixture(rng, G, 3), random_mixture(rng, G, 3)
            a, b = est.triples(), tgt.triples()
            cost = np.array([[component_assessment(x, y) for y in b] for x in a])
            perm, total = brute_force_assignment(cost)
            h_perm, h_total = hungarian(cost)
            loss, matching = lap_loss(a, b)
            mismatches += not (list(h_perm) == perm and h_total == total and list(matching) == perm and loss == total)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    criteria.record(2, "Hungarian and matching loss equal exhaustive search", ok,
                    f"{mismatches} mismatches over 500 instances, {elapsed:.1f}s")
    assert ok


def _gradient_cases(rng):
    """Yield ``(name, analytic, numeric)`` for one random instance of every loss."""
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    yield "mse", mse(p, t)[1], central_difference(lambda: mse(p, t)[0], p)
    h = rng.normal(scale=2.0, size=(4, 3))
    yield "huber", huber(h, t)[1], central_difference(lambda: huber(h, t)[0], h)
    mu, sig = rng.normal(size=(3, 4)), rng.uniform(0.3, 2.0, (3, 4))
    _, dmu, dsig = kl_to_standard_normal(mu, sig)
    yield "kl", dmu, central_difference(lambda: kl_to_standard_normal(mu, sig)[0], mu)
    yield "kl", dsig, central_difference(lambda: kl_to_standard_normal(mu, sig)[0], sig)
    a, pos, neg = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    f = lambda: triplet(a, pos, neg, 1.0)[0]  # noqa: E731
    _, da, dp, dn = triplet(a, pos, neg, 1.0)
    for g, x in ((da, a), (dp, pos), (dn, neg)):
        yield "triplet", g, central_difference(f, x)
    logits, labels = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
    yield "cross_entropy", cross_entropy(logits, labels)[1], central_difference(
        lambda: cross_entropy(logits, labels)[0], logits)
    feats, classes = rng.normal(size=(8, 5)), np.array([0, 0, 1, 1, 2, 2, 0, 1])
    yield "opl", opl(feats, classes)[1], central_difference(lambda: opl(feats, classes)[0], feats)
    G = 3
    est, tgt = random_mixture(rng, G, 2), random_mixture(rng, G, 2)
    args = [est.weights.copy(), est.means.copy(), est.variances.copy(), tgt.weights, tgt.means, tgt.variances]
    _, perm, dphi, dmu_, dvar = lap_loss_grad(*args)
    fixed = lambda: assessment_matrix(*args)[np.arange(G), perm].sum()  # noqa: E731
    for k, g in ((0, dphi), (1, dmu_), (2, dvar)):
        yield "lap_composite", g, central_difference(fixed, args[k])


def test_criterion_03_gradients(criteria):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = {}
    for _ in range(20):
        for name, analytic, numeric in _gradient_cases(rng):
            worst[name] = max(worst.get(name, 0.0), relative_error(analytic, numeric))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120 and len(worst) == 7
    criteria.record(3, "loss gradients match central differences", ok,
                    ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items())) + f", {elapsed:.1f}s")
    assert ok


def test_criterion_04_descriptor_formulas(criteria):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    exact = True
    for psi_bar in (0.0, 0.37, 12.5, 1e4):
        exact &= sensing_score(psi_bar, DatasetStats(psi_bar=psi_bar)) == 0.5
    for torso in (1.0, 20.0, 57.3):
        exact &= reliability_score(0.0, DatasetStats(torso_bar=torso)) == 1.0
    stats = DatasetStats(psi_bar=3.2, torso_bar=20.0)
    psi = np.sort(rng.exponential(5.0, 10_000))
    dist = np.sort(rng.exponential(20.0, 10_000))
    xi, kappa = sensing_score(psi, stats), reliability_score(dist, stats)
    monotone = bool(np.all(np.diff(xi) >= 0) and np.all(np.diff(kappa) <= 0))
    bounded = bool(np.all((xi >= 0) & (xi <= 1)) and np.all((kappa >= 0) & (kappa <= 1)))
    elapsed = time.perf_counter() - t0
    ok = exact and monotone and bounded and elapsed < 5
    criteria.record(4, "sensing score midpoint, reliability at zero, monotone", ok,
                    f"exact={exact} monotone={monotone} bounded={bounded}, {elapsed:.2f}s")
    assert ok


# -- desk-preset run through the CLI ------------------------------------------------
def _cli(cmd, out, kind="Trained", stage=None):
    argv = [cmd, "--out", str(out)] + (["--stage", stage] if stage else [])
    code, result = run(argv, environ={"MMJOINTS_ESTIMATOR__KIND": kind})
    assert code == 0, (cmd, kind, stage)
    return result


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    out = root / "run"
    timings = {}
    t0 = time.perf_counter()
    _, timings["simulate"] = timed(_cli, "simulate", out)
    for stage in TRAIN_STAGES:
        _, timings[stage] = timed(_cli, "train", out, stage=stage)
    _, timings["describe"] = timed(_cli, "describe", out)
    for cmd in AFTER_DESCRIBE:
        _, timings[cmd] = timed(_cli, cmd, out)
    timings["full"] = time.perf_counter() - t0
    for kind in BROKEN:
        _cli("train", out, kind)
        _cli("describe", out, kind)
    return {"root": root, "out": out, "timings": timings}


def _context(desk_run, kind="Trained"):
    return Context(resolve_config(environ={"MMJOINTS_ESTIMATOR__KIND": kind}), desk_run["out"])


def _describe_report(desk_run, kind):
    return _context(desk_run, kind).run.read_json(f"reports/describe-{kind}.json")["splits"]["test"]


def _enriched(ctx, split):
    _, rows = ctx.run.read_enriched(f"enriched/{split}-{ctx.kind}.ndjson")
    return rows


def _enriched_set(rows):
    stack = lambda key: np.array([r[key] for r in rows], dtype=float)  # noqa: E731
    return EnrichedSet(stack("positions"), stack("gt_pose"), stack("xi"), stack("kappa"))


def test_criterion_05_basis_algebra(desk_run, criteria):
    ctx = _context(desk_run)
    pl = ctx.pipeline("generator")
    test = ctx.windows("test")
    F = pl.vae_.transform(test.poses)
    cmp = basis_comparison(F, pl.basis_, seed=0)
    coords = decompose_pose(F, pl.basis_)
    residual = float(np.abs(coords @ pl.basis_.matrix.T - F).max())
    t = desk_run["timings"]
    train_time = t["pose"] + t["signal"] + t["generator"]
    ok = cmp["max_abs_cosine"] < 0.05 and residual < 1e-6 and cmp["ratio"] >= 5 and train_time < 600
    criteria.record(5, "learned pose basis: orthogonality, round trip, reconstruction", ok,
                    f"max|cos| {cmp['max_abs_cosine']:.4f}, residual {residual:.1e}, ratio {cmp['ratio']:.1f}x "
                    f"(orthonormal floor {cmp['orthonormal_learned_error']:.1e} vs "
                    f"{cmp['orthonormal_random_error']:.1e}), training {train_time:.0f}s")
    assert ok


def test_criterion_06_covariance(desk_run, criteria):
    ctx = _context(desk_run)
    a = ctx.cfg["analysis"]
    up = ctx.windows(ctx.cfg["pipeline"]["upstream_split"])
    t0 = time.perf_counter()
    inst, dist = [], []
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(up), size=min(a["n_poses"], len(up)), replace=False))
        rep = covariance_study(up.poses[pick], a["n_samples"], a["n_pairs"], a["n_boot"], seed)
        inst.append(rep.instance.mean)
        dist.append(rep.distribution.mean)
    elapsed = time.perf_counter() - t0
    ok = np.mean(dist) > np.mean(inst) and elapsed < 600
    criteria.record(6, "distribution-level covariance exceeds instance-level", ok,
                    f"distribution {np.mean(dist):.3f} vs instance {np.mean(inst):.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_07_trained_descriptor_quality(desk_run, criteria):
    d = _describe_report(desk_run, "Trained")["descriptors"]
    full = desk_run["timings"]["full"]
    ok = d["wmape_xi"] < 10 and d["wmape_kappa"] < 10 and full < 3600
    criteria.record(7, "Trained estimator descriptor wMAPE below 10%", ok,
                    f"xi {d['wmape_xi']:.2f}%, kappa {d['wmape_kappa']:.2f}%, full pipeline {full / 60:.1f} min")
    assert ok


def test_criterion_08_broken_estimators(desk_run, criteria):
    rows = {k: _describe_report(desk_run, k)["descriptors"] for k in BROKEN}
    ok = all(d["wmape_xi"] < 10 and d["wmape_kappa"] < 10 for d in rows.values())
    criteria.record(8, "descriptor wMAPE below 10% for broken estimators", ok,
                    "; ".join(f"{k} xi {d['wmape_xi']:.2f}% kappa {d['wmape_kappa']:.2f}%" for k, d in rows.items()))
    assert ok


def test_criterion_09_ablation_ordering(desk_run, criteria):
    ctx = _context(desk_run)
    pl, est = ctx.pipeline("generator"), ctx.estimator()
    tr, te = ctx.windows(ctx.cfg["pipeline"]["head_split"]), ctx.windows("test")
    enc_tr, enc_te = pl.encode_windows(tr.windows), pl.encode_windows(te.windows)
    ptr, pte = est.predict(tr.windows), est.predict(te.windows)
    Y = pl.descriptor_targets(pte, te.poses, te.windows)
    gt_latent = pl.vae_.transform(te.poses)
    p_pred = pl.vae_.transform(pte)
    pre = float(np.mean((p_pred - gt_latent) ** 2))
    head_mse = {m: [] for m in MODES}
    surrogate = {"divergence": [], "signal": []}
    for seed in SEEDS:
        pl.fit_refiner("ablation", ptr, tr.poses, encoded=enc_tr, use_divergence=True, use_signal=False,
                       random_state=seed)
        surrogate["divergence"].append(float(np.mean((pl.refine("ablation", pte, encoded=enc_te) - gt_latent) ** 2)))
        pl.fit_refiner("ablation", ptr, tr.poses, encoded=enc_tr, random_state=seed)
        surrogate["signal"].append(float(np.mean((pl.refine("ablation", pte, encoded=enc_te) - gt_latent) ** 2)))
        f_tr = pl.descriptor_features("ablation", ptr, tr.windows, enc_tr)
        f_te = pl.descriptor_features("ablation", pte, te.windows, enc_te)
        for mode in MODES:
            pl.fit_descriptor("ablation", ptr, tr.poses, tr.windows, mode=mode, features=f_tr, random_state=seed)
            xi, kappa = pl.describe("ablation", pte, te.windows, features=f_te)
            head_mse[mode].append(float(np.mean((np.hstack([xi, kappa]) - Y) ** 2)))
    h = [np.mean(head_mse[m]) for m in MODES]
    s = [pre, np.mean(surrogate["divergence"]), np.mean(surrogate["signal"])]
    descriptor_ok = h[0] > h[1] > h[2]
    surrogate_ok = s[0] > s[1] > s[2]
    criteria.record(9, "ablation orderings for descriptor inputs and surrogate features",
                    descriptor_ok and surrogate_ok,
                    "descriptor MSE " + " > ".join(f"{v:.5f}" for v in h) + f" ({descriptor_ok}); "
                    "surrogate MSE " + " > ".join(f"{v:.4f}" for v in s) + f" ({surrogate_ok})")
    assert descriptor_ok and surrogate_ok


def test_criterion_10_downstream_refinement(desk_run, criteria):
    results = {}
    for kind in KINDS:
        ctx = _context(desk_run, kind)
        train, test = _enriched_set(_enriched(ctx, "train")), _enriched_set(_enriched(ctx, "test"))
        epochs = ctx.cfg["downstream"]["refine_epochs"]
        outs = [refine_downstream(train, test, "pose+descriptors", epochs=epochs, seed=s) for s in SEEDS]
        results[kind] = (outs[0]["before"].mpjpe, float(np.mean([o["after"].mpjpe for o in outs])))
    broken_ok = all(after <= 0.5 * before for before, after in (results[k] for k in BROKEN))
    trained_ok = results["Trained"][1] <= results["Trained"][0]
    criteria.record(10, "descriptor-augmented refinement of estimator output", broken_ok and trained_ok,
                    "; ".join(f"{k} {b:.2f} -> {a:.2f} cm" for k, (b, a) in results.items()))
    assert broken_ok and trained_ok


def test_criterion_11_activity_ordering(desk_run, criteria):
    ctx = _context(desk_run)
    d = ctx.cfg["downstream"]
    train, _, _ = _activity_set(_enriched(ctx, d["train_split"]), d["activity_window"])
    test, _, _ = _activity_set(_enriched(ctx, d["test_split"]), d["activity_window"])
    acc = {m: float(np.mean([activity_downstream(train, test, m, n_classes=len(ACTIVITIES),
                                                 epochs=d["activity_epochs"], seed=s)["accuracy"] for s in SEEDS]))
           for m in ACTIVITY_MODES}
    a = [acc[m] for m in ACTIVITY_MODES]
    ok = a[0] < a[1] <= a[2] <= a[3]
    criteria.record(11, "activity accuracy ordering across descriptor inputs", ok,
                    ", ".join(f"{m} {v:.2f}%" for m, v in acc.items()))
    assert ok


def test_criterion_12_latency(desk_run, criteria):
    timing = _context(desk_run).run.read_json("logs/describe-Trained.timing.json")
    mean_ms = float(np.mean(timing["test"]["per_frame_s"])) * 1e3
    ok = mean_ms < 100
    criteria.record(12, "single-frame describe latency", ok,
                    f"mean {mean_ms:.2f} ms, max {timing['test']['max_ms']:.2f} ms over {timing['test']['frames']} frames")
    assert ok


def test_criterion_13_determinism(desk_run, criteria):
    out, again = desk_run["out"], desk_run["root"] / "again"
    _cli("simulate", again)
    _cli("train", again)
    _cli("describe", again)
    for cmd in AFTER_DESCRIBE:
        _cli(cmd, again)
    compared, differing = 0, []
    for folder, _, files in os.walk(again):
        for f in files:
            rel = os.path.relpath(os.path.join(folder, f), again)
            if rel.endswith(".timing.json"):
                continue
            compared += 1
            if (out / rel).read_bytes() != (again / rel).read_bytes():
                differing.append(rel)
    ok = compared > 0 and not differing
    criteria.record(13, "byte-identical artifacts on re-run", ok,
                    f"{compared} files compared, differing: {differing or 'none'}")
    assert ok

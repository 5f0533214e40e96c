"""Acceptance checks: one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``.  Criteria 5 and 6
train 25 full-length runs and take several minutes on one core.
"""

import csv
import math
import time

import numpy as np
import pytest

from tdmda import autodiff as ad
from tdmda.autodiff import Tensor
from tdmda.cli import main
from tdmda.config import TrainConfig, dump_config
from tdmda.losses import Batch, classifier_loss, domain_bce, generator_loss, total_objective
from tdmda.nn import GradReverse, Mlp, build_models, init_params
from tdmda.uncertainty import features_and_bundle, mc_entropy

from gradcases import CASES, check_case, entropy_pipeline_case
from oracles import FD_EPS, central_difference, naive_bce, naive_cross_entropy, naive_mse, rel_error

GRAD_TOL = 1e-4
INSTANCES = 100
SEEDS = [0, 1, 2, 3, 4]
TREND_REGIMES = ("source-only", "dann", "tdmda")
ABLATION_ONLY = ("pmda", "cmda")


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------


def _grad_reverse_case(rng):
    """Reversal has no finite-difference analogue; compare with -lam times the plain derivative."""
    x0 = rng.uniform(-2, 2, size=(int(rng.integers(1, 4)), int(rng.integers(1, 5))))
    w = rng.uniform(-1, 1, size=x0.shape)
    lam = float(rng.uniform(0, 2))
    x = Tensor(x0, requires_grad=True)
    analytic = ad.backward(ad.sum(ad.multiply(ad.grad_reverse(ad.square(x), lam), w))).of(x)
    numeric = central_difference(lambda v: float(np.sum(v**2 * w)), x0, FD_EPS)
    return rel_error(analytic, -lam * numeric)


def test_criterion_1_gradient_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(20240101)
    worst = {kind: max(check_case(kind, rng) for _ in range(INSTANCES)) for kind in CASES}
    worst["grad_reverse"] = max(_grad_reverse_case(rng) for _ in range(INSTANCES))
    worst["entropy_pipeline"] = max(entropy_pipeline_case(rng) for _ in range(INSTANCES))
    elapsed = time.perf_counter() - start
    uncovered = set(ad.OPS) - set(worst)
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    ok = not uncovered and not bad and elapsed < 30
    detail = (
        f"{len(worst)} kinds x {INSTANCES} instances, worst rel err {max(worst.values()):.2e} "
        f"({max(worst, key=worst.get)}), {elapsed:.1f}s"
    )
    if uncovered:
        detail += f", uncovered ops {sorted(uncovered)}"
    if bad:
        detail += f", over tolerance {bad}"
    verdict(capsys, 1, ok, detail)


# ---------------------------------------------------------------------------
# 2. uncertainty invariants
# ---------------------------------------------------------------------------


def test_criterion_2_uncertainty_invariants(capsys):
    rng = np.random.default_rng(7)
    draws = 0
    failures = []
    masked_total = 0
    worst_sum = 0.0
    worst_masked = 0.0
    for m in range(1000):
        d, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        rate = float(rng.uniform(0.05, 0.8))
        models = build_models(d, k, rate, seed=m)
        x = rng.normal(size=(10, d)) * rng.uniform(0.1, 10)
        T = int(rng.integers(1, 9))
        mc_seed = int(rng.integers(0, 2**31))
        f_values, b = features_and_bundle(models, x, T, np.random.default_rng(mc_seed))
        draws += len(x)

        # masks recomputed from an independent gradient pass with the same dropout stream
        f = Tensor(f_values, requires_grad=True)
        _, u = mc_entropy(f, models.classifier, T, np.random.default_rng(mc_seed))
        g = ad.backward(ad.sum(u)).of(f)
        masked = f_values * -g < 0
        masked_total += int(masked.sum())

        if not (np.all(b.entropy_u >= 0) and np.all(b.entropy_u <= math.log(k) + 1e-12)):
            failures.append(f"U out of [0, ln {k}] at draw {m}")
        ct, cg = b.cmap_target, b.cmap_generated
        if not (np.all(cg > 1) and np.all(cg < 2)):
            failures.append(f"Cg outside (1,2) at draw {m}")
        if not (np.all(ct[~masked] > 1) and np.all(ct < 2)):
            failures.append(f"Ct outside (1,2) on unmasked coordinates at draw {m}")
        if masked.any():
            worst_masked = max(worst_masked, float((ct[masked] - 1).max()))
        worst_sum = max(worst_sum, float(np.abs((ct - 1).sum(axis=1) - 1).max()),
                        float(np.abs((cg - 1).sum(axis=1) - 1).max()))
    if worst_sum > 1e-9:
        failures.append(f"sum(map - 1) off by {worst_sum:.1e}")
    if not worst_masked < 1e-12:
        failures.append(f"masked weight {worst_masked:.1e}")
    detail = (
        f"{draws} draws; max |sum(map-1)-1| {worst_sum:.1e}; {masked_total} masked coordinates, "
        f"max weight {worst_masked:.1e} (masked Ct coordinates equal 1, so Ct is checked in (1,2) off the mask)"
    )
    if failures:
        detail += "; " + "; ".join(failures[:5])
    verdict(capsys, 2, not failures, detail)


# ---------------------------------------------------------------------------
# 3. gradient reversal
# ---------------------------------------------------------------------------


def test_criterion_3_grl_contract(capsys):
    rng = np.random.default_rng(3)
    checked = 0
    mismatches = []
    for lam in (0.0, 0.5, 1.0, 2.0):
        for trial in range(25):
            head = Mlp([6, 8, 1], output_activation="sigmoid")
            init_params(head, trial)
            x0 = rng.normal(size=(5, 6))
            w = rng.normal(size=(5, 1))
            x = Tensor(x0, requires_grad=True)
            plain = ad.backward(ad.sum(ad.multiply(head(x), w))).of(x)
            x = Tensor(x0, requires_grad=True)
            rev = ad.backward(ad.sum(ad.multiply(head(GradReverse(lam)(x)), w))).of(x)
            checked += 1
            if not np.array_equal(rev, -lam * plain):
                mismatches.append((lam, trial))
            if not np.array_equal(GradReverse(lam)(Tensor(x0)).data, x0):
                mismatches.append((lam, trial, "forward"))
    verdict(capsys, 3, not mismatches,
            f"{checked} checks over lambda in {{0, 0.5, 1, 2}}, exact elementwise equality; mismatches {mismatches[:3]}")


# ---------------------------------------------------------------------------
# 4. stop-gradient
# ---------------------------------------------------------------------------


def _net_grad(grads, net):
    return sum(float(np.abs(grads.of(p)).sum()) for _, p in net.parameters())


def test_criterion_4_stop_gradient(capsys):
    rng = np.random.default_rng(4)
    problems = []
    trials = 20
    for t in range(trials):
        models = build_models(2, int(rng.integers(2, 4)), 0.5, seed=t)
        k = models.classifier.dims[-1]
        batch = Batch(rng.normal(size=(16, 2)), rng.integers(0, k, size=16), rng.normal(size=(16, 2)) + 1)
        _, _, parts = total_objective(batch, models, TrainConfig(), rng, ramp=float(rng.uniform(0.1, 1)))
        g = ad.backward(parts["l_g"])
        leaked = [n for n, p in (*models.extractor.parameters(), *models.classifier.parameters())
                  if g.has(p) and np.any(g.of(p) != 0)]
        if leaked:
            problems.append(f"L_g reaches {leaked[0]}")
        if _net_grad(g, models.generator) == 0:
            problems.append("L_g misses G")
        g = ad.backward(parts["l_dc"])
        for net in (models.generator, models.extractor, models.disc_cmap):
            if _net_grad(g, net) == 0:
                problems.append(f"L_dc gives zero gradient to {net.name}")
    verdict(capsys, 4, not problems,
            f"{trials} random models/batches: L_g zero on F and C, L_dc nonzero on G, F and Dc; {problems[:3]}")


# ---------------------------------------------------------------------------
# 5 and 6. trend reproduction and ablation structure
# ---------------------------------------------------------------------------


def _ablate(root, regimes, name):
    out = root / f"{name}.csv"
    start = time.perf_counter()
    code = main(["ablate", "--config", str(root / "default.ini"), "--source", str(root / "src.csv"),
                 "--target", str(root / "tgt.csv"), "--seeds", ",".join(map(str, SEEDS)),
                 "--regimes", ",".join(regimes), "--out", str(out), "--quiet"])
    elapsed = time.perf_counter() - start
    assert code == 0
    with open(out, newline="") as fh:
        return list(csv.DictReader(fh)), elapsed


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert main(["gen", "two-moons", "--n", "1000", "--noise", "0.1", "--seed", "7",
                 "--out", str(root / "src.csv"), "--quiet"]) == 0
    assert main(["gen", "rotate", "--angle", "35", "--in", str(root / "src.csv"),
                 "--out", str(root / "tgt.csv"), "--quiet"]) == 0
    (root / "default.ini").write_text(dump_config(TrainConfig()))
    trend_rows, trend_time = _ablate(root, TREND_REGIMES, "trend")
    extra_rows, extra_time = _ablate(root, ABLATION_ONLY, "extra")
    return {"trend": trend_rows, "trend_time": trend_time, "all": trend_rows + extra_rows,
            "total_time": trend_time + extra_time}


def _medians(rows, column):
    out = {}
    for r in rows:
        out.setdefault(r["regime"], []).append(float(r[column]))
    return {k: float(np.median(v)) for k, v in out.items()}


@pytest.mark.slow
def test_criterion_5_trend(capsys, sweep):
    acc = _medians(sweep["trend"], "target_acc")
    ent = _medians(sweep["trend"], "target_entropy")
    checks = {
        "source-only < dann": acc["source-only"] < acc["dann"],
        "dann <= tdmda": acc["dann"] <= acc["tdmda"],
        "tdmda - source-only >= 5pp": acc["tdmda"] - acc["source-only"] >= 0.05,
        "entropy tdmda < dann": ent["tdmda"] < ent["dann"],
        "runtime < 10 min": sweep["trend_time"] < 600,
    }
    detail = (
        "median target acc " + ", ".join(f"{r} {acc[r]:.3f}" for r in TREND_REGIMES)
        + "; median target entropy " + ", ".join(f"{r} {ent[r]:.4f}" for r in TREND_REGIMES)
        + f"; {len(sweep['trend'])} runs in {sweep['trend_time']:.0f}s; "
        + ", ".join(f"{k}: {'ok' if v else 'NO'}" for k, v in checks.items())
    )
    verdict(capsys, 5, all(checks.values()), detail)


@pytest.mark.slow
def test_criterion_6_ablation(capsys, sweep):
    acc = _medians(sweep["all"], "target_acc")
    regimes = sorted(acc)
    expected = sorted(TREND_REGIMES + ABLATION_ONLY)
    rival = max(acc["pmda"], acc["cmda"])
    ok = regimes == expected and len(sweep["all"]) == 25 and acc["tdmda"] >= rival - 0.01
    dominance = "dominates" if acc["tdmda"] >= rival else "within 1pp" if ok else "behind"
    detail = (
        "median target acc " + ", ".join(f"{r} {acc[r]:.3f}" for r in ("pmda", "cmda", "tdmda"))
        + f"; tdmda {dominance} (gate: >= {rival - 0.01:.3f}); regimes {regimes}; "
        + f"all 25 runs in {sweep['total_time']:.0f}s"
    )
    verdict(capsys, 6, ok, detail)


# ---------------------------------------------------------------------------
# 7. determinism
# ---------------------------------------------------------------------------


def test_criterion_7_determinism(capsys, tmp_path, monkeypatch):
    import shutil

    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.ini").write_text(dump_config(TrainConfig(epochs=2, eval_every=3, mc_samples=3, eval_mc_samples=8)))
    commands = [
        ["gen", "two-moons", "--n", "300", "--seed", "3", "--out", "out/src.csv"],
        ["gen", "rotate", "--angle", "35", "--in", "out/src.csv", "--out", "out/tgt.csv"],
        ["gen", "blobs", "--seed", "2", "--out", "out/blobs.csv"],
        ["gen", "shift", "--in", "out/blobs.csv", "--swap-fraction", "0.5", "--out", "out/shift.csv"],
        *(["train", "--config", "c.ini", "--source", "out/src.csv", "--target", "out/tgt.csv",
           "--regime", r, "--seed", "11", "--out", f"out/{r}"]
          for r in ("source-only", "dann", "pmda", "cmda", "tdmda")),
        *(["export", "--checkpoint", "out/tdmda/checkpoint.json", "--dataset", "out/tgt.csv", "--what", w,
           "--T", "8", "--seed", "4", "--out", f"out/{w}.csv"]
          for w in ("features", "probs", "cmaps", "uncertainty")),
        ["ablate", "--config", "c.ini", "--source", "out/src.csv", "--target", "out/tgt.csv", "--seeds", "0", "1",
         "--out", "out/ablate.csv", "--summary", "out/summary.csv"],
    ]
    snapshots = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "out", ignore_errors=True)
        (tmp_path / "out").mkdir()
        for cmd in commands:
            assert main(cmd + ["--quiet"]) == 0, cmd
        snapshots.append({str(p.relative_to(tmp_path)): p.read_bytes()
                          for p in sorted((tmp_path / "out").rglob("*")) if p.is_file()})
    a, b = snapshots
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    verdict(capsys, 7, not differing,
            f"{len(commands)} commands run twice, {len(a)} output files compared byte for byte; "
            f"differing {differing[:3]}")


# ---------------------------------------------------------------------------
# 8. loss oracles
# ---------------------------------------------------------------------------


def test_criterion_8_loss_oracles(capsys):
    rng = np.random.default_rng(8)
    worst = {"l_c": 0.0, "l_d": 0.0, "l_g": 0.0, "j_total": 0.0}
    for trial in range(200):
        n, k = int(rng.integers(1, 20)), int(rng.integers(2, 6))
        logits = rng.normal(size=(n, k)) * rng.uniform(0.1, 20)
        labels = rng.integers(0, k, size=n)
        worst["l_c"] = max(worst["l_c"], abs(classifier_loss(Tensor(logits), labels).item()
                                             - naive_cross_entropy(logits, labels)))
        p = rng.uniform(0, 1, size=(n, 1))
        d = rng.integers(0, 2, size=n)
        worst["l_d"] = max(worst["l_d"], abs(domain_bce(Tensor(p), d).item() - naive_bce(p, d)))
        a, b = rng.uniform(1, 2, size=(n, k)), rng.uniform(1, 2, size=(n, k))
        worst["l_g"] = max(worst["l_g"], abs(generator_loss(Tensor(a), Tensor(b)).item() - naive_mse(a, b)))

    for trial in range(50):
        models = build_models(2, 2, 0.5, seed=trial)
        lf, lp, lc = rng.uniform(0, 2, size=3)
        ramp = float(rng.uniform(0, 1))
        batch = Batch(rng.normal(size=(12, 2)), rng.integers(0, 2, size=12), rng.normal(size=(12, 2)))
        _, rep, parts = total_objective(batch, models, TrainConfig(lambda_f=lf, lambda_p=lp, lambda_c=lc),
                                        rng, ramp)
        dom = np.r_[np.ones(12), np.zeros(12)]
        f, z = parts["features"].data, parts["logits"].data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        cg = parts["cmap_generated"].data
        expected = (
            naive_cross_entropy(z[:12], batch.y_source)
            + naive_mse(cg, parts["cmap_target"].data)
            + lf * ramp * naive_bce(models.disc_feature(f).data, dom)
            + lp * ramp * naive_bce(models.disc_prob(e / e.sum(axis=1, keepdims=True)).data, dom)
            + lc * ramp * naive_bce(models.disc_cmap(np.hstack([cg, f])).data, dom)
        )
        worst["j_total"] = max(worst["j_total"], abs(rep.j_total - expected))
    ok = all(v <= 1e-12 for v in worst.values())
    verdict(capsys, 8, ok, "max abs deviation from naive formulas: "
            + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))

"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import json
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memstab.cli import main as cli_main  # noqa: E402
from memstab.config import default_config_path, load_config, validate  # noqa: E402
from memstab.detection import DetectionConfig, auc, calibrate_threshold, memorization_score, tpr_at_fpr  # noqa: E402
from memstab.harness import Lab, paired_overhead, time_trajectories  # noqa: E402
from memstab.metrics import measure_order, replica_rate  # noqa: E402
from memstab.mitigation import MitigationPolicy, rescale  # noqa: E402
from memstab.sampler import ddim_step, reconstruct_z0  # noqa: E402
from memstab.stability import StabilityProfile, collect_profile, region, violation_rate, zscore  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, name: str, ok: bool, detail: str):
    RESULTS[n] = (ok, detail)
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}"
    capman = _capture.get("capman")
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


_capture: dict = {}


@pytest.fixture(autouse=True)
def _uncaptured(request):
    _capture["capman"] = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _capture.pop("capman", None)


_LAB = None


def lab() -> Lab:
    global _LAB
    if _LAB is None:
        _LAB = Lab(load_config())
    return _LAB


def smem(trs, prof, s):
    c = DetectionConfig(prof, s)
    return np.array([memorization_score(t, c) for t in trs])


# 1 -------------------------------------------------------------------------

def test_c01_solver_fidelity():
    t0 = time.perf_counter()
    p_euler = measure_order("euler")
    p_ab4 = measure_order("ab4")
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        z, e = rng.standard_normal(4), rng.standard_normal(4)
        a, b = sorted(rng.uniform(0.01, 1.0, 2))
        # substitution oracles in exact rational arithmetic, square roots from math
        sa, sb = Fraction(math.sqrt(a)), Fraction(math.sqrt(b))
        s1a, s1b = Fraction(math.sqrt(1 - a)), Fraction(math.sqrt(1 - b))
        z0_ref = [(Fraction(zi) - s1a * Fraction(ei)) / sa for zi, ei in zip(z, e)]
        step_ref = [sb * x + s1b * Fraction(ei) for x, ei in zip(z0_ref, e)]
        worst = max(worst, float(np.max(np.abs(reconstruct_z0(z, e, a) - np.array([float(x) for x in z0_ref])) /
                                        np.maximum(1.0, np.abs([float(x) for x in z0_ref])))))
        worst = max(worst, float(np.max(np.abs(ddim_step(z, e, a, b) - np.array([float(x) for x in step_ref])) /
                                        np.maximum(1.0, np.abs([float(x) for x in step_ref])))))
    hand = abs(reconstruct_z0(np.array([2.0, 0]), np.array([1.0, 0]), 0.25)[0] - (2 - math.sqrt(0.75)) / 0.5)
    hand = max(hand, abs(ddim_step(np.array([2.0, 0]), np.array([1.0, 0]), 0.25, 0.5)[0]
                         - math.sqrt(0.5) * ((2 - math.sqrt(0.75)) / 0.5 + 1)))
    worst = max(worst, hand)
    dt = time.perf_counter() - t0
    ok = p_ab4 >= 3.7 and abs(p_euler - 1.0) <= 0.1 and worst <= 1e-12 and dt < 5
    report(1, "solver fidelity", ok,
           f"AB4 order {p_ab4:.3f} (>=3.7), Euler order {p_euler:.3f} (1+-0.1), "
           f"max oracle error {worst:.1e} (<=1e-12), {dt:.2f}s (<5s)")


# 2 -------------------------------------------------------------------------

def test_c02_concentration():
    t0 = time.perf_counter()
    bound = 2 * math.exp(-3.0 ** 2 / 2) + 0.01
    parts, ok = [], True
    for sampler in ("ddim", "pndm"):
        L = lab()
        prof = collect_profile(L.run("normal", sampler, L.reference_seeds(50)), 3.0)
        held = L.run("normal", sampler, L.eval_seeds(200))
        vd, vz = violation_rate(prof, held, "delta"), violation_rate(prof, held, "z0")
        ok &= vd <= bound and vz <= bound
        parts.append(f"{sampler} delta {vd:.4f} z0 {vz:.4f}")
    dt = time.perf_counter() - t0
    ok &= dt < 30
    report(2, "Thm1/Thm2 concentration", ok, f"{'; '.join(parts)} (<= {bound:.4f}), {dt:.1f}s (<30s)")


# 3 -------------------------------------------------------------------------

def test_c03_detection():
    t0 = time.perf_counter()
    L = lab()
    prof = collect_profile(L.run("normal", "ddim", L.reference_seeds(50)), 3.0)
    sn = smem(L.run("normal", "ddim", L.eval_seeds(200)), prof, 3)
    ss = smem(L.run("strong", "ddim", L.eval_seeds(200)), prof, 3)
    sm = smem(L.run("mild", "ddim", L.eval_seeds(200)), prof, 3)
    a_s, t_s, a_m = auc(ss, sn), tpr_at_fpr(ss, sn, 0.01), auc(sm, sn)
    dt = time.perf_counter() - t0
    ok = a_s >= 0.99 and t_s >= 0.95 and a_m >= 0.90 and dt < 60
    report(3, "detection", ok, f"strong AUC {a_s:.4f} (>=0.99) TPR@1% {t_s:.3f} (>=0.95); "
                               f"mild AUC {a_m:.4f} (>=0.90); {dt:.1f}s (<60s)")


# 4 -------------------------------------------------------------------------

def test_c04_pndm_amplification():
    # scored over every generation step: AB4's extrapolation only engages from step 3
    L = lab()
    T = L.cfg.T
    med, aucs = {}, {}
    for sampler in ("ddim", "pndm"):
        prof = L.profile(sampler)
        sn = smem(L.run("normal", sampler, L.eval_seeds(200)), prof, T)
        ss = smem(L.run("strong", sampler, L.eval_seeds(200)), prof, T)
        med[sampler] = float(np.median(ss))
        aucs[sampler] = auc(ss, sn)
    ok = med["pndm"] > med["ddim"] and abs(aucs["pndm"] - aucs["ddim"]) <= 0.01
    report(4, "PNDM amplification", ok,
           f"median S_mem(s={T}) pndm {med['pndm']:.1f} > ddim {med['ddim']:.1f}; "
           f"AUC diff {abs(aucs['pndm'] - aucs['ddim']):.4f} (<=0.01)")


# 5 and 6 -------------------------------------------------------------------

def _replicas(scenario, policy=None, sampler="ddim"):
    L = lab()
    prof = L.profile(sampler) if policy is not None else None
    trs = L.run(scenario, sampler, L.eval_seeds(200), prof, policy)
    rate = replica_rate([t.final_latent for t in trs], L.cfg.mem_target(scenario), L.replica_epsilon(scenario))
    return rate, sum(t.diverged for t in trs)


def test_c05_mitigation():
    t0 = time.perf_counter()
    pol = lab().cfg.policy
    s_plain, _ = _replicas("strong")
    s_mit, s_div = _replicas("strong", pol)
    m_plain, _ = _replicas("mild")
    m_mit, m_div = _replicas("mild", pol)
    dt = time.perf_counter() - t0
    ok = s_plain >= 0.9 and s_mit == 0.0 and m_mit <= 0.02 and s_div == 0 and m_div == 0 and dt < 60
    report(5, "mitigation", ok,
           f"strong {s_plain:.3f} (>=0.9) -> {s_mit:.3f} (=0); mild {m_plain:.3f} -> {m_mit:.3f} (<=0.02); "
           f"diverged {s_div + m_div} (=0); {dt:.1f}s (<60s)")


def test_c06_ablation():
    base = lab().cfg.policy
    z_only = MitigationPolicy(base.tau_mild, base.tau_strong, base.mild_steps_k, True, False)
    both = MitigationPolicy(base.tau_mild, base.tau_strong, base.mild_steps_k, True, True)
    r_z, _ = _replicas("strong", z_only)
    r_b, _ = _replicas("strong", both)
    ok = r_z > 0 and r_b == 0.0
    report(6, "clamp ablation", ok, f"strong z-clamp only {r_z:.3f} (>0); both clamps {r_b:.3f} (=0)")


# 7 -------------------------------------------------------------------------

def test_c07_overhead():
    L = lab()
    prof = L.profile("ddim")
    plain, mit = time_trajectories(L, "ddim", prof, 20)
    ov = paired_overhead(plain, mit)
    report(7, "overhead", ov < 0.05,
           f"median per-trajectory overhead {ov * 100:.2f}% over 20 normal runs (<5%); "
           f"median {np.median(plain) * 1e3:.2f} ms -> {np.median(mit) * 1e3:.2f} ms")


# 8 -------------------------------------------------------------------------

def test_c08_multiple_testing():
    L = lab()
    prof = L.profile("ddim")
    trs = L.run("normal", "ddim", L.eval_seeds(500, offset=20_000))
    meds = [float(np.median(smem(trs, prof, s))) for s in (1, 3, 10, 25, 50)]
    ok = all(b >= a for a, b in zip(meds, meds[1:]))
    report(8, "multiple-testing drift", ok,
           "median S_mem over 500 normals at s=1,3,10,25,50: " + ", ".join(f"{m:.3f}" for m in meds))


# 9 -------------------------------------------------------------------------

def test_c09_wen_relation():
    # guidance-dominated: the guidance term w*||eps_c - eps_u|| is at least ||eps_u||
    L = lab()
    w = L.cfg.guidance_scale
    out, ok = [], True
    for sc in ("strong", "mild"):
        d, m = [], []
        for t in L.run(sc, "ddim", L.eval_seeds(200)):
            for r in t.records[1:]:
                if w * r.guidance_norm >= r.eps_uncond_norm:
                    d.append(r.update_norm)
                    m.append(w * r.guidance_norm)
        rho = float(np.corrcoef(d, m)[0, 1])
        ok &= rho >= 0.9
        out.append(f"{sc} r={rho:.3f} over {len(d)} steps")
    report(9, "Wen relation", ok, "; ".join(out) + " (>=0.9)")


# 10 ------------------------------------------------------------------------

def test_c10_cli_determinism(tmp_path):
    r = json.loads(default_config_path().read_text())
    r["stability"]["reference_count"] = 20
    r["detection"].update(step_grid=[1, 3, 50], reference_sizes=[10, 20], seed_groups=[1, 2])
    r["experiment"].update(eval_count=40, timing_count=2)
    small = tmp_path / "small.json"
    small.write_text(json.dumps(r))

    def run_twice(args_fn):
        outs = []
        for tag in ("a", "b"):
            d = tmp_path / tag
            d.mkdir(exist_ok=True)
            assert cli_main(args_fn(d)) == 0
            outs.append(d)
        return outs

    checked, bad = 0, []

    def compare(paths):
        nonlocal checked
        a, b = paths
        for f in sorted(a.rglob("*")):
            if f.is_file():
                checked += 1
                if f.read_bytes() != (b / f.relative_to(a)).read_bytes():
                    bad.append(str(f.relative_to(a)))

    compare(run_twice(lambda d: ["calibrate", "--out", str(d / "cal" / "profile.json"),
                                 "--trajectories-out", str(d / "cal" / "ref")]))
    for sampler in ("euler", "ddim", "pndm"):
        compare(run_twice(lambda d: ["sample", "--sampler", sampler, "--scenario", "strong", "--seed", "7",
                                     "--mitigate", "--profile", str(tmp_path / "a" / "cal" / "profile.json"),
                                     "--out", str(d / "s" / f"{sampler}.jsonl")]))
    compare(run_twice(lambda d: ["detect", "--profile", str(d / "cal" / "profile.json"),
                                 "--trajectories", str(d / "cal" / "ref" / "*.jsonl"),
                                 "--out", str(d / "det" / "detect.csv")]))
    for name in ("stability", "detection", "mitigation"):
        compare(run_twice(lambda d: ["experiment", name, "--config", str(small), "--out", str(d / "exp" / name),
                                     "--no-timing"]))
    report(10, "CLI determinism", not bad,
           f"{checked} output files compared across repeated runs, {len(bad)} differ {bad[:3]}")


# 11 ------------------------------------------------------------------------

def test_c11_unit_oracles():
    fails = []

    def check(name, cond):
        if not cond:
            fails.append(name)

    v = np.array([3.0, 4.0])
    check("rescale (3,4)->10", rescale(v, 10.0).tolist() == [6.0, 8.0])
    check("rescale identity", np.allclose(rescale(v, 5.0), v, rtol=1e-15, atol=0))
    rng = np.random.default_rng(11)
    for _ in range(200):
        x = rng.standard_normal(6) * rng.uniform(0.1, 10)
        tgt = rng.uniform(0.01, 100)
        y = rescale(x, tgt)
        check("rescale norm", abs(np.linalg.norm(y) - tgt) <= 1e-12 * max(tgt, 1))
        check("rescale collinear", abs(np.dot(x, y) / np.linalg.norm(x) / np.linalg.norm(y) - 1) <= 1e-12)
    try:
        rescale(np.zeros(2), 1.0)
        fails.append("rescale zero")
    except ValueError:
        pass

    f = lambda x: np.full(3, float(x))  # noqa: E731
    p = StabilityProfile(3.0, 2, f(2), f(1), f(10), f(1), f(2), f(0.5))
    check("region floor", (region(p, "delta", 1).lower, region(p, "delta", 1).upper) == (0.0, 5.0))
    check("region direct", (region(p, "latent", 1).lower, region(p, "latent", 1).upper) == (7.0, 13.0))
    p0 = StabilityProfile(3.0, 2, f(1), f(0), f(1), f(0), f(1), f(0))
    check("region degenerate", (region(p0, "delta", 1).lower, region(p0, "delta", 1).upper) == (1.0, 1.0))
    check("zscore at mu", zscore(p, "z0", 1, 2.0) == 0.0)
    check("zscore example", zscore(p, "z0", 1, 4.0) == 4.0)
    check("zscore boundary", zscore(p, "delta", 1, region(p, "delta", 1).upper) == 3.0)

    check("auc example", auc([3, 5], [1, 4]) == 0.75)
    check("auc separated", auc([5, 6], [1, 2]) == 1.0)
    check("auc ties", auc([1, 2, 3], [1, 2, 3]) == 0.5)
    for _ in range(50):
        m, n = rng.integers(0, 5, 7), rng.integers(0, 5, 9)
        brute = np.mean([[1.0 if a > b else 0.5 if a == b else 0.0 for b in n] for a in m])
        check("auc brute force", abs(auc(m, n) - brute) < 1e-12)
        check("auc swap", abs(auc(n, m) - (1 - brute)) < 1e-12)

    check("threshold 1..100", calibrate_threshold(np.arange(1, 101), 0.01) == 100)
    check("threshold constant", calibrate_threshold([4.2] * 100, 0.01) == 4.2)
    check("threshold fpr .5", calibrate_threshold([1, 2, 3, 4], 0.5) == 3)
    for n in (100, 333):
        x = rng.standard_normal(n)
        enum = min(v for v in x if (x > v).sum() <= 0.05 * (n - 1) + 1e-9)
        check("threshold enumeration", calibrate_threshold(x, 0.05) == enum)
    report(11, "unit/property oracles", not fails, f"{len(fails)} failing oracle checks {sorted(set(fails))[:4]}")


def test_shipped_config_is_valid():
    validate(json.loads(default_config_path().read_text()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

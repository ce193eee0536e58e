"""Desk-scale experiments: stability concentration, detection, and mitigation.

Each ``exp_*`` function returns a JSON-serialisable report and, given an output
directory, writes ``report.json`` plus the CSV tables described in the README.
Reports are pure functions of the config; wall-clock timings are kept apart in
``timing.json`` and ``outcome.csv`` so that everything else is byte-reproducible.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from memstab.config import ExperimentConfig
from memstab.detection import DetectionConfig, auc, calibrate_threshold, memorization_score, tpr_at_fpr
from memstab.metrics import default_replica_epsilon, overhead
from memstab.mitigation import MitigationHook, MitigationPolicy
from memstab.sampler import CHANNELS, Trajectory, initial_latent, sample_trajectory
from memstab.score import GuidanceConfig
from memstab.schedule import NoiseSchedule
from memstab.stability import (StabilityProfile, collect_profile, region, trajectory_violation_fraction,
                               violation_rate)

log = logging.getLogger(__name__)

MEMORIZED = ("mild", "strong")


class ScenarioConstructionError(RuntimeError):
    """A memorized scenario failed to produce the signal it was built to produce."""


def _run_chunk(args):
    sampler, schedule, guidance, seeds, scenario, profile, policy = args
    out = []
    for s in seeds:
        hook = MitigationHook(profile, policy) if profile is not None else None
        out.append(sample_trajectory(sampler, schedule, guidance, initial_latent(s, guidance.dimension),
                                     hook, s, scenario))
    return out


def run_batch(schedule: NoiseSchedule, guidance: GuidanceConfig, sampler: str, seeds: Sequence[int],
              scenario: str = "", profile: Optional[StabilityProfile] = None,
              policy: Optional[MitigationPolicy] = None, jobs: int = 1) -> list[Trajectory]:
    """Sample one trajectory per seed, optionally mitigated; order follows ``seeds``."""
    seeds = [int(s) for s in seeds]
    if policy is None and profile is not None:
        policy = MitigationPolicy()
    if jobs <= 1 or len(seeds) < 2 * jobs:
        return _run_chunk((sampler, schedule, guidance, seeds, scenario, profile, policy))
    chunks = [seeds[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(jobs) as pool:
        parts = list(pool.map(_run_chunk, [(sampler, schedule, guidance, c, scenario, profile, policy)
                                           for c in chunks]))
    by_seed = {tr.seed: tr for part in parts for tr in part}
    return [by_seed[s] for s in seeds]


class Lab:
    """Config-bound helpers shared by the experiments."""

    def __init__(self, cfg: ExperimentConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = jobs
        ex = cfg.section("experiment")
        self.eval_count = int(ex["eval_count"])
        self.eval_seed_start = int(ex["eval_seed_start"])

    def reference_seeds(self, n: Optional[int] = None) -> list[int]:
        n = self.cfg.reference_count if n is None else n
        return list(range(self.cfg.reference_seed_start, self.cfg.reference_seed_start + n))

    def eval_seeds(self, n: Optional[int] = None, offset: int = 0) -> list[int]:
        n = self.eval_count if n is None else n
        start = self.eval_seed_start + offset
        return list(range(start, start + n))

    def run(self, scenario: str, sampler: str, seeds: Sequence[int], profile=None, policy=None):
        return run_batch(self.cfg.schedule, self.cfg.guidance(scenario), sampler, seeds, scenario,
                         profile, policy if policy is not None else self.cfg.policy, self.jobs)

    def profile(self, sampler: str, n: Optional[int] = None, gamma: Optional[float] = None) -> StabilityProfile:
        ref = self.run("normal", sampler, self.reference_seeds(n))
        return collect_profile(ref, self.cfg.gamma if gamma is None else gamma)

    def replica_epsilon(self, scenario: str) -> float:
        fixed = self.cfg.section("experiment").get("replica_epsilon")
        if fixed is not None:
            return float(fixed)
        m = self.cfg.models
        means = np.vstack([m["unconditional"].means, m["normal"].means, m[scenario].means])
        return default_replica_epsilon(means, self.cfg.mem_target(scenario))

    def replicas(self, scenario: str, trajectories: Sequence[Trajectory]) -> np.ndarray:
        target = self.cfg.mem_target(scenario)
        eps = self.replica_epsilon(scenario)
        return np.array([np.linalg.norm(t.final_latent - target) <= eps for t in trajectories])


def _r(x: float, nd: int = 6) -> float:
    return float(round(float(x), nd))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


# --- stability ---------------------------------------------------------------

def exp_stability(cfg: ExperimentConfig, out_dir: Optional[Path] = None, jobs: int = 1) -> dict:
    """Violation rates of held-out normal and memorized runs against a calibrated profile."""
    lab = Lab(cfg, jobs)
    report = {"experiment": "stability", "config_hash": cfg.hash, "samplers": {}}
    band_rows, series_rows = [], []
    for sampler in cfg.section("experiment")["samplers"]:
        prof = lab.profile(sampler)
        normal = lab.run("normal", sampler, lab.eval_seeds())
        half = len(normal) // 2
        entry = {"normal": {}, "normal_split": {}, "gamma_sweep": {}}
        for ch in CHANNELS:
            entry["normal"][ch] = _r(violation_rate(prof, normal, ch))
            entry["normal_split"][ch] = [_r(violation_rate(prof, normal[:half], ch)),
                                         _r(violation_rate(prof, normal[half:], ch))]
        for g in cfg.section("experiment")["gamma_sweep"]:
            pg = prof.with_gamma(float(g))
            entry["gamma_sweep"][str(float(g))] = {ch: _r(violation_rate(pg, normal, ch)) for ch in CHANNELS}
        for sc in MEMORIZED:
            trs = lab.run(sc, sampler, lab.eval_seeds())
            entry[sc] = {ch: _r(violation_rate(prof, trs, ch)) for ch in CHANNELS}
            entry[sc]["trajectories_violating_delta"] = _r(trajectory_violation_fraction(prof, trs, "delta"))
            entry[sc]["diverged"] = int(sum(t.diverged for t in trs))
            if entry[sc]["trajectories_violating_delta"] == 0.0:
                raise ScenarioConstructionError(
                    f"{sc} scenario never leaves the delta region under {sampler}: "
                    f"violation rates {entry[sc]}, max delta norm "
                    f"{max(float(t.norms('delta').max()) for t in trs):.4g} vs band top "
                    f"{float(np.max(prof.mu_delta + prof.gamma * prof.sigma_delta)):.4g}")
            for t in trs[:10]:
                series_rows += _series(t, sampler)
        for t in normal[:10]:
            series_rows += _series(t, sampler)
        for ch in CHANNELS:
            mu, sd = prof.stats(ch)
            for i in range(prof.T):
                if not prof.usable(ch, i):
                    continue
                box = region(prof, ch, i)
                band_rows.append([sampler, ch, i, _fmt(float(mu[i])), _fmt(float(sd[i])),
                                  _fmt(box.lower), _fmt(box.upper)])
        report["samplers"][sampler] = entry
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write_json(out_dir / "report.json", report)
        _write_csv(out_dir / "bands.csv", ["sampler", "channel", "step", "mu", "sigma", "lower", "upper"], band_rows)
        _write_csv(out_dir / "series.csv", ["sampler", "scenario", "seed", "step", "delta", "latent", "z0"], series_rows)
    return report


def _series(t: Trajectory, sampler: str) -> list[list]:
    return [[sampler, t.scenario, t.seed, r.step_index, _fmt(r.update_norm), _fmt(r.latent_norm),
             _fmt(r.z0_hat_norm)] for r in t.records]


# --- detection ---------------------------------------------------------------

def _scores(trs: Sequence[Trajectory], prof: StabilityProfile, s: int) -> np.ndarray:
    c = DetectionConfig(prof, s)
    return np.array([memorization_score(t, c) for t in trs])


def exp_detection(cfg: ExperimentConfig, out_dir: Optional[Path] = None, jobs: int = 1) -> dict:
    """AUC and TPR@FPR across detection windows, samplers, seed averaging and reference sizes."""
    lab = Lab(cfg, jobs)
    det = cfg.section("detection")
    fpr = float(det["fpr"])
    grid = [int(s) for s in det["step_grid"]]
    groups = [int(n) for n in det["seed_groups"]]
    pool_size = max(groups)
    n = lab.eval_count
    report = {"experiment": "detection", "config_hash": cfg.hash, "fpr": fpr, "samplers": {}}
    rows = []
    for sampler in cfg.section("experiment")["samplers"]:
        prof = lab.profile(sampler)
        # seed g * pool_size + j is the j-th seed of condition group g
        pools = {sc: lab.run(sc, sampler, lab.eval_seeds(n * pool_size)) for sc in ("normal",) + MEMORIZED}
        entry = {"by_steps": {}, "median_smem": {}, "reference_sweep": {}, "null_auc": None}
        for s in grid:
            single = {sc: _scores(pools[sc][::pool_size], prof, s) for sc in pools}
            thr = calibrate_threshold(single["normal"], fpr)
            e = {"threshold": _r(thr)}
            for sc in MEMORIZED:
                e[sc] = {"auc": _r(auc(single[sc], single["normal"])),
                         "tpr": _r(tpr_at_fpr(single[sc], single["normal"], fpr))}
            for k in groups:
                if k == 1:
                    continue
                avg = {sc: _scores(pools[sc], prof, s).reshape(n, pool_size)[:, :k].mean(axis=1) for sc in pools}
                e[f"seeds_{k}"] = {sc: {"auc": _r(auc(avg[sc], avg["normal"])),
                                        "tpr": _r(tpr_at_fpr(avg[sc], avg["normal"], fpr))} for sc in MEMORIZED}
            entry["by_steps"][str(s)] = e
            entry["median_smem"][str(s)] = {sc: _r(float(np.median(single[sc]))) for sc in single}
            for sc, vals in single.items():
                label = "normal" if sc == "normal" else "memorized"
                for t, v in zip(pools[sc][::pool_size], vals):
                    rows.append([sampler, sc, t.seed, label, s, _fmt(float(v)), _fmt(thr), int(v > thr)])

        s0 = int(det["steps"])
        single = {sc: pools[sc][::pool_size] for sc in pools}
        sm = _scores(single["strong"], prof, s0)
        sn = _scores(single["normal"], prof, s0)
        labels = np.r_[np.ones(sm.size, bool), np.zeros(sn.size, bool)]
        both = np.r_[sm, sn]
        perm = np.random.default_rng(0).permutation(labels)
        entry["null_auc"] = _r(auc(both[perm], both[~perm]))
        for size in det["reference_sizes"]:
            p = lab.profile(sampler, int(size))
            entry["reference_sweep"][str(size)] = {
                sc: _r(auc(_scores(single[sc], p, s0), _scores(single["normal"], p, s0))) for sc in MEMORIZED}
        report["samplers"][sampler] = entry

    samplers = list(report["samplers"])
    if "ddim" in samplers and "pndm" in samplers:
        cmp = {}
        for s in grid:
            d, p = report["samplers"]["ddim"], report["samplers"]["pndm"]
            cmp[str(s)] = {
                "median_smem_strong": {"ddim": d["median_smem"][str(s)]["strong"],
                                       "pndm": p["median_smem"][str(s)]["strong"]},
                "auc_strong_diff": _r(p["by_steps"][str(s)]["strong"]["auc"] - d["by_steps"][str(s)]["strong"]["auc"]),
            }
        report["sampler_comparison"] = cmp
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write_json(out_dir / "report.json", report)
        _write_csv(out_dir / "detection.csv",
                   ["sampler", "scenario", "seed", "label", "s", "S_mem", "threshold", "flagged"], rows)
    return report


# --- mitigation --------------------------------------------------------------

ABLATIONS = {
    "none": (False, False),
    "z_only": (True, False),
    "delta_only": (False, True),
    "both": (True, True),
}


def _summary_rows(lab: Lab, sampler: str, scenario: str, variant: str, trs: Sequence[Trajectory]) -> list[list]:
    flags = lab.replicas(scenario, trs)
    rows = []
    for t, flag in zip(trs, flags):
        counts = {"rescale_z0": 0, "clamp_z": 0, "clamp_delta": 0}
        t_star = ""
        for r in t.records:
            for a in r.mitigation_applied:
                counts[a] = counts.get(a, 0) + 1
            if t_star == "" and r.mitigation_applied:
                t_star = r.step_index
        rows.append([sampler, variant, scenario, t.seed, t.mem_type_final, t_star,
                     counts["rescale_z0"], counts["clamp_z"], counts["clamp_delta"], int(flag)])
    return rows


def time_trajectories(lab: Lab, sampler: str, prof: StabilityProfile, count: int,
                      repeats: int = 7) -> tuple[list[float], list[float]]:
    """Serial per-trajectory wall times (best of ``repeats``) without and with the hook.

    The hook is built once and reset per trajectory, as a deployed sampler
    callback would be; the two variants alternate order between repeats.
    """
    g = lab.cfg.guidance("normal")
    hook = MitigationHook(prof, lab.cfg.policy)
    plain, mitigated = [], []

    def timed(z, h):
        if h is not None:
            h.reset()
        t0 = time.perf_counter()
        sample_trajectory(sampler, lab.cfg.schedule, g, z, h)
        return time.perf_counter() - t0

    for s in lab.eval_seeds(count):
        z = initial_latent(s, g.dimension)
        timed(z, None)  # warm
        timed(z, hook)
        a = b = float("inf")
        for k in range(repeats):
            if k % 2:
                b = min(b, timed(z, hook))
                a = min(a, timed(z, None))
            else:
                a = min(a, timed(z, None))
                b = min(b, timed(z, hook))
        plain.append(a)
        mitigated.append(b)
    return plain, mitigated


def paired_overhead(plain: Sequence[float], mitigated: Sequence[float]) -> float:
    """Median over trajectories of (mitigated / plain - 1); robust to load drift between seeds."""
    return float(np.median(np.asarray(mitigated) / np.asarray(plain)) - 1.0)


def exp_mitigation(cfg: ExperimentConfig, out_dir: Optional[Path] = None, jobs: int = 1,
                   timing: bool = True) -> dict:
    """Replica rates with and without mitigation, the clamp ablation, and hook overhead."""
    lab = Lab(cfg, jobs)
    fpr = float(cfg.section("detection")["fpr"])
    s0 = int(cfg.section("detection")["steps"])
    report = {"experiment": "mitigation", "config_hash": cfg.hash, "samplers": {}}
    summary, outcome = [], []
    timings = {}
    for sampler in cfg.section("experiment")["samplers"]:
        prof = lab.profile(sampler)
        seeds = lab.eval_seeds()
        normal_plain = lab.run("normal", sampler, seeds)
        thr = calibrate_threshold(_scores(normal_plain, prof, s0), fpr)
        entry = {"detection_threshold": _r(thr), "scenarios": {}, "ablation": {}}
        for sc in ("normal",) + MEMORIZED:
            plain = normal_plain if sc == "normal" else lab.run(sc, sampler, seeds)
            mit = lab.run(sc, sampler, seeds, prof, cfg.policy)
            target_sc = sc if sc in MEMORIZED else "strong"
            e = {
                "replica_rate_unmitigated": _r(np.mean(lab.replicas(target_sc, plain))),
                "replica_rate_mitigated": _r(np.mean(lab.replicas(target_sc, mit))),
                "diverged_unmitigated": int(sum(t.diverged for t in plain)),
                "diverged_mitigated": int(sum(t.diverged for t in mit)),
                "flagged_rate": _r(np.mean(_scores(plain, prof, s0) > thr)),
                "mem_types": {k: int(sum(t.mem_type_final == k for t in mit)) for k in ("none", "mild", "strong")},
                "replica_epsilon": _r(lab.replica_epsilon(target_sc)),
            }
            entry["scenarios"][sc] = e
            summary += _summary_rows(lab, sampler, target_sc, "full", mit)
            for mitigated, trs in ((False, plain), (True, mit)):
                outcome.append([sc, sampler, int(mitigated),
                                e["replica_rate_mitigated" if mitigated else "replica_rate_unmitigated"],
                                _r(np.mean([t.diverged for t in trs]))])
        for sc in MEMORIZED:
            entry["ablation"][sc] = {}
            for name, (zc, dc) in ABLATIONS.items():
                pol = MitigationPolicy(cfg.policy.tau_mild, cfg.policy.tau_strong, cfg.policy.mild_steps_k,
                                       zc, dc, cfg.policy.mild_window_by_timestep)
                trs = lab.run(sc, sampler, seeds, prof, pol)
                entry["ablation"][sc][name] = {"replica_rate": _r(np.mean(lab.replicas(sc, trs))),
                                               "diverged": int(sum(t.diverged for t in trs))}
        if timing:
            plain_t, mit_t = time_trajectories(lab, sampler, prof, int(cfg.section("experiment")["timing_count"]))
            timings[sampler] = {"median_unmitigated_s": float(np.median(plain_t)),
                                "median_mitigated_s": float(np.median(mit_t)),
                                "overhead": paired_overhead(plain_t, mit_t),
                                "overhead_mean": overhead(plain_t, mit_t)}
        report["samplers"][sampler] = entry
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write_json(out_dir / "report.json", report)
        _write_csv(out_dir / "mitigation_summary.csv",
                   ["sampler", "variant", "scenario", "seed", "mem_type", "t_star", "n_rescale_z0", "n_clamp_z",
                    "n_clamp_delta", "replica"], summary)
        rows = []
        for sc, sampler, mitigated, rate, div in outcome:
            t = timings.get(sampler)
            mean_time = "" if t is None else repr(t["median_mitigated_s" if mitigated else "median_unmitigated_s"])
            ov = "" if t is None or not mitigated else repr(t["overhead"])
            rows.append([sc, sampler, mitigated, rate, div, mean_time, ov])
        _write_csv(out_dir / "outcome.csv",
                   ["scenario", "sampler", "mitigated", "replica_rate", "diverged_rate", "mean_time_s", "overhead"],
                   rows)
        if timing:
            _write_json(out_dir / "timing.json", {"config_hash": cfg.hash, "samplers": timings})
    if timing:
        report = dict(report, timing=timings)
    return report


EXPERIMENTS = {"stability": exp_stability, "detection": exp_detection, "mitigation": exp_mitigation}

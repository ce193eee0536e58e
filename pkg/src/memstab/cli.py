"""Command-line entry point: ``memstab {calibrate,sample,detect,experiment}``."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import re
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np

from memstab.config import ConfigError, load_config
from memstab.detection import InsufficientSampleWarning, calibrate_threshold
from memstab.harness import EXPERIMENTS, Lab, ScenarioConstructionError
from memstab.mitigation import MitigationHook
from memstab.sampler import SAMPLER_KINDS, initial_latent, sample_trajectory
from memstab.stability import StabilityProfile, zscores

log = logging.getLogger("memstab")

_NAME = re.compile(r"^(?P<scenario>[a-z]+)_(?P<sampler>[a-z]+)_seed(?P<seed>\d+)$")


class CliError(RuntimeError):
    pass


def _write_jsonl(path: Path, trajectory, norms_only: bool):
    lines = [json.dumps(r.to_json_dict(norms_only), separators=(",", ":")) for r in trajectory.records]
    path.write_text("\n".join(lines) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    lab = Lab(cfg, args.jobs)
    seeds = lab.reference_seeds()
    trs = lab.run("normal", args.sampler, seeds)
    from memstab.stability import collect_profile
    prof = collect_profile(trs, cfg.gamma)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prof.save(out)
    if args.trajectories_out:
        d = Path(args.trajectories_out)
        d.mkdir(parents=True, exist_ok=True)
        for t in trs:
            _write_jsonl(d / f"normal_{args.sampler}_seed{t.seed}.jsonl", t, args.norms_only)
    log.info("profile from %d reference trajectories -> %s", len(trs), out)
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    if args.mitigate and not args.profile:
        raise CliError("--mitigate needs --profile")
    hook = None
    if args.mitigate:
        prof = StabilityProfile.load(args.profile)
        if prof.T != cfg.T:
            raise CliError(f"profile has {prof.T} steps but config uses T={cfg.T}")
        hook = MitigationHook(prof, cfg.policy)
    g = cfg.guidance(args.scenario)
    traj = sample_trajectory(args.sampler, cfg.schedule, g, initial_latent(args.seed, g.dimension), hook,
                             args.seed, args.scenario)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, traj, args.norms_only)
    if traj.diverged:
        log.error("trajectory diverged after %d steps", traj.T)
        return 1
    return 0


def _identify(path: Path, label_override):
    m = _NAME.match(path.stem)
    scenario = m["scenario"] if m else path.stem
    seed = int(m["seed"]) if m else -1
    label = label_override or ("normal" if scenario == "normal" else "memorized" if m else "unknown")
    return scenario, seed, label


def cmd_detect(args) -> int:
    prof = StabilityProfile.load(args.profile)
    paths = sorted(Path(p) for p in glob.glob(args.trajectories))
    if not paths:
        raise CliError(f"no trajectory files match {args.trajectories!r}")
    s = args.steps
    if not 1 <= s <= prof.T:
        raise CliError(f"--steps must be in [1, {prof.T}]")
    upto = prof.T - 1 if s == prof.T else s
    rows = []
    for p in paths:
        recs = _read_jsonl(p)
        if len(recs) < upto + 1:
            raise CliError(f"{p}: {len(recs)} steps, need at least {upto + 1}")
        norms = np.array([r["update_norm"] for r in recs])
        z = zscores(prof, "delta", norms)
        rows.append((*_identify(p, args.label), float(np.max(z[1:upto + 1]))))
    if args.threshold is not None:
        thr = float(args.threshold)
    else:
        normals = [r[3] for r in rows if r[2] == "normal"]
        if not normals:
            raise CliError("no normal-labelled trajectories to calibrate on; pass --threshold")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", InsufficientSampleWarning)
            thr = calibrate_threshold(normals, args.fpr)
        for w in caught:
            log.warning("%s", w.message)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scenario", "seed", "label", "s", "S_mem", "threshold", "flagged"])
        for scenario, seed, label, score in rows:
            w.writerow([scenario, seed, label, s, repr(score), repr(thr), int(score > thr)])
    return 0


def _prepare_dir(out: Path, config_hash: str, force: bool):
    report = out / "report.json"
    if report.exists():
        try:
            old = json.loads(report.read_text()).get("config_hash")
        except json.JSONDecodeError:
            old = None
        if old != config_hash and not force:
            raise CliError(f"{out} holds a report for config {old}, not {config_hash}; use --force to overwrite")
        if old != config_hash:
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _prepare_dir(out, cfg.hash, args.force)
    fn = EXPERIMENTS[args.name]
    kwargs = {"jobs": args.jobs}
    if args.name == "mitigation":
        kwargs["timing"] = not args.no_timing
    fn(cfg, out, **kwargs)
    log.info("wrote %s", out / "report.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memstab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="experiment JSON (default: shipped config)")
        sp.add_argument("--jobs", type=int, default=1, help="trajectory-level worker processes")

    c = sub.add_parser("calibrate", help="build a stability profile from the reference scenario")
    common(c)
    c.add_argument("--sampler", choices=SAMPLER_KINDS, default="ddim")
    c.add_argument("--out", required=True)
    c.add_argument("--trajectories-out", default=None, help="also dump the reference runs as JSONL here")
    c.add_argument("--norms-only", action="store_true")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sample", help="sample one trajectory and dump it as JSONL")
    common(s)
    s.add_argument("--sampler", choices=SAMPLER_KINDS, required=True)
    s.add_argument("--scenario", choices=("normal", "mild", "strong"), default="normal")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--mitigate", action="store_true")
    s.add_argument("--profile", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--norms-only", action="store_true")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("detect", help="score trajectory JSONL files against a profile")
    d.add_argument("--profile", required=True)
    d.add_argument("--trajectories", required=True, help="glob of JSONL files")
    d.add_argument("--steps", type=int, default=3)
    d.add_argument("--fpr", type=float, default=0.01)
    d.add_argument("--threshold", type=float, default=None, help="skip calibration and use this threshold")
    d.add_argument("--label", choices=("normal", "memorized"), default=None)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("experiment", help="run a canned experiment")
    e.add_argument("name", choices=sorted(EXPERIMENTS))
    common(e)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true", help="overwrite a report made from a different config")
    e.add_argument("--no-timing", action="store_true", help="mitigation: skip wall-clock measurement")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ScenarioConstructionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Run one or more canned experiments into runs/<name>/."""

import argparse
from pathlib import Path

from memstab.config import load_config
from memstab.harness import EXPERIMENTS


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("names", nargs="*", default=["stability", "detection", "mitigation"],
                   choices=sorted(EXPERIMENTS))
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="runs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-timing", action="store_true")
    args = p.parse_args()

    cfg = load_config(args.config)
    for name in args.names:
        out = Path(args.out) / name
        out.mkdir(parents=True, exist_ok=True)
        kwargs = {"jobs": args.jobs}
        if name == "mitigation":
            kwargs["timing"] = not args.no_timing
        EXPERIMENTS[name](cfg, out, **kwargs)
        print(f"{name}: {out / 'report.json'}")


if __name__ == "__main__":
    main()

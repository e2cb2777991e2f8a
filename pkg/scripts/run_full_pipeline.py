#!/usr/bin/env python3
"""Desk-scale end-to-end run: corpus, detectors, GANs, attacks, report.

Writes artifacts under --workdir (default .ganevade-full) and prints the
markdown report. Pass --config to override any of the defaults below.
"""

import argparse
import sys

from ganevade import harness


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="experiment config JSON")
    ap.add_argument("--workdir", default=".ganevade-full")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-per-class", type=int, default=500)
    args = ap.parse_args()

    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.ExperimentConfig(
            corpus=harness.CorpusConfig(n_per_class=args.n_per_class),
            gans={
                "byte_histogram": harness.GanStageConfig(max_steps=3000),
                "api": harness.GanStageConfig(max_steps=300),
                "strings": harness.GanStageConfig(max_steps=300),
            },
            seed=args.seed)
    report = harness.run_pipeline(cfg, args.workdir)
    print(harness.render_report(report, "markdown"))
    return 0


if __name__ == "__main__":
    sys.exit(main())

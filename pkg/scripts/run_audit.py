"""Axiom audit over several seeds; exits nonzero if any axiom fails.

    python3 scripts/run_audit.py [--seeds 0 1 2] [--probes 100] [--out audit.json]
"""

import argparse
import json
import sys

from sic.audit import audit_axioms


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--probes", type=int, default=100)
    ap.add_argument("--out")
    args = ap.parse_args()
    reports = []
    for seed in args.seeds:
        rep = audit_axioms(seed=seed, probes=args.probes)
        print(f"seed {seed} ({rep.seconds:.1f}s)")
        for line in rep.lines():
            print("  " + line)
        reports.append(rep.to_dict())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(reports, fh, indent=2)
    return 0 if all(r["passed"] for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())

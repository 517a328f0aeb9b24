"""Copy-previous-step baseline and trained models on the Los-loop sensor network.

    python scripts/losloop.py DATA_DIR [--baseline-only]

DATA_DIR holds los_speed.csv (a header row of sensor ids, then one row of
speeds per 5-minute step) and los_adj.csv (the 207 x 207 adjacency matrix).
"""

import argparse
import json
import sys

from radflow.experiments import load_losloop, losloop_copy_baseline, run_losloop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_dir")
    ap.add_argument("--baseline-only", action="store_true")
    args = ap.parse_args()

    data = load_losloop(args.data_dir)
    if data is None:
        print(f"no los_speed.csv / los_adj.csv in {args.data_dir}", file=sys.stderr)
        return 3
    out = {"nodes": data.N, "steps": data.T, "copy_step": losloop_copy_baseline(data).summary()}
    if not args.baseline_only:

        def log(r):
            if r["step"] % 500 == 0:
                print(f"step {r['step']:6d}  loss {r['loss']:.3f}", flush=True)

        res = run_losloop(data, log=log)
        out["pure"] = res["nonet"].summary()
        out["one_hop"] = res["radflow"].summary()
        out["seconds"] = {k: v for k, v in res.items() if k.startswith("seconds")}
    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

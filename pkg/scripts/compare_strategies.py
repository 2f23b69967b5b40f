"""Original vs. Mirrored vs. Oriented on the phantom suite over several seeds.

    python3 scripts/compare_strategies.py --config configs/phantom_default.json \
        --seeds 0 1 2 --out runs/compare

Each seed gets its own run directory; the phantom data and edge maps are
shared between strategies within a seed.  Prints a per-seed table and the
medians, and writes them to <out>/comparison.json.
"""
import argparse
import json
import statistics
import time
from pathlib import Path

from spinecade.cli import ORDERING_MARGIN, run_stage
from spinecade.config import load_config
from spinecade.patches import Strategy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--strategies", nargs="+", default=["original", "mirrored", "oriented"])
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()

    strategies = [Strategy.parse(s) for s in args.strategies]
    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        cfg = load_config(args.config, [*args.overrides, f"output_dir={(out / f'seed{seed}').resolve()}"], seed)
        run_stage(cfg, "phantom", [])
        run_stage(cfg, "edges", [])
        for s in strategies:
            t0 = time.perf_counter()
            result = {}
            for stage in ("sample", "train", "predict", "eval"):
                result.update(run_stage(cfg, stage, [s]))
            r = result[s]
            rows.append({"seed": seed, "strategy": s.name.lower(), "seconds": round(time.perf_counter() - t0, 1),
                         **{k: r[k] for k in ("auc", "sens_at_5fp", "sens_at_10fp")}})
            print(f"seed {seed} {s.name.lower():<9} auc {r['auc']:.4f} "
                  f"s@5fp {r['sens_at_5fp']:.3f} s@10fp {r['sens_at_10fp']:.3f}", flush=True)

    medians = {}
    for s in strategies:
        name = s.name.lower()
        mine = [r for r in rows if r["strategy"] == name]
        medians[name] = {k: statistics.median(r[k] for r in mine) for k in ("auc", "sens_at_5fp", "sens_at_10fp")}
    print("\nmedian over seeds", args.seeds)
    for name, m in medians.items():
        print(f"  {name:<9} auc {m['auc']:.4f} s@5fp {m['sens_at_5fp']:.3f} s@10fp {m['sens_at_10fp']:.3f}")
    if "oriented" in medians and "original" in medians:
        gap = medians["oriented"]["auc"] - medians["original"]["auc"]
        print(f"  oriented - original auc {gap:+.4f}: margin {ORDERING_MARGIN} {'met' if gap >= ORDERING_MARGIN else 'NOT MET'}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps({"runs": rows, "median": medians}, indent=2) + "\n")


if __name__ == "__main__":
    main()

"""Compare fit time and IBS of all-event-time cut-points versus subsampled ones.

    python scripts/run_scaling.py --config configs/scaling.toml --out results/scaling
"""
import argparse
from pathlib import Path

from pemsurv.bench import ScalingConfig, run_scaling, scaling_checks


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/scaling.toml")
    ap.add_argument("--out", default="results/scaling")
    args = ap.parse_args()

    cfg = ScalingConfig.from_toml(args.config)
    cells, summary = run_scaling(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells.to_csv(out / "scaling_cells.csv", index=False)
    summary.to_csv(out / "scaling_summary.csv", index=False)
    print(summary.to_string(index=False))
    for name, ok, detail in scaling_checks(summary, cfg):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


if __name__ == "__main__":
    main()

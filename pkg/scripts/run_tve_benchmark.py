"""Run the synthetic benchmark and print mean IBS/Brier/C-index per engine.

    python scripts/run_tve_benchmark.py --config configs/bench.toml --out results/tve
"""
import argparse
import logging

from pemsurv.bench import BenchConfig, run_benchmark, run_checks, write_results


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/bench.toml")
    ap.add_argument("--out", default="results/tve")
    ap.add_argument("--replications", type=int, help="override the configured number of replications")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = BenchConfig.from_toml(args.config)
    overrides = {k: v for k, v in (("replications", args.replications), ("seed", args.seed)) if v is not None}
    if overrides:
        cfg = BenchConfig.from_dict({**cfg.to_dict(), **overrides})

    result = run_benchmark(cfg, observer=lambda event, info: logging.debug("%s %s", event, info["stage"]))
    out = write_results(result, args.out)
    print(result.summary().to_string(index=False))
    for name, ok, detail in run_checks(result, cfg):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"results and manifest written to {out}")


if __name__ == "__main__":
    main()

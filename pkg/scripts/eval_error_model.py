"""Compare predicted and measured error std on a trained desk CNN.

Prints Pearson correlation and median relative error for the default
estimator, the conditional variant and the single-distribution ablation.
"""

import argparse
import logging
import time
from pathlib import Path

from hetapprox import error_model, pipeline
from hetapprox.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default=str(Path(__file__).resolve().parent.parent / "configs" / "desk.json"))
    ap.add_argument("--out", default="runs/error_model")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = pipeline.load_data(cfg)
    library = pipeline.load_multipliers(cfg.library)
    net, summary = pipeline.train_baseline(cfg, splits)
    print(f"baseline int8 val acc {summary['int_val_acc']:.4f}")
    for within in ("joint", "conditional"):
        t0 = time.perf_counter()
        rows = pipeline.characterize_net(net, library, splits.calib, cfg.k_samples, cfg.seed, within)
        s = error_model.summarize(rows)
        error_model.write_report(rows, out / f"characterize_{within}.csv")
        m = s["multi"]
        print(f"{within:12s} pearson {m['pearson']:.4f}  median {100 * m['median_rel_err']:6.2f}%  "
              f"IQR {100 * m['iqr']:6.2f}%  ({time.perf_counter() - t0:.1f} s)")
    single = s["single"]
    print(f"{'single':12s} pearson {single['pearson']:.4f}  median {100 * single['median_rel_err']:6.2f}%  "
          f"IQR {100 * single['iqr']:6.2f}%")
    print(f"{'MRE':12s} pearson {s['mre_pearson']:.4f}")


if __name__ == "__main__":
    main()

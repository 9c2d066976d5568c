"""Full lambda sweep on a config; writes pareto.csv, uniform.csv and sweep.json."""

import argparse
import json
import logging
import time
from pathlib import Path

from hetapprox import pipeline
from hetapprox.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default=str(Path(__file__).resolve().parent.parent / "configs" / "desk.json"))
    ap.add_argument("--out", help="output directory (default: the config's output_dir)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("hetapprox.error_model").setLevel(logging.ERROR)
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    t0 = time.time()
    splits = pipeline.load_data(cfg)
    library = pipeline.load_multipliers(cfg.library)
    baseline, summary = pipeline.train_baseline(cfg, splits)
    out.mkdir(parents=True, exist_ok=True)
    baseline.save(out / "baseline_checkpoint.json")
    result = pipeline.pareto_sweep(cfg, baseline, library, splits, out)
    elapsed = time.time() - t0
    (out / "timing.json").write_text(json.dumps({"seconds": elapsed, "int_val_acc": summary["int_val_acc"]}) + "\n")
    print(f"baseline int8 acc {result.baseline_acc:.4f}; {elapsed:.0f} s")
    for p in result.points:
        print(f"lambda {p['lambda']:5.2f}  energy {p['energy_rel']:.4f}  retrained {p['retrained_acc']:.4f}  "
              f"baseline-weights {p['baseline_retrained_acc']:.4f}  {p['assignment']}")
    for u in result.uniform:
        print(f"uniform {u['multiplier']:9s} energy {u['energy_rel']:.4f}  retrained {u['retrained_acc']:.4f}")


if __name__ == "__main__":
    main()

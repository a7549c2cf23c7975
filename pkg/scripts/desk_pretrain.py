"""Pretrain the desk model and save checkpoint, vocabulary and per-epoch metrics.

    python3 scripts/desk_pretrain.py --out runs/desk --epochs 20
"""

import argparse
import json
import logging
import time
from pathlib import Path

from rcmodel.desk import train_desk
from rcmodel.pretrain import write_metrics_log
from rcmodel.tokenizer import FeatureMap, save_feature_map, save_vocabulary


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    run = train_desk(args.epochs, args.seed)
    elapsed = time.perf_counter() - t0

    run.model.save(out / "desk.rcmp")
    save_vocabulary(run.vocab, out / "vocab.txt")
    save_feature_map(FeatureMap.for_grid(run.train_grids[0]), out / "desk.fmap")
    write_metrics_log(run.result.log, out / "metrics.log")
    with open(out / "epochs.jsonl", "w") as fh:
        for m in run.result.epoch_metrics:
            fh.write(json.dumps(m) + "\n")
    last = run.result.epoch_metrics[-1]
    print(f"{run.result.step} steps in {elapsed / 60:.1f} min; held-out mlm {last['mlm_loss']:.3f} "
          f"acc {last['mlm_accuracy']:.3f} nfp {last['nfp_accuracy']:.3f}")


if __name__ == "__main__":
    main()

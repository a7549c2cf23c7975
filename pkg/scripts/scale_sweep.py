"""Perplexity-vs-scale traces of a desk checkpoint on data multiplied by known factors.

    python3 scripts/scale_sweep.py --run runs/desk --factors 0.25 1 4
"""

import argparse
from dataclasses import replace
from pathlib import Path

from rcmodel import model as nn
from rcmodel.chansim import generate_channel
from rcmodel.comprehend import ScaleSearchConfig, find_scale, write_scale_trace
from rcmodel.desk import DESK_SIM
from rcmodel.tokenizer import load_vocabulary


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--run", default="runs/desk")
    ap.add_argument("--factors", type=float, nargs="+", default=[0.25, 1.0, 4.0])
    ap.add_argument("--frames", type=int, default=64)
    ap.add_argument("--seed", type=int, default=777)
    ap.add_argument("--eval-sequences", type=int, default=16)
    args = ap.parse_args()
    run = Path(args.run)
    model = nn.Model.load(run / "desk.rcmp")
    vocab = load_vocabulary(run / "vocab.txt")
    grid = generate_channel(replace(DESK_SIM, num_frames=args.frames, seed=args.seed))
    search = ScaleSearchConfig(eval_sequences=args.eval_sequences)
    for factor in args.factors:
        s_opt, trace = find_scale(model, vocab, grid.with_values(grid.values * factor), search)
        write_scale_trace(trace, run / f"scale_{factor:g}.txt")
        print(f"factor {factor:g}: S_opt {s_opt:.4g}")
        for s, pp in trace:
            print(f"  {s:8.4g}  {pp:10.3f}")


if __name__ == "__main__":
    main()

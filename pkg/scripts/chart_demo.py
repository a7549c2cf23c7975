"""Fingerprint chart of a desk checkpoint over several simulated environments.

Each environment (simulator seed) becomes one label; fingerprints are
averaged over 8 consecutive frame pairs and charted with t-SNE at
perplexity 5 and 10.

    python3 scripts/chart_demo.py --run runs/desk
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from rcmodel import model as nn
from rcmodel.chansim import generate_channel
from rcmodel.desk import DESK_SIM
from rcmodel.downstream import adjacency_ratio, cls_vectors, fingerprints_from_vectors, tsne_chart, write_chart
from rcmodel.tokenizer import assemble_sequence, load_vocabulary


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--run", default="runs/desk")
    ap.add_argument("--environments", type=int, default=8)
    ap.add_argument("--points", type=int, default=100)
    args = ap.parse_args()
    run = Path(args.run)
    model = nn.Model.load(run / "desk.rcmp")
    vocab = load_vocabulary(run / "vocab.txt")

    per_env = -(-args.points // args.environments)
    vectors, labels, ranks = [], [], []
    for env in range(args.environments):
        grid = generate_channel(replace(DESK_SIM, num_frames=8 * per_env + 1, seed=200 + env))
        tokens = vocab.encode_array(grid.values)
        seqs = [assemble_sequence(grid, (t, t + 1), vocab, tokens) for t in range(grid.num_frames - 1)]
        for k, fp in enumerate(fingerprints_from_vectors(cls_vectors(model, seqs), 8)):
            vectors.append(fp.vector)
            labels.append(env)
            ranks.append(k % 10)
    vectors, labels, ranks = vectors[:args.points], labels[:args.points], ranks[:args.points]

    for perp in (5.0, 10.0):
        pts, res = tsne_chart(vectors, perp, labels=labels, size_ranks=ranks, return_result=True)
        write_chart(pts, run / f"chart_p{perp:g}.txt")
        ratio = adjacency_ratio(res.embedding, labels)
        print(f"perplexity {perp:g}: KL {res.initial_kl:.3f} -> {res.final_kl:.3f}, adjacency ratio {ratio:.3f}")
    np.savetxt(run / "fingerprints.txt", np.column_stack([labels, vectors]))


if __name__ == "__main__":
    main()

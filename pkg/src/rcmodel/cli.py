"""Command-line entry point.

Every subcommand writes into the output directory (``--out``, else
``$RCMODEL_OUT``, else the working directory) and leaves a resolved-config
snapshot ``<command>.config`` next to its outputs.  Options may also come
from a ``key = value`` file given with ``--config``; explicit flags win.

Exit codes: 0 success, 2 usage error, 3 data-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as nn
from .chansim import SimConfig, TapSpec, exponential_pdp, generate_channel, inject_contamination, load_grid, save_grid
from .comprehend import (FeatureMapMismatch, ScaleSearchConfig, ScaleSearchError, find_scale, scale_channel,
                         transfer_adapt, write_scale_trace)
from .downstream import (BUCKETS, CompressionDims, attention_domain_profile, cls_vectors, compression_ratio,
                         detect_contamination, fingerprints_from_vectors, mitigate_contamination, tsne_chart,
                         write_attention_profile, write_chart)
from .pretrain import Adam, PretrainConfig, evaluate, pretrain, write_metrics_log
from .tokenizer import (FeatureMap, assemble_sequence, build_vocabulary, load_feature_map, load_vocabulary,
                        quantize_array, save_feature_map, save_vocabulary)

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "RCMODEL_OUT"

log = logging.getLogger("rcmodel")


class UsageError(Exception):
    pass


class DataFormatError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _out(args) -> Path:
    d = Path(args.out or os.environ.get(OUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load_grids(paths):
    if not paths:
        raise UsageError("--data is required")
    return [load_grid(_existing(p, "data")) for p in paths]


def _load_model(args) -> nn.Model:
    return nn.Model.load(_existing(args.checkpoint, "checkpoint"))


def _check_fmap(fmap: FeatureMap, grid) -> None:
    if not fmap.compatible_with(FeatureMap.for_grid(grid)):
        raise FeatureMapMismatch(f"feature map dims {fmap.dims()} do not fit data of shape {grid.shape}")


def _model_inputs(args):
    model = _load_model(args)
    vocab = load_vocabulary(_existing(args.vocab, "vocab"))
    grids = _load_grids(args.data)
    if args.fmap is not None:
        fmap = load_feature_map(_existing(args.fmap, "fmap"))
        for g in grids:
            _check_fmap(fmap, g)
    for g in grids:
        if g.num_subcarriers > model.config.max_freq_features:
            raise FeatureMapMismatch(f"{g.num_subcarriers} subcarriers exceed the model's {model.config.max_freq_features}")
    return model, vocab, grids


def _pairs(grid, limit):
    n = grid.num_frames - 1
    return [(t, t + 1) for t in range(n if limit is None else min(n, limit))]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_snapshot(args, path: Path) -> None:
    skip = {"func", "config"}
    with open(path, "w") as fh:
        for k in sorted(vars(args)):
            if k not in skip:
                fh.write(f"{k} = {getattr(args, k)}\n")


# -- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    taps = exponential_pdp(args.rms_delay, args.taps) if args.taps > 1 else [TapSpec(0.0, 1.0)]
    cfg = SimConfig(num_subcarriers=args.subcarriers, subcarrier_spacing=args.spacing, num_frames=args.frames,
                    frame_interval=args.frame_interval, num_antennas=args.antennas, carrier_freq=args.carrier,
                    user_speed=args.speed, taps=taps, antenna_correlation=args.rho, seed=args.seed)
    grid = generate_channel(cfg)
    if args.contaminate is not None:
        interferer = generate_channel(replace(cfg, seed=args.interferer_seed))
        for t in args.contaminate:
            grid = inject_contamination(grid, t, interferer, args.sir)
    out = _out(args)
    save_grid(grid, out / args.output)
    save_feature_map(FeatureMap.for_grid(grid), out / (Path(args.output).stem + ".fmap"))
    print(f"wrote {out / args.output} shape={grid.shape}")
    return EXIT_OK


def cmd_verify(args) -> int:
    grid = load_grid(_existing(args.data[0], "data"))
    v = grid.values
    identical = all(np.array_equal(v[:, 0], v[:, t]) for t in range(1, grid.num_frames))
    power = float(np.mean(np.abs(v) ** 2))
    lines = [("subcarriers", grid.num_subcarriers), ("frames", grid.num_frames), ("antennas", grid.num_antennas),
             ("mean_power", power), ("frames_identical", int(identical))]
    text = "".join(f"{k}\t{_fmt(x)}\n" for k, x in lines)
    (_out(args) / "verify.txt").write_text(text)
    sys.stdout.write(text)
    if args.expect_static and not identical:
        return EXIT_FORMAT
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    grids = _load_grids(args.data)
    vocab = build_vocabulary(grids, args.size)
    out = _out(args)
    save_vocabulary(vocab, out / args.output)
    save_feature_map(FeatureMap.for_grid(grids[0]), out / "features.fmap")
    print(f"vocabulary size {vocab.size}")
    return EXIT_OK


def _pretrain_config(args) -> PretrainConfig:
    return PretrainConfig(batch_size=args.batch, mask_rate=args.mask_rate, learning_rate_peak=args.lr,
                          warmup_steps=args.warmup, total_steps=args.steps, epochs=args.epochs,
                          seed=args.seed, anchor_stride=args.stride)


def _resume_state(path):
    cfg, loaded, extra = nn.load_checkpoint(path)
    step = int(extra.pop("train.step")[0]) if "train.step" in extra else 0
    opt = Adam(loaded)
    if extra:
        opt.load_state(extra)
    return cfg, loaded, step, opt


def cmd_pretrain(args) -> int:
    grids = _load_grids(args.data)
    out = _out(args)
    vocab_path = Path(args.vocab) if args.vocab else out / "vocab.txt"
    if vocab_path.is_file():
        vocab = load_vocabulary(vocab_path)
    else:
        vocab = build_vocabulary(grids, args.vocab_size)
        save_vocabulary(vocab, out / vocab_path.name)
    # a vocabulary built elsewhere must still hit some exact values of this data
    if not any(vocab.lookup(complex(z)) is not None for z in quantize_array(grids[0].values).ravel()):
        raise DataFormatError("vocabulary does not match the dataset")
    shape = grids[0].shape
    if any(g.shape[0] != shape[0] or g.shape[2] != shape[2] for g in grids):
        raise DataFormatError("datasets disagree on subcarrier/antenna counts")
    start, opt = 0, None
    if args.resume:
        mcfg, params, start, opt = _resume_state(_existing(args.resume, "resume"))
    else:
        mcfg = nn.ModelConfig(num_layers=args.layers, hidden_size=args.hidden, num_heads=args.heads,
                              ffn_size=args.ffn, vocab_size=vocab.size,
                              max_freq_features=shape[0], max_antenna_features=shape[2], max_seq_len=2 * shape[2] * (shape[0] + 1) + 1,
                              tie_mlm_weights=int(args.tie))
        params = nn.init_params(mcfg, args.seed)
    evals = _load_grids(args.eval_data) if args.eval_data else None
    if args.steps == 0:
        res_params, log_entries, step, opt = params, [], start, opt or Adam(params)
    else:
        res = pretrain(grids, vocab, mcfg, _pretrain_config(args), params=params, eval_grids=evals, start_step=start,
                       optimizer=opt)
        res_params, log_entries, step, opt = res.params, res.log, res.step, res.optimizer
        for m in res.epoch_metrics:
            log.info("%s", m)
    extra = {"train.step": np.array([float(step)])}
    extra.update(opt.state())
    nn.save_checkpoint(out / args.output, mcfg, res_params, extra)
    write_metrics_log(log_entries, out / "metrics.log")
    if log_entries:
        print(f"step {step} mlm {log_entries[-1][2]:.4f} nfp {log_entries[-1][3]:.4f}")
    else:
        print(f"step {step} (no updates)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, vocab, grids = _model_inputs(args)
    metrics = evaluate(grids, vocab, model.params, model.config, PretrainConfig(seed=args.seed),
                       max_examples=args.max_examples)
    text = "".join(f"{k}\t{_fmt(v)}\n" for k, v in metrics.items())
    (_out(args) / args.output).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_find_scale(args) -> int:
    model, vocab, grids = _model_inputs(args)
    search = ScaleSearchConfig(s_min=args.s_min, s_max=args.s_max, num_points=args.points, spacing=args.spacing,
                               refine=args.refine, eval_sequences=args.eval_sequences)
    s_opt, trace = find_scale(model, vocab, grids[0], search)
    write_scale_trace(trace, _out(args) / args.output)
    print(f"S_opt\t{float(s_opt)!r}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    if args.source_fmap is None or not Path(args.source_fmap).is_file():
        raise UsageError("transfer needs the source feature map (--source-fmap)")
    source = load_feature_map(args.source_fmap)
    model, vocab, grids = _model_inputs(args)
    grids = [scale_channel(g, args.scale) for g in grids]
    target = FeatureMap.for_grid(grids[0])
    res = transfer_adapt(model, grids, vocab, _pretrain_config(args), source, target)
    out = _out(args)
    nn.save_checkpoint(out / args.output, model.config, res.params, {"train.step": np.array([float(res.step)])})
    write_metrics_log(res.log, out / "transfer_metrics.log")
    print(f"adapted for {res.step} steps")
    return EXIT_OK


def cmd_detect(args) -> int:
    model, vocab, grids = _model_inputs(args)
    grid = grids[0]
    tokens = vocab.encode_array(grid.values)
    lines = []
    for t0, t1 in _pairs(grid, args.max_pairs):
        decision, margin = detect_contamination(model, assemble_sequence(grid, (t0, t1), vocab, tokens),
                                                args.threshold)
        lines.append(f"{t0}\t{t1}\t{decision}\t{float(margin)!r}\n")
    (_out(args) / args.output).write_text("".join(lines))
    print(f"{len(lines)} frame pairs scored")
    return EXIT_OK


def cmd_mitigate(args) -> int:
    model, vocab, grids = _model_inputs(args)
    grid = grids[0]
    if not 1 <= args.frame < grid.num_frames:
        raise UsageError(f"--frame must lie in [1, {grid.num_frames})")
    rec = mitigate_contamination(model, vocab, assemble_sequence(grid, (args.frame - 1, args.frame), vocab))
    with open(_out(args) / args.output, "w") as fh:
        for k in range(rec.shape[0]):
            for a in range(rec.shape[1]):
                fh.write(f"{k}\t{a}\t{float(rec[k, a].real)!r}\t{float(rec[k, a].imag)!r}\n")
    return EXIT_OK


def cmd_compress(args) -> int:
    dims = CompressionDims(args.subcarriers, args.frames, args.antennas, args.components, args.batch, args.hidden)
    gamma = compression_ratio(dims)
    out = _out(args)
    lines = [f"gamma\t{gamma}\n"]
    if args.checkpoint is not None:
        model, vocab, grids = _model_inputs(args)
        grid = grids[0]
        tokens = vocab.encode_array(grid.values)
        seqs = [assemble_sequence(grid, p, vocab, tokens) for p in _pairs(grid, None)]
        vecs = cls_vectors(model, seqs)
        for s in range(0, len(vecs) - args.batch + 1, args.batch):
            lines.append(f"{s}\t" + "\t".join(repr(float(x)) for x in vecs[s:s + args.batch].mean(0)) + "\n")
    (out / args.output).write_text("".join(lines))
    print(f"gamma = {gamma}")
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    model, vocab, grids = _model_inputs(args)
    rows = []
    for label, grid in enumerate(grids):
        tokens = vocab.encode_array(grid.values)
        vecs = cls_vectors(model, [assemble_sequence(grid, p, vocab, tokens) for p in _pairs(grid, None)])
        for fp in fingerprints_from_vectors(vecs, args.count, args.stride):
            rows.append(f"{label}\t{fp.start}\t" + "\t".join(repr(float(x)) for x in fp.vector) + "\n")
    (_out(args) / args.output).write_text("".join(rows))
    print(f"{len(rows)} fingerprints")
    return EXIT_OK


def read_fingerprints(path):
    """Return ``(labels, starts, vectors)`` from a fingerprint file."""
    labels, starts, vecs = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        try:
            labels.append(int(parts[0]))
            starts.append(int(parts[1]))
            vecs.append([float(x) for x in parts[2:]])
        except (ValueError, IndexError) as e:
            raise DataFormatError(f"{path}:{n}: malformed fingerprint row") from e
    if not vecs or len({len(v) for v in vecs}) > 1 or not vecs[0]:
        raise DataFormatError(f"{path}: fingerprint rows are empty or differ in width")
    return np.array(labels), np.array(starts), np.array(vecs)


def window_ranks(labels, starts, window: int) -> np.ndarray:
    """Position of each fingerprint within its run of ``window`` consecutive fingerprints of one label."""
    ranks = np.zeros(len(labels), dtype=int)
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        order = idx[np.argsort(starts[idx], kind="stable")]
        ranks[order] = np.arange(len(order)) % window
    return ranks


def cmd_chart(args) -> int:
    labels, starts, vecs = read_fingerprints(_existing(args.fingerprints, "fingerprints"))
    pts = tsne_chart(list(vecs), args.perplexity, args.iterations, args.seed, labels,
                     window_ranks(labels, starts, args.window))
    write_chart(pts, _out(args) / args.output)
    print(f"{len(pts)} points")
    return EXIT_OK


def cmd_attention(args) -> int:
    model, vocab, grids = _model_inputs(args)
    grid = grids[0]
    tokens = vocab.encode_array(grid.values)
    seqs = [assemble_sequence(grid, p, vocab, tokens) for p in _pairs(grid, args.max_pairs)]
    profile = attention_domain_profile(model, seqs, args.radius)
    write_attention_profile(profile, _out(args) / args.output)
    print("layer\thead\t" + "\t".join(BUCKETS))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _model_io(p, output):
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--fmap")
    p.add_argument("--data", action="append")
    p.add_argument("-o", "--output", default=output)


def _train_opts(p, epochs=3):
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch", type=int, default=12)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--mask-rate", type=float, default=0.15)


def _common(p, defaults: bool = True):
    d = (lambda v: {"default": v}) if defaults else (lambda v: {})
    p.add_argument("--config", help="key = value file; flags given on the command line win")
    p.add_argument("--threads", type=int, **d(None))
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--seed", type=int, **d(0))
    p.add_argument("-v", "--verbose", action="store_true", **d(False))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcmodel", description=__doc__.split("\n")[0])
    _common(ap)
    # the same options are accepted after the subcommand; SUPPRESS keeps the top-level value otherwise
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    _common(common, defaults=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("simulate", help="generate a CFR dataset")
    p.add_argument("--subcarriers", type=int, default=200)
    p.add_argument("--spacing", type=float, default=90e3)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--frame-interval", type=float, default=1e-3)
    p.add_argument("--antennas", type=int, default=2)
    p.add_argument("--carrier", type=float, default=1.9e9)
    p.add_argument("--speed", type=float, default=1.5)
    p.add_argument("--taps", type=int, default=6)
    p.add_argument("--rms-delay", type=float, default=0.5e-6)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--contaminate", type=int, action="append", help="frame to contaminate (repeatable)")
    p.add_argument("--sir", type=float, default=0.0)
    p.add_argument("--interferer-seed", type=int, default=1)
    p.add_argument("-o", "--output", default="dataset.cfrd")
    p.set_defaults(func=cmd_simulate)

    p = add("verify", help="summarise a dataset")
    p.add_argument("--data", action="append")
    p.add_argument("--expect-static", action="store_true", help="fail unless every frame equals frame 0")
    p.set_defaults(func=cmd_verify)

    p = add("build-vocab", help="build a vocabulary from datasets")
    p.add_argument("--data", action="append")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("-o", "--output", default="vocab.txt")
    p.set_defaults(func=cmd_build_vocab)

    p = add("pretrain", help="pretrain from scratch or resume")
    p.add_argument("--data", action="append")
    p.add_argument("--eval-data", action="append")
    p.add_argument("--vocab")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=256)
    p.add_argument("--tie", type=int, default=0)
    p.add_argument("--resume")
    _train_opts(p)
    p.add_argument("-o", "--output", default="checkpoint.rcmp")
    p.set_defaults(func=cmd_pretrain)

    p = add("eval", help="held-out MLM and next-frame metrics")
    _model_io(p, "eval.txt")
    p.add_argument("--max-examples", type=int, default=512)
    p.set_defaults(func=cmd_eval)

    p = add("find-scale", help="perplexity-minimising normaliser")
    _model_io(p, "scale_trace.txt")
    p.add_argument("--s-min", type=float, default=2.0 ** -4)
    p.add_argument("--s-max", type=float, default=2.0 ** 4)
    p.add_argument("--points", type=int, default=33)
    p.add_argument("--spacing", choices=("log", "linear"), default="log")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--eval-sequences", type=int, default=16)
    p.set_defaults(func=cmd_find_scale)

    p = add("transfer", help="continue pretraining on rescaled target data")
    _model_io(p, "transfer.rcmp")
    p.add_argument("--source-fmap")
    p.add_argument("--scale", type=float, default=1.0)
    _train_opts(p, epochs=1)
    p.set_defaults(func=cmd_transfer)

    p = add("detect", help="flag contaminated frame pairs")
    _model_io(p, "detect.txt")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--max-pairs", type=int, default=None)
    p.set_defaults(func=cmd_detect)

    p = add("mitigate", help="reconstruct a frame from its predecessor")
    _model_io(p, "mitigated.txt")
    p.add_argument("--frame", type=int, default=1)
    p.set_defaults(func=cmd_mitigate)

    p = add("compress", help="compression ratio and [CLS] codes")
    _model_io(p, "compress.txt")
    p.add_argument("--subcarriers", type=int, default=200)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--antennas", type=int, default=2)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--batch", type=int, default=12)
    p.add_argument("--hidden", type=int, default=768)
    p.set_defaults(func=cmd_compress)

    p = add("fingerprint", help="mean [CLS] fingerprints")
    _model_io(p, "fingerprints.txt")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_fingerprint)

    p = add("chart", help="t-SNE coordinates for fingerprints")
    p.add_argument("--fingerprints")
    p.add_argument("--perplexity", type=float, default=5.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--window", type=int, default=10, help="fingerprints per size-rank window")
    p.add_argument("-o", "--output", default="chart.txt")
    p.set_defaults(func=cmd_chart)

    p = add("attention", help="attention-domain profile")
    _model_io(p, "attention.txt")
    p.add_argument("--radius", type=int, default=5)
    p.add_argument("--max-pairs", type=int, default=16)
    p.set_defaults(func=cmd_attention)
    return ap


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(ap, argv, values):
    """Re-parse with config values as defaults so explicit flags still win."""
    sub = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
    args = ap.parse_args(argv)
    parsers = [ap, sub.choices[args.command]]
    for key, raw in values.items():
        for parser in parsers:
            action = next((a for a in parser._actions if a.dest == key), None)
            if action is None:
                continue
            if action.nargs == 0:
                val = raw.lower() in ("1", "true", "yes", "on")
            else:
                conv = action.type or str
                val = [conv(x.strip()) for x in raw.split(",")] if isinstance(action, argparse._AppendAction) \
                    else conv(raw)
            parser.set_defaults(**{key: val})
            break
        else:
            raise UsageError(f"unknown config key {key!r}")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.config:
            args = _apply_config(ap, argv, read_config_file(_existing(args.config, "config")))
        out = _out(args)
        write_snapshot(args, out / f"{args.command}.config")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (nn.NumericError, FloatingPointError, ScaleSearchError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, FeatureMapMismatch, ValueError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: synth, pretrain, diagnose, probe.

Exit codes: 0 success, 2 bad input or contract violation, 3 I/O failure,
4 training divergence, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, apply_override, apply_preset, load_config
from .diagnostics import (collect_traces, flop_report, gradient_decomposition,
                          layer_transitions, project_2d, sli_sweep, write_report)
from .encoder import (ConformerConfig, load_checkpoint, param_count,
                      store_from_checkpoint)
from .errors import (ConfigError, ContractError, DimensionError,
                     DivergenceError, InputError, InvariantError,
                     SharedformerError)
from .features import (LabeledCorpus, load_features, load_labels, save_features,
                       save_labels, synth_corpus)
from .training import train


def _split_overrides(argv: list[str]) -> tuple[list[str], list[tuple[str, str]]]:
    """Pull --section.key=value flags out of argv before argparse sees them."""
    plain, overrides = [], []
    for arg in argv:
        if arg.startswith("--") and "." in arg.split("=", 1)[0] and "=" in arg:
            dotted, _, value = arg[2:].partition("=")
            overrides.append((dotted, value))
        else:
            plain.append(arg)
    return plain, overrides


def _build_config(args, overrides) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.preset:
        apply_preset(cfg, args.preset)
    for dotted, value in overrides:
        apply_override(cfg, dotted, value)
    if args.threads is not None:
        cfg.train.threads = args.threads
    elif os.environ.get("LC_THREADS"):
        cfg.train.threads = int(os.environ["LC_THREADS"])
    return cfg


def _load_corpus(path, labels_path=None) -> LabeledCorpus:
    sequences = load_features(path)
    labels, num_classes = ([], 0)
    if labels_path is not None:
        by_id, num_classes = load_labels(labels_path)
        labels = []
        for seq in sequences:
            if seq.utterance_id not in by_id:
                raise InputError(f"no labels for utterance {seq.utterance_id!r}")
            labels.append(by_id[seq.utterance_id])
    return LabeledCorpus(sequences, labels, num_classes)


def _load_store(path):
    ck_cfg, tensors = load_checkpoint(path)
    return store_from_checkpoint(ck_cfg, tensors)


# ---- subcommands -------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    d = cfg.data
    corpus = synth_corpus(d.seed, d.num_utts, (d.t_min, d.t_max), d.dim,
                          d.num_classes, d.noise_sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_features(corpus.sequences, out / "features.bin")
    save_labels(corpus, out / "labels.bin")
    cfg.write_echo(out)
    frames = sum(s.num_frames for s in corpus.sequences)
    if d.num_utts == 0:
        print("warning: wrote an empty corpus (0 utterances)", file=sys.stderr)
    print(f"wrote {d.num_utts} utterances, {frames} frames, {d.num_classes} classes to {out}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    model_cfg = cfg.model_config()
    if args.preset == "paper":
        counts = param_count(model_cfg)
        rep = flop_report(model_cfg, cfg.diag.flop_frames)
        rows = [[k, v] for k, v in counts.items()]
        rows.append(["sli_block_ratio_m5", rep.sli_ratio_at(5)])
        rows.append(["expected_training_ratio", rep.expected_training_ratio])
        write_report(out / "paper_scale_report", ["quantity", "value"], rows)
        print("paper preset is config-emit only: wrote resolved config and scale report")
        return 0
    corpus = _load_corpus(args.data)
    result = train(corpus, model_cfg, cfg.train_config(), cfg.mask_config(),
                   out_dir=out, resume_from=args.resume)
    print(f"trained to step {result.final_step}; best validation loss "
          f"{result.best_val_loss:.6f} at step {result.best_step}")
    return 0


def cmd_diagnose(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    if args.which == "flops":
        model_cfg = _load_store(args.checkpoint).config if args.checkpoint else cfg.model_config()
        rep = flop_report(model_cfg, cfg.diag.flop_frames)
        rows = [[n, rep.flops(n), rep.block_flops(n)]
                for n in range(1, model_cfg.max_layers + 1)]
        write_report(out / "flops", ["layers", "total_macs", "block_macs"], rows)
        rows2 = [["expected_training_ratio", rep.expected_training_ratio],
                 ["sli_ratio_min_layers", rep.sli_ratio]]
        write_report(out / "flop_ratios", ["quantity", "value"], rows2)
        print(f"wrote FLOP report for {model_cfg.max_layers}-layer model to {out}")
        return 0

    if not args.checkpoint or not args.data:
        raise InputError(f"diagnose --which={args.which} needs --checkpoint and --data")
    store = _load_store(args.checkpoint)
    corpus = _load_corpus(args.data)
    if corpus.sequences and corpus.sequences[0].dim != store.config.input_dim:
        raise ContractError(
            f"feature dim mismatch: checkpoint expects {store.config.input_dim}, "
            f"found {corpus.sequences[0].dim}")
    mask_cfg = cfg.mask_config()

    if args.which == "transitions":
        idx = list(range(len(corpus.sequences)))
        traces = collect_traces(store, corpus, idx, mask_cfg)
        report = layer_transitions(traces, model_tag=str(args.checkpoint))
        rows = [[i, i + 1, report.l2_mean[i], report.cos_mean[i]]
                for i in range(len(report.l2_mean))]
        write_report(out / "transitions", ["layer_from", "layer_to", "l2_mean", "cos_mean"], rows)
        print(f"wrote {len(rows)} transition rows ({report.num_frames} frames) to {out}")
        return 0

    if args.which == "grads":
        with ad.precision("float64"):
            store64 = _load_store(args.checkpoint)
            batch = corpus.sequences[:cfg.train.batch_size]
            decomp = gradient_decomposition(store64, batch, cfg.diag.grad_depth, mask_cfg)
            decomp.assert_sum_identity()
        rows = [[i + 1, decomp.norms[i]] for i in range(len(decomp.norms))]
        write_report(out / "grad_norms", ["layer", "contribution_norm"], rows)
        rows2 = [["sum_rel_error", decomp.sum_rel_error],
                 ["total_norm", float(np.linalg.norm(decomp.total))],
                 ["last_layer_ratio", decomp.last_layer_ratio],
                 ["mean_pairwise_cosine", float(
                     decomp.pairwise_cosine[np.triu_indices(len(decomp.norms), 1)].mean())
                     if len(decomp.norms) > 1 else 1.0]]
        write_report(out / "grad_summary", ["quantity", "value"], rows2)
        print(f"gradient decomposition over {len(decomp.norms)} layers written to {out}")
        return 0

    if args.which == "project":
        idx = [cfg.diag.utterance]
        if idx[0] >= len(corpus.sequences):
            raise InputError(f"diag.utterance={idx[0]} but corpus has {len(corpus.sequences)} utterances")
        trace = collect_traces(store, corpus, idx, mask_cfg)[0]
        end = min(cfg.diag.frame_end, trace.embeddings[0].shape[0])
        proj = project_2d(trace, (cfg.diag.frame_start, end))
        rows = []
        for layer, coords in enumerate(proj.coords):
            for frame, (pc1, pc2) in enumerate(coords):
                rows.append([layer, cfg.diag.frame_start + frame, float(pc1), float(pc2)])
        write_report(out / "projection", ["layer", "frame", "pc1", "pc2"], rows)
        print(f"wrote 2-D projection ({len(rows)} points, degenerate={proj.degenerate}) to {out}")
        return 0

    raise InputError(f"unknown diagnostic {args.which!r}")


def cmd_probe(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    store = _load_store(args.checkpoint)
    corpus = _load_corpus(args.data, args.labels)
    layers = [int(tok) for tok in args.layers.split(",") if tok.strip()]
    if len(set(layers)) != len(layers):
        print("warning: duplicate layer entries removed", file=sys.stderr)
    results = sli_sweep(store, corpus, layers, seed=cfg.train.seed)
    rows = [[r.layer, r.accuracy] for r in results]
    write_report(out / "sweep", ["layer", "accuracy"], rows)
    for r in results:
        print(f"layer {r.layer}: frame accuracy {r.accuracy:.4f}")
    return 0


# ---- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sharedformer",
        description="Parameter-shared Conformer pretraining with sampled depth, "
                    "shallow inference, and layer-similarity diagnostics.")
    p.add_argument("--config", help="config file ([section] key=value lines)")
    p.add_argument("--preset", help="named preset: desk-shared-u28, desk-unshared-8, paper")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads; 1 guarantees bitwise reproducibility "
                        "(env LC_THREADS is the fallback)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic labeled corpus")
    s.add_argument("--out", required=True)

    s = sub.add_parser("pretrain", help="run masked-reconstruction pretraining")
    s.add_argument("--data", help="feature file")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("diagnose", help="run one diagnostic and write reports")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--which", required=True,
                   choices=["transitions", "grads", "project", "flops"])

    s = sub.add_parser("probe", help="linear probes over shallow-inference depths")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--layers", required=True, help="comma-separated depths, e.g. 5,6,7,8")
    s.add_argument("--out", required=True)

    return p


_HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain,
             "diagnose": cmd_diagnose, "probe": cmd_probe}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    plain, overrides = _split_overrides(argv)
    parser = build_parser()
    args = parser.parse_args(plain)
    try:
        cfg = _build_config(args, overrides)
        if args.command == "pretrain" and args.preset != "paper" and not args.data:
            raise InputError("pretrain needs --data (or --preset paper for config-emit mode)")
        return _HANDLERS[args.command](args, cfg)
    except (InputError, ContractError, ConfigError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 4
    except InvariantError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 5
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except SharedformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())

"""Masked-reconstruction pretraining loop.

Per iteration: sample a depth, mask each batch utterance, run that many
encoder layers, predict the clean frames with the linear head, take the mean
L1 loss, backprop, and apply one Adam step under the warmup/inverse-sqrt
schedule. Validation runs at full depth without dropout, using a fixed mask
per utterance (seeded by its id) so the validation loss is deterministic; the
checkpoint with the best validation loss is retained.

All per-step randomness is derived from (seed, stream, step), so resuming
from a checkpoint reproduces the uninterrupted run bitwise.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (ConformerConfig, ParameterStore, forward, param_count,
                      sample_depth, save_checkpoint, store_from_checkpoint)
from .errors import ConfigError, ContractError, DivergenceError
from .features import FeatureSequence, LabeledCorpus
from .masking import MaskConfig, MaskPlan, apply_masks, plan_masks
from .rng import substream, utterance_seed


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 2000
    warmup_steps: int = 200
    peak_scale: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    validation_every: int = 100
    seed: int = 0
    depth_mode: str = "uniform"  # "fixed" | "uniform"
    depth_fixed: int = 8
    depth_low: int = 2
    depth_high: int = 8
    loss_mode: str = "all-frames"  # "all-frames" | "masked-only"
    val_fraction: float = 0.1
    grad_clip: float = 0.0  # max global norm; 0 disables
    threads: int = 1
    precision: str = "float32"

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.depth_mode not in ("fixed", "uniform"):
            raise ConfigError(f"depth_mode must be 'fixed' or 'uniform', got {self.depth_mode!r}")
        if self.loss_mode not in ("all-frames", "masked-only"):
            raise ConfigError(f"loss_mode must be 'all-frames' or 'masked-only', got {self.loss_mode!r}")


# ---- building blocks ---------------------------------------------------------


def predictor_apply(embeddings: Tensor, store: ParameterStore) -> Tensor:
    """Per-frame affine map from model_dim back to the input feature space."""
    if embeddings.shape[1] != store.config.model_dim:
        raise ContractError(f"embeddings are {embeddings.shape}, expected T x {store.config.model_dim}")
    return embeddings @ store.params["predictor.w"] + store.params["predictor.b"]


def mpc_loss(pred: Tensor, target, plan: MaskPlan | None = None,
             mode: str = "all-frames") -> Tensor:
    """Mean L1 distance between prediction and clean frames."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} vs target {target.shape}")
    if mode == "all-frames":
        return (pred - target).abs().mean()
    if mode == "masked-only":
        if plan is None or plan.num_masked == 0:
            raise ContractError("masked-only loss needs a plan with at least one masked frame")
        rows = plan.mask_rows()
        return (pred[rows] - target[rows]).abs().mean()
    raise ContractError(f"unknown loss mode {mode!r}")


def noam_lr(step: int, warmup: int, model_dim: int, scale: float) -> float:
    """Warmup-then-inverse-sqrt schedule: scale * d^-1/2 * min(s^-1/2, s * w^-3/2)."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, store: ParameterStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9,
              grad_clip: float = 0.0) -> None:
    """One bias-corrected Adam update over every parameter, in a fixed order."""
    named = store.named_parameters()
    for name, p in named:
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    if grad_clip > 0.0:
        total = np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in named if p.grad is not None))
        if total > grad_clip:
            factor = grad_clip / total
            for _, p in named:
                if p.grad is not None:
                    p.grad = p.grad * factor
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


# ---- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    store: ParameterStore
    metrics: list[dict]
    best_step: int
    best_val_loss: float
    final_step: int
    cum_layer_apps: int


def split_corpus(corpus: LabeledCorpus, seed: int, val_fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/validation index split by shuffled utterance order."""
    n = len(corpus.sequences)
    if n < 2:
        raise ContractError("need at least 2 utterances to split train/validation")
    perm = substream(seed, "data").permutation(n)
    val_count = max(1, int(round(n * val_fraction)))
    if val_count >= n:
        raise ContractError("validation split would consume the whole corpus")
    return [int(i) for i in perm[val_count:]], [int(i) for i in perm[:val_count]]


def _utterance_loss(seq: FeatureSequence, store: ParameterStore, cfg: TrainConfig,
                    mask_cfg: MaskConfig, n_layers: int, step: int, slot: int) -> Tensor:
    plan = plan_masks(seq.num_frames, mask_cfg.block_len, mask_cfg.ratio,
                      substream(cfg.seed, "mask", step, slot))
    corrupted = apply_masks(seq, plan, mask_cfg.policy,
                            substream(cfg.seed, "mask", step, slot, 1))
    emb, _ = forward(Tensor(corrupted.frames), store, n_layers, train_mode=True,
                     rng=substream(cfg.seed, "dropout", step, slot))
    pred = predictor_apply(emb, store)
    return mpc_loss(pred, seq.frames, plan, cfg.loss_mode)


def validation_loss(store: ParameterStore, corpus: LabeledCorpus, val_idx: list[int],
                    cfg: TrainConfig, mask_cfg: MaskConfig) -> float:
    """Full-depth loss over the validation split with fixed per-utterance masks."""
    total = 0.0
    for i in val_idx:
        seq = corpus.sequences[i]
        rng = np.random.default_rng(utterance_seed(seq.utterance_id))
        plan = plan_masks(seq.num_frames, mask_cfg.block_len, mask_cfg.ratio, rng)
        corrupted = apply_masks(seq, plan, mask_cfg.policy, rng)
        emb, _ = forward(Tensor(corrupted.frames), store, store.config.max_layers)
        pred = predictor_apply(emb, store)
        total += float(mpc_loss(pred, seq.frames, plan, cfg.loss_mode).data)
    return total / len(val_idx)


def train(corpus: LabeledCorpus, model_cfg: ConformerConfig, cfg: TrainConfig,
          mask_cfg: MaskConfig | None = None, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> TrainResult:
    with ad.precision(cfg.precision):
        return _train_impl(corpus, model_cfg, cfg, mask_cfg, out_dir, resume_from)


def _train_impl(corpus: LabeledCorpus, model_cfg: ConformerConfig, cfg: TrainConfig,
                mask_cfg: MaskConfig | None, out_dir: str | Path | None,
                resume_from: str | Path | None) -> TrainResult:
    mask_cfg = mask_cfg or MaskConfig()
    if cfg.depth_mode == "fixed" and not (0 <= cfg.depth_fixed <= model_cfg.max_layers):
        raise ConfigError(f"fixed depth {cfg.depth_fixed} outside [0, {model_cfg.max_layers}]")

    train_idx, val_idx = split_corpus(corpus, cfg.seed, cfg.val_fraction)

    adam = AdamState()
    start_step = 0
    best_val = float("inf")
    best_step = 0
    cum_layer_apps = 0
    if resume_from is not None:
        ck_cfg, tensors = _load_train_checkpoint(resume_from)
        store = store_from_checkpoint(ck_cfg, tensors)
        for name, arr in tensors.items():
            if name.startswith("adam.m."):
                adam.m[name[len("adam.m."):]] = arr.astype(ad.get_default_dtype())
            elif name.startswith("adam.v."):
                adam.v[name[len("adam.v."):]] = arr.astype(ad.get_default_dtype())
        start_step = int(ck_cfg.get("train.step", "0"))
        adam.step = start_step
        best_val = float(ck_cfg.get("train.best_val_loss", "inf"))
        best_step = int(ck_cfg.get("train.best_step", "0"))
        cum_layer_apps = int(ck_cfg.get("train.cum_layer_apps", "0"))
    else:
        store = ParameterStore.init(model_cfg, substream(cfg.seed, "init"))

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        metrics_file = open(out_dir / "metrics.jsonl", mode, encoding="utf-8")

    metrics: list[dict] = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for step in range(start_step + 1, cfg.max_steps + 1):
            t0 = time.monotonic()
            if cfg.depth_mode == "fixed":
                n_layers = cfg.depth_fixed
            else:
                n_layers = sample_depth(cfg.depth_low, cfg.depth_high,
                                        substream(cfg.seed, "depth", step))
            batch_rng = substream(cfg.seed, "data", step)
            replace = len(train_idx) < cfg.batch_size
            batch = batch_rng.choice(train_idx, size=cfg.batch_size, replace=replace)

            args = [(corpus.sequences[int(i)], store, cfg, mask_cfg, n_layers, step, slot)
                    for slot, i in enumerate(batch)]
            if pool is not None:
                losses = list(pool.map(lambda a: _utterance_loss(*a), args))
            else:
                losses = [_utterance_loss(*a) for a in args]
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            train_loss = float((total * (1.0 / cfg.batch_size)).data)
            if not np.isfinite(train_loss):
                if out_dir is not None:
                    _save_train_checkpoint(out_dir / "final.ckpt", store, adam, step - 1,
                                           best_val, best_step, cfg, cum_layer_apps)
                raise DivergenceError(f"training loss became non-finite at step {step}")

            # backprop each utterance separately, in slot order, so gradients
            # accumulate into the shared parameters in the same order no matter
            # how many threads built the forward graphs
            store.zero_grad()
            for utt_loss in losses:
                (utt_loss * (1.0 / cfg.batch_size)).backward()
            lr = noam_lr(step, cfg.warmup_steps, model_cfg.model_dim, cfg.peak_scale)
            adam_step(adam, store, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip)
            cum_layer_apps += n_layers * cfg.batch_size

            val = None
            # validation stays on the fixed grid even when max_steps is not a
            # multiple, so a shorter run logs a prefix of the longer run's rows
            if step % cfg.validation_every == 0:
                val = validation_loss(store, corpus, val_idx, cfg, mask_cfg)
                if val < best_val:
                    best_val = val
                    best_step = step
                    if out_dir is not None:
                        _save_train_checkpoint(out_dir / "best.ckpt", store, adam, step,
                                               best_val, best_step, cfg, cum_layer_apps)

            wall_ms = None if cfg.threads == 1 else round((time.monotonic() - t0) * 1e3, 3)
            row = {"step": step, "sampled_depth": n_layers, "lr": lr,
                   "train_loss": train_loss, "val_loss": val,
                   "cum_layer_apps": cum_layer_apps, "wall_ms": wall_ms}
            metrics.append(row)
            if metrics_file is not None:
                metrics_file.write(json.dumps(row) + "\n")
    finally:
        if pool is not None:
            pool.shutdown()
        if metrics_file is not None:
            metrics_file.close()

    if out_dir is not None:
        _save_train_checkpoint(out_dir / "final.ckpt", store, adam, cfg.max_steps,
                               best_val, best_step, cfg, cum_layer_apps)
    return TrainResult(store, metrics, best_step, best_val, cfg.max_steps, cum_layer_apps)


# ---- train-state checkpointing ----------------------------------------------


def _save_train_checkpoint(path, store: ParameterStore, adam: AdamState, step: int,
                           best_val: float, best_step: int, cfg: TrainConfig,
                           cum_layer_apps: int) -> None:
    extra_cfg = {
        "train.step": str(step),
        "train.best_val_loss": repr(best_val),
        "train.best_step": str(best_step),
        "train.seed": str(cfg.seed),
        "train.cum_layer_apps": str(cum_layer_apps),
    }
    extra_tensors = {f"adam.m.{k}": v for k, v in adam.m.items()}
    extra_tensors.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    save_checkpoint(path, store, extra_cfg, extra_tensors)


def _load_train_checkpoint(path):
    from .encoder import load_checkpoint
    return load_checkpoint(path)

"""Measurements behind the efficiency and layer-similarity claims.

Includes consecutive-layer transition metrics (L2 / cosine), a per-layer
decomposition of the shared parameter gradient, analytic multiply-accumulate
counts with depth-policy ratios, deterministic PCA scatter projections, and a
frozen-feature linear probe with a shallow-inference sweep.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (ConformerConfig, LayerTrace, ParameterStore,
                      conformer_block, forward, sli_forward)
from .errors import ContractError, InvariantError
from .features import FeatureSequence, LabeledCorpus
from .masking import MaskConfig, apply_masks, plan_masks
from .rng import substream, utterance_seed
from .training import predictor_apply, mpc_loss

SCHEMA_VERSION = 1


# ---- layer transitions -------------------------------------------------------


@dataclass
class ConsistencyReport:
    l2_mean: list[float]       # entry i: transition i -> i+1
    cos_mean: list[float]
    model_tag: str
    num_frames: int

    def mean_cosine(self, from_layer: int = 0) -> float:
        vals = self.cos_mean[from_layer:]
        return float(np.mean(vals))


def layer_transitions(traces: list[LayerTrace], model_tag: str = "") -> ConsistencyReport:
    """Frame-wise L2 distance and cosine similarity between consecutive layers,
    averaged over all frames of all traces."""
    if not traces:
        raise ContractError("need at least one trace")
    depth = traces[0].depth
    if any(t.depth != depth for t in traces):
        raise ContractError("traces disagree on depth")
    l2_sums = np.zeros(depth)
    cos_sums = np.zeros(depth)
    total = 0
    for trace in traces:
        total += trace.embeddings[0].shape[0]
        for i in range(depth):
            a = trace.embeddings[i].astype(np.float64)
            b = trace.embeddings[i + 1].astype(np.float64)
            diff = b - a
            l2_sums[i] += np.sqrt((diff ** 2).sum(axis=1)).sum()
            na = np.sqrt((a ** 2).sum(axis=1))
            nb = np.sqrt((b ** 2).sum(axis=1))
            denom = np.maximum(na * nb, 1e-12)
            cos_sums[i] += ((a * b).sum(axis=1) / denom).sum()
    return ConsistencyReport(
        l2_mean=[float(v / total) for v in l2_sums],
        cos_mean=[float(v / total) for v in cos_sums],
        model_tag=model_tag,
        num_frames=total,
    )


# ---- gradient decomposition --------------------------------------------------


@dataclass
class GradDecomposition:
    contributions: list[np.ndarray]   # flattened g_i per layer application
    total: np.ndarray                 # flattened gradient of the shared group
    norms: list[float]
    pairwise_cosine: np.ndarray       # N x N
    last_layer_ratio: float           # ||g|| / (N * ||g_N||)
    sum_rel_error: float

    def assert_sum_identity(self, tol: float = 1e-6) -> None:
        if self.sum_rel_error > tol:
            raise InvariantError(
                f"per-layer gradient contributions sum off by {self.sum_rel_error:.3e} (> {tol})")


def _shared_group_names(store: ParameterStore) -> list[str]:
    return sorted(k for k in store.params if k.startswith("layer.shared."))


def _flatten(tensors: dict[str, Tensor], names: list[str], grad: bool) -> np.ndarray:
    parts = []
    for n in names:
        t = tensors[n]
        arr = t.grad if grad else t.data
        parts.append((np.zeros_like(t.data) if arr is None else arr).ravel())
    return np.concatenate(parts)


def gradient_decomposition(store: ParameterStore, batch: list[FeatureSequence],
                           n_layers: int, mask_cfg: MaskConfig | None = None) -> GradDecomposition:
    """Split the shared-group gradient into per-layer-application contributions.

    The shared group is replaced by one independent copy per application, so
    each copy's gradient isolates that layer's contribution; their sum is
    verified against a standard shared backward on the identical loss.
    """
    cfg = store.config
    if not cfg.share_params:
        raise ContractError("gradient decomposition requires a parameter-shared store")
    if not batch:
        raise ContractError("empty batch")
    mask_cfg = mask_cfg or MaskConfig()
    names = _shared_group_names(store)
    short = [n[len("layer.shared."):] for n in names]

    def batch_loss(groups: list[dict[str, Tensor]]) -> Tensor:
        total = None
        for seq in batch:
            rng = np.random.default_rng(utterance_seed(seq.utterance_id))
            plan = plan_masks(seq.num_frames, mask_cfg.block_len, mask_cfg.ratio, rng)
            corrupted = apply_masks(seq, plan, mask_cfg.policy, rng)
            h = Tensor(corrupted.frames) @ store.params["frontend.w"] + store.params["frontend.b"]
            for g in groups:
                h = conformer_block(h, g, cfg)
            pred = predictor_apply(h, store)
            loss = mpc_loss(pred, seq.frames, plan)
            total = loss if total is None else total + loss
        return total * (1.0 / len(batch))

    shared = {s: store.params["layer.shared." + s] for s in short}

    # per-application aliases
    aliases = [
        {s: Tensor(shared[s].data.copy(), requires_grad=True) for s in short}
        for _ in range(n_layers)
    ]
    store.zero_grad()
    batch_loss(aliases).backward()
    contributions = [_flatten(alias, short, grad=True) for alias in aliases]

    # reference: one shared group applied n_layers times
    store.zero_grad()
    batch_loss([shared] * n_layers).backward()
    total = _flatten(shared, short, grad=True)
    store.zero_grad()

    summed = np.sum(contributions, axis=0)
    rel = float(np.linalg.norm(summed - total) / max(np.linalg.norm(total), 1e-12))
    norms = [float(np.linalg.norm(g)) for g in contributions]
    n = len(contributions)
    cos = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            denom = max(norms[i] * norms[j], 1e-12)
            cos[i, j] = cos[j, i] = float(contributions[i] @ contributions[j]) / denom
    ratio = float(np.linalg.norm(total) / max(n * norms[-1], 1e-12))
    return GradDecomposition(contributions, total, norms, cos, ratio, rel)


# ---- 2-D projection ----------------------------------------------------------


@dataclass
class Projection2D:
    coords: list[np.ndarray]          # per layer: (num_frames, 2)
    explained_variance: np.ndarray    # top-2 eigenvalue shares
    components: np.ndarray = field(default_factory=lambda: np.zeros((2, 0)))  # (2, d)
    center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    degenerate: bool = False


def project_2d(trace: LayerTrace, frame_range: tuple[int, int]) -> Projection2D:
    """PCA scatter of the selected frames, fitted on the pool of all layers."""
    start, end = frame_range
    if end - start < 3:
        raise ContractError(f"frame range must cover >= 3 frames, got {frame_range}")
    layers = [e[start:end].astype(np.float64) for e in trace.embeddings]
    pool = np.concatenate(layers, axis=0)
    center = pool.mean(axis=0)
    pool = pool - center
    cov_scale = pool.shape[0]
    u, s, vt = np.linalg.svd(pool, full_matrices=False)
    var = s ** 2 / cov_scale
    if var.sum() <= 1e-24:
        zero = [np.zeros((end - start, 2)) for _ in layers]
        return Projection2D(zero, np.zeros(2), degenerate=True)
    components = vt[:2]
    coords = [(layer - center) @ components.T for layer in layers]
    share = var[:2] / var.sum() if var.size >= 2 else np.array([1.0, 0.0])
    return Projection2D(coords, share, components=components, center=center)


# ---- FLOP accounting ---------------------------------------------------------


@dataclass
class FlopReport:
    frontend: int
    per_block: int
    predictor: int
    depth_low: int
    depth_high: int

    def flops(self, n_layers: int) -> int:
        return self.frontend + n_layers * self.per_block + self.predictor

    def block_flops(self, n_layers: int) -> int:
        return n_layers * self.per_block

    @property
    def sli_ratio(self) -> float:
        """SLI block compute relative to the full stack (defaults to min layers)."""
        return self.depth_low / self.depth_high

    def sli_ratio_at(self, m: int) -> float:
        return m / self.depth_high

    @property
    def expected_training_ratio(self) -> float:
        """Expected block compute of uniform depth sampling vs fixed full depth."""
        return (self.depth_low + self.depth_high) / 2.0 / self.depth_high


def flop_report(cfg: ConformerConfig, T: int) -> FlopReport:
    """Analytic multiply-accumulate counts; norms and softmax are not counted."""
    d, D, ff, k = cfg.model_dim, cfg.input_dim, cfg.ff_dim, cfg.conv_kernel
    ff_macs = 2 * T * d * ff           # one feed-forward (in + out projection)
    attn_macs = 4 * T * d * d + 2 * T * T * d
    conv_macs = T * d * 2 * d + T * k * d + T * d * d
    per_block = 2 * ff_macs + attn_macs + conv_macs
    return FlopReport(frontend=T * D * d, per_block=per_block, predictor=T * d * D,
                      depth_low=cfg.min_layers, depth_high=cfg.max_layers)


# ---- linear probe ------------------------------------------------------------


@dataclass
class ProbeResult:
    layer: int
    accuracy: float
    per_class_accuracy: list[float]


@dataclass
class ProbeConfig:
    steps: int = 400
    lr: float = 0.5
    momentum: float = 0.9


def linear_probe(train_x: np.ndarray, train_y: np.ndarray,
                 test_x: np.ndarray, test_y: np.ndarray,
                 num_classes: int, layer: int = 0,
                 config: ProbeConfig | None = None) -> ProbeResult:
    """Affine softmax classifier on frozen features, full-batch gradient descent.

    Deterministic: zero init, fixed step budget, train-split standardization.
    """
    if len(np.unique(train_y)) < 2:
        raise ContractError("probe needs at least two classes in the training labels")
    config = config or ProbeConfig()
    mu = train_x.mean(axis=0)
    sd = np.maximum(train_x.std(axis=0), 1e-8)
    xtr = ((train_x - mu) / sd).astype(np.float64)
    xte = ((test_x - mu) / sd).astype(np.float64)
    n, d = xtr.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), train_y] = 1.0
    for _ in range(config.steps):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        gl = (p - onehot) / n
        gw = xtr.T @ gl
        gb = gl.sum(axis=0)
        vw = config.momentum * vw - config.lr * gw
        vb = config.momentum * vb - config.lr * gb
        w += vw
        b += vb
    pred = np.argmax(xte @ w + b, axis=1)
    acc = float(np.mean(pred == test_y))
    per_class = []
    for c in range(num_classes):
        mask = test_y == c
        per_class.append(float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
    return ProbeResult(layer, acc, per_class)


def probe_split(corpus: LabeledCorpus, seed: int, test_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Disjoint train/held-out utterance split for probing."""
    n = len(corpus.sequences)
    perm = substream(seed, "probe").permutation(n)
    cut = max(1, int(round(n * test_fraction)))
    if cut >= n:
        raise ContractError("probe split would consume the whole corpus")
    return [int(i) for i in perm[cut:]], [int(i) for i in perm[:cut]]


def layer_embeddings(store: ParameterStore, corpus: LabeledCorpus, idx: list[int],
                     m: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled frame embeddings and labels for the given utterances at depth m."""
    xs, ys = [], []
    for i in idx:
        seq = corpus.sequences[i]
        emb = sli_forward(Tensor(seq.frames), store, m)
        xs.append(emb.data.astype(np.float64))
        ys.append(corpus.labels[i])
    return np.concatenate(xs, axis=0), np.concatenate(ys)


def sli_sweep(store: ParameterStore, corpus: LabeledCorpus, layers: list[int],
              seed: int = 0, probe_config: ProbeConfig | None = None) -> list[ProbeResult]:
    """One linear probe per shallow-inference depth; results sorted by depth."""
    H = store.config.max_layers
    for m in layers:
        if not (1 <= m <= H):
            raise ContractError(f"sweep layer {m} outside [1, {H}]")
    train_idx, test_idx = probe_split(corpus, seed)
    results = []
    for m in sorted(set(layers)):
        xtr, ytr = layer_embeddings(store, corpus, train_idx, m)
        xte, yte = layer_embeddings(store, corpus, test_idx, m)
        res = linear_probe(xtr, ytr, xte, yte, corpus.num_classes, layer=m,
                           config=probe_config)
        results.append(res)
    return results


# ---- report emission ---------------------------------------------------------


def write_report(path_base: str | Path, header: list[str], rows: list[list]) -> None:
    """Write rows as <base>.csv and <base>.jsonl (with schema_version)."""
    base = Path(path_base)
    with open(base.with_suffix(".csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    with open(base.with_suffix(".jsonl"), "w", encoding="utf-8") as f:
        for row in rows:
            obj = {"schema_version": SCHEMA_VERSION}
            obj.update(dict(zip(header, row)))
            f.write(json.dumps(obj) + "\n")


def collect_traces(store: ParameterStore, corpus: LabeledCorpus, idx: list[int],
                   mask_cfg: MaskConfig | None = None, masked: bool = True) -> list[LayerTrace]:
    """Full-depth traced forwards over the given utterances (fixed masks)."""
    mask_cfg = mask_cfg or MaskConfig()
    traces = []
    for i in idx:
        seq = corpus.sequences[i]
        frames = seq.frames
        if masked:
            rng = np.random.default_rng(utterance_seed(seq.utterance_id))
            plan = plan_masks(seq.num_frames, mask_cfg.block_len, mask_cfg.ratio, rng)
            frames = apply_masks(seq, plan, mask_cfg.policy, rng).frames
        _, trace = forward(Tensor(frames), store, store.config.max_layers, collect_trace=True)
        traces.append(trace)
    return traces

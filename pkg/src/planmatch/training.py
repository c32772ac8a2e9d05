"""End-to-end training of the encoder through the soft-assignment pipeline.

The loss is element-wise binary cross-entropy between the Sinkhorn output
restricted to real observation columns and the 0/1 ground-truth assignment
matrix. Gradients flow through the unrolled Sinkhorn sweeps, instance
normalization, the affinity product, and both encoder passes (the encoder is
shared, so both graphs' gradients accumulate into the same tensors).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Corpus, GroundTruth
from .graphs import FeatureStats, SceneGraph, augment_edges, compute_feature_stats, standardize_features
from .matching import (
    INSTNORM_EPS,
    TRAIN_SINKHORN_ITERS,
    affinity,
    instance_normalize,
    instance_normalize_backward,
    pad_dummy_columns,
    sinkhorn,
    sinkhorn_backward,
)
from .nn.encoder import (
    AttentionEdges,
    Mode,
    encoder_backward,
    encoder_forward,
    stack_encoder_weights,
)
from .nn.params import ArchConfig, EncoderParams

LOSS_CLAMP = 1e-7


class TrainingError(RuntimeError):
    """Training cannot proceed (bad inputs, non-finite loss or gradients)."""


def build_gt_matrix(gt: GroundTruth, n1: int, n2: int) -> np.ndarray:
    """0/1 matrix with plan rows and observation columns; column s carries a
    single 1 in the row gt maps s to. Every column must be assigned."""
    P = np.zeros((n1, n2))
    if len(gt.pairs) != n2:
        raise TrainingError(f"ground truth covers {len(gt.pairs)} of {n2} observation nodes")
    for s, a in gt.pairs:
        if not (0 <= s < n2 and 0 <= a < n1):
            raise TrainingError(f"ground truth pair ({s}, {a}) out of range for {n1}x{n2}")
        P[a, s] = 1.0
    return P


def permutation_loss(S_real: np.ndarray, P_gt: np.ndarray) -> float:
    """Mean element-wise binary cross-entropy, probabilities clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    if S_real.shape != P_gt.shape:
        raise TrainingError(f"shape mismatch: scores {S_real.shape}, targets {P_gt.shape}")
    s = np.clip(S_real, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return float(np.mean(-P_gt * np.log(s) - (1.0 - P_gt) * np.log(1.0 - s)))


def permutation_loss_backward(S_real: np.ndarray, P_gt: np.ndarray) -> np.ndarray:
    """d(mean BCE)/dS. Entries outside the clamp range get zero gradient."""
    s = np.clip(S_real, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    g = (s - P_gt) / (s * (1.0 - s)) / S_real.size
    inside = (S_real > LOSS_CLAMP) & (S_real < 1.0 - LOSS_CLAMP)
    return np.where(inside, g, 0.0)


# ---------------------------------------------------------------------------
# AdamW.


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    batch_size: int = 16
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    sinkhorn_train_iters: int = TRAIN_SINKHORN_ITERS
    sinkhorn_temperature: float = 1.0
    instnorm_eps: float = INSTNORM_EPS
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise TrainingError("learning_rate must be positive and batch_size at least 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise TrainingError("max_epochs and patience must be at least 1")
        if self.weight_decay < 0 or self.sinkhorn_train_iters < 1:
            raise TrainingError("weight_decay must be >= 0 and sinkhorn_train_iters >= 1")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def initialize(cls, params: EncoderParams) -> "AdamWState":
        return cls(m=params.zero_grads(), v=params.zero_grads())


def adamw_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    config: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay first (p *= 1 - lr*wd), then the bias-corrected Adam step. Biases
    are not exempt from decay.
    """
    state.step += 1
    t = state.step
    lr, wd = config.learning_rate, config.weight_decay
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in params.named():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {t}")
        if wd != 0.0:
            p *= 1.0 - lr * wd
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


# ---------------------------------------------------------------------------
# Differentiable pipeline for one (plan, observation) sample.


@dataclass
class PreparedSample:
    """Augmented graph pair with its ground-truth matrix, ready for training."""

    a_graph: SceneGraph
    s_graph: SceneGraph
    P_gt: np.ndarray
    a_edges: AttentionEdges | None = None
    s_edges: AttentionEdges | None = None

    @classmethod
    def from_raw(cls, a_graph: SceneGraph, s_graph: SceneGraph, gt: GroundTruth) -> "PreparedSample":
        a_aug = augment_edges(a_graph)
        s_aug = augment_edges(s_graph)
        return cls(
            a_graph=a_aug, s_graph=s_aug,
            P_gt=build_gt_matrix(gt, a_graph.n_nodes, s_graph.n_nodes),
            a_edges=AttentionEdges.from_graph(a_aug),
            s_edges=AttentionEdges.from_graph(s_aug),
        )

    def bind_stats(self, stats: FeatureStats) -> "PreparedSample":
        """Bake standardized features in, so repeated passes skip the work."""
        return PreparedSample(
            a_graph=standardize_features(self.a_graph, stats),
            s_graph=standardize_features(self.s_graph, stats),
            P_gt=self.P_gt, a_edges=self.a_edges, s_edges=self.s_edges,
        )


def sample_loss(
    sample: PreparedSample,
    params: EncoderParams,
    stats: FeatureStats,
    mode: Mode = Mode.EVAL,
    rng: np.random.Generator | None = None,
    sinkhorn_iters: int = TRAIN_SINKHORN_ITERS,
    temperature: float = 1.0,
    instnorm_eps: float = INSTNORM_EPS,
    want_grads: bool = False,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Loss (and optionally parameter gradients) for one sample.

    The plan graph is encoded before the observation graph, which fixes the
    Train-mode rng consumption order. Sinkhorn always runs the fixed unroll
    here so training and validation losses are comparable. Samples already
    bound to stats (features present) are used as-is.
    """
    a_graph = sample.a_graph
    s_graph = sample.s_graph
    if a_graph.features is None:
        a_graph = standardize_features(a_graph, stats)
    if s_graph.features is None:
        s_graph = standardize_features(s_graph, stats)
    n2 = s_graph.n_nodes
    stacked = stack_encoder_weights(params)
    H1, cache_a = encoder_forward(
        a_graph, params, mode=mode, rng=rng, edges=sample.a_edges, stacked=stacked)
    H2, cache_s = encoder_forward(
        s_graph, params, mode=mode, rng=rng, edges=sample.s_edges, stacked=stacked)
    A = affinity(H1, H2)
    An, in_cache = instance_normalize(A, eps=instnorm_eps)
    Ap = pad_dummy_columns(An)
    soft = sinkhorn(Ap, n_real_cols=n2, temperature=temperature, unroll=sinkhorn_iters)
    S_real = soft.values[:, :n2]
    loss = permutation_loss(S_real, sample.P_gt)
    if not want_grads:
        return loss, None

    gS_real = permutation_loss_backward(S_real, sample.P_gt)
    gS = np.zeros_like(soft.values)
    gS[:, :n2] = gS_real  # dummy columns receive no direct loss gradient
    gAp = sinkhorn_backward(soft, gS)
    gAn = gAp[:, :n2]
    gA = instance_normalize_backward(in_cache, gAn)
    gH1 = gA @ H2
    gH2 = gA.T @ H1
    grads = params.zero_grads()
    encoder_backward(cache_a, params, gH1, grads)
    encoder_backward(cache_s, params, gH2, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Training loop.


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def n_epochs(self) -> int:
        return len(self.train_loss)

    def to_json_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "n_epochs": self.n_epochs,
        }


@dataclass
class TrainResult:
    params: EncoderParams
    stats: FeatureStats
    history: History
    epoch_times_s: list[float] = field(default_factory=list)


def train(
    corpus: Corpus,
    config: TrainConfig = TrainConfig(),
    arch: ArchConfig = ArchConfig(),
    initial_params: EncoderParams | None = None,
    log=None,
) -> TrainResult:
    """Train the encoder on a split corpus and return the best checkpoint.

    Feature statistics come from the train split only (all nodes of both
    graphs of each sample). Per epoch: seeded shuffle of the train samples,
    mini-batches of gradients averaged over the batch in shuffled order, one
    AdamW step per batch, then a full Eval-mode validation pass with the same
    fixed Sinkhorn unroll. Early stopping tracks the best validation loss and
    gives up after ``patience`` epochs without strict improvement; the
    parameters returned are the best epoch's copy, not the last.
    """
    config.validate()
    train_raw = corpus.split_samples("train")
    val_raw = corpus.split_samples("val")
    if not train_raw or not val_raw:
        raise TrainingError(
            f"corpus needs non-empty train and val splits, got {len(train_raw)}/{len(val_raw)}"
        )
    stats = compute_feature_stats(
        [s.a_graph for s in train_raw] + [s.s_graph for s in train_raw]
    )
    train_samples = [
        PreparedSample.from_raw(s.a_graph, s.s_graph, s.ground_truth).bind_stats(stats)
        for s in train_raw
    ]
    val_samples = [
        PreparedSample.from_raw(s.a_graph, s.s_graph, s.ground_truth).bind_stats(stats)
        for s in val_raw
    ]

    init_seed, loop_seed = (
        int(x) for x in np.random.SeedSequence(config.seed).generate_state(2, dtype=np.uint64)
    )
    params = initial_params.copy() if initial_params is not None else EncoderParams.initialize(arch, seed=init_seed)
    opt = AdamWState.initialize(params)
    rng = np.random.default_rng(loop_seed)

    history = History()
    epoch_times: list[float] = []
    best_val = np.inf
    best_params = params.copy()
    epochs_since_best = 0

    def eval_loss(samples: list[PreparedSample]) -> float:
        total = 0.0
        for s in samples:
            loss, _ = sample_loss(
                s, params, stats, mode=Mode.EVAL,
                sinkhorn_iters=config.sinkhorn_train_iters,
                temperature=config.sinkhorn_temperature,
                instnorm_eps=config.instnorm_eps,
            )
            total += loss
        return total / len(samples)

    for epoch in range(1, config.max_epochs + 1):
        t_epoch = time.perf_counter()
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            batch_grads = params.zero_grads()
            for idx in batch:
                loss, grads = sample_loss(
                    train_samples[int(idx)], params, stats, mode=Mode.TRAIN, rng=rng,
                    sinkhorn_iters=config.sinkhorn_train_iters,
                    temperature=config.sinkhorn_temperature,
                    instnorm_eps=config.instnorm_eps, want_grads=True,
                )
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"training diverged: non-finite loss at epoch {epoch}, sample {int(idx)}"
                    )
                epoch_loss += loss
                for name in batch_grads:
                    batch_grads[name] += grads[name]
            scale = 1.0 / len(batch)
            for name in batch_grads:
                batch_grads[name] *= scale
            adamw_step(params, batch_grads, opt, config)

        train_loss = epoch_loss / len(train_samples)
        val_loss = eval_loss(val_samples)
        if not np.isfinite(val_loss):
            raise TrainingError(f"training diverged: non-finite validation loss at epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        epoch_times.append(time.perf_counter() - t_epoch)
        if log is not None:
            log(f"epoch {epoch}: train {train_loss:.6f}  val {val_loss:.6f}")

        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            history.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    return TrainResult(params=best_params, stats=stats, history=history, epoch_times_s=epoch_times)

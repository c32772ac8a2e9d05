"""Soft and hard assignment between two sets of node embeddings.

The pipeline: dot-product affinity (plan rows, observation columns), instance
normalization, zero dummy columns padding the matrix square, a log-domain
Sinkhorn projection to a doubly stochastic matrix, and at inference a
rectangular Hungarian solve over the real columns. Training unrolls a fixed
number of Sinkhorn sweeps and backpropagates through every sweep exactly.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import FeatureStats, SceneGraph, standardize_features
from .nn.encoder import Mode, encoder_forward
from .nn.params import EncoderParams

DEFAULT_TEMPERATURE = 1.0
DEFAULT_SINKHORN_MAX_ITERS = 100
DEFAULT_SINKHORN_TOL = 1e-6
TRAIN_SINKHORN_ITERS = 20
INSTNORM_EPS = 1e-5

MATCH_FORMAT_VERSION = 1


class MatchingError(ValueError):
    """Invalid matching input (sizes, non-finite values, missing state)."""


def affinity(H1: np.ndarray, H2: np.ndarray) -> np.ndarray:
    """Pairwise dot products; rows index plan nodes, columns observation nodes.

    Requires N2 <= N1: the observation must not contain more nodes than the
    plan it is matched against.
    """
    H1 = np.asarray(H1, dtype=np.float64)
    H2 = np.asarray(H2, dtype=np.float64)
    if H1.ndim != 2 or H2.ndim != 2 or H1.shape[1] != H2.shape[1]:
        raise MatchingError(f"embedding shapes do not align: {H1.shape} vs {H2.shape}")
    if H2.shape[0] > H1.shape[0]:
        raise MatchingError(
            f"observation has more nodes ({H2.shape[0]}) than the plan ({H1.shape[0]})"
        )
    return H1 @ H2.T


@dataclass
class InstNormCache:
    y: np.ndarray
    scale: float


def instance_normalize(A: np.ndarray, eps: float = INSTNORM_EPS) -> tuple[np.ndarray, InstNormCache]:
    """Whiten a score matrix to zero mean, roughly unit variance (population
    statistics over all entries, scale sqrt(var + eps))."""
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise MatchingError("affinity matrix contains non-finite values")
    scale = float(np.sqrt(A.var() + eps))
    y = (A - A.mean()) / scale
    return y, InstNormCache(y=y, scale=scale)


def instance_normalize_backward(cache: InstNormCache, gY: np.ndarray) -> np.ndarray:
    y = cache.y
    return (gY - gY.mean() - y * (gY * y).mean()) / cache.scale


def pad_dummy_columns(A: np.ndarray) -> np.ndarray:
    """Append N1 - N2 zero columns so the matrix is square."""
    n1, n2 = A.shape
    if n2 > n1:
        raise MatchingError(f"cannot pad a matrix with more columns ({n2}) than rows ({n1})")
    if n2 == n1:
        return A.copy()
    return np.concatenate([A, np.zeros((n1, n1 - n2))], axis=1)


def _logsumexp(L: np.ndarray, axis: int) -> np.ndarray:
    mx = L.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(L - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class SoftAssignment:
    """Doubly stochastic relaxation of an assignment.

    ``log_trace`` holds the pre-normalization log matrix of every row/column
    step when the forward ran with a fixed unroll; convergence-mode forwards
    leave it None and cannot be backpropagated through.
    """

    values: np.ndarray
    n_real_cols: int
    iterations: int
    converged: bool
    temperature: float = DEFAULT_TEMPERATURE
    log_trace: list[tuple[str, np.ndarray]] | None = None


def sinkhorn(
    A: np.ndarray,
    n_real_cols: int | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    max_iters: int = DEFAULT_SINKHORN_MAX_ITERS,
    tol: float = DEFAULT_SINKHORN_TOL,
    unroll: int | None = None,
) -> SoftAssignment:
    """Project exp(A / temperature) onto the doubly stochastic polytope.

    Operates in the log domain: alternating row then column log-sum-exp
    normalizations. With ``unroll`` set, exactly that many sweeps run and all
    intermediates are cached for the backward pass (no early exit, as training
    needs a static computation graph). Otherwise sweeps run until the row sums
    deviate from 1 by at most ``tol`` (column sums are exact after each
    sweep), giving up after ``max_iters``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise MatchingError(f"sinkhorn needs a non-empty square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise MatchingError("sinkhorn input contains non-finite values")
    if temperature <= 0.0:
        raise MatchingError(f"temperature must be positive, got {temperature}")
    n = A.shape[0]
    if n_real_cols is None:
        n_real_cols = n
    if not (1 <= n_real_cols <= n):
        raise MatchingError(f"n_real_cols {n_real_cols} out of range for size {n}")

    L = A / temperature
    trace: list[tuple[str, np.ndarray]] | None = [] if unroll is not None else None
    n_sweeps = unroll if unroll is not None else max_iters
    if n_sweeps < 1:
        raise MatchingError("at least one sweep is required")
    converged = False
    it = 0
    for it in range(1, n_sweeps + 1):
        if trace is not None:
            trace.append(("row", L.copy()))
        L = L - _logsumexp(L, axis=1)[:, None]
        if trace is not None:
            trace.append(("col", L.copy()))
        L = L - _logsumexp(L, axis=0)[None, :]
        if trace is None:
            row_dev = float(np.abs(np.exp(_logsumexp(L, axis=1)) - 1.0).max())
            if row_dev <= tol:
                converged = True
                break
    else:
        converged = trace is not None  # a fixed unroll ran to completion by design
    return SoftAssignment(
        values=np.exp(L), n_real_cols=n_real_cols, iterations=it,
        converged=converged, temperature=temperature, log_trace=trace,
    )


def sinkhorn_backward(soft: SoftAssignment, gS: np.ndarray) -> np.ndarray:
    """Exact gradient through the unrolled sweeps; rejects convergence-mode
    forwards, whose early exit makes the computation graph input-dependent."""
    if soft.log_trace is None:
        raise MatchingError("sinkhorn ran in convergence mode; backward needs a fixed unroll")
    if gS.shape != soft.values.shape:
        raise MatchingError(f"gradient shape {gS.shape} does not match {soft.values.shape}")
    gL = gS * soft.values  # through S = exp(L)
    for kind, Lpre in reversed(soft.log_trace):
        axis = 1 if kind == "row" else 0
        mx = Lpre.max(axis=axis, keepdims=True)
        ex = np.exp(Lpre - mx)
        sm = ex / ex.sum(axis=axis, keepdims=True)
        gL = gL - sm * gL.sum(axis=axis, keepdims=True)
    return gL / soft.temperature


# ---------------------------------------------------------------------------
# Hard assignment.


@dataclass
class MatchResult:
    """Hard correspondence: (s_id, a_id, score) per observation node."""

    pairs: list[tuple[int, int, float]]
    elapsed_s: float = 0.0

    def mapping(self) -> dict[int, int]:
        return {s: a for s, a, _ in self.pairs}

    def to_json_dict(self) -> dict:
        return {
            "version": MATCH_FORMAT_VERSION,
            "pairs": [[s, a, score] for s, a, score in self.pairs],
            "elapsed_s": self.elapsed_s,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "MatchResult":
        if data.get("version") != MATCH_FORMAT_VERSION:
            raise MatchingError(f"unsupported match format version {data.get('version')!r}")
        return cls(
            pairs=[(int(s), int(a), float(v)) for s, a, v in data["pairs"]],
            elapsed_s=float(data["elapsed_s"]),
        )


def save_match_result(result: MatchResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_json_dict()) + "\n")


def _lap_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jonker-Volgenant shortest augmenting path for a dense rectangular
    min-cost assignment with rows <= columns.

    Returns (col4row, u, v): the assigned column per row and optimal duals
    satisfying cost[i, j] - u[i] - v[j] >= 0 with equality on matched pairs.
    """
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    col4row = np.full(n, -1, dtype=np.intp)
    row4col = np.full(m, -1, dtype=np.intp)
    for cur in range(n):
        spc = np.full(m, np.inf)  # shortest alternating-path cost per column
        path = np.full(m, -1, dtype=np.intp)
        scanned_rows = np.zeros(n, dtype=bool)
        scanned_cols = np.zeros(m, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            open_cols = np.flatnonzero(~scanned_cols)
            reduced = min_val + cost[i, open_cols] - u[i] - v[open_cols]
            better = reduced < spc[open_cols]
            upd = open_cols[better]
            spc[upd] = reduced[better]
            path[upd] = i
            j = open_cols[np.argmin(spc[open_cols])]
            min_val = spc[j]
            scanned_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
        u[cur] += min_val
        other = scanned_rows.copy()
        other[cur] = False
        rows = np.flatnonzero(other)
        u[rows] += min_val - spc[col4row[rows]]
        cols = np.flatnonzero(scanned_cols)
        v[cols] -= min_val - spc[cols]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return col4row, u, v


def _lex_smallest_optimal(
    cost: np.ndarray, col4row: np.ndarray, u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Among all optimal assignments pick the lexicographically smallest
    (row 0's column first, then row 1's, ...).

    Complementary slackness with the optimal duals restricts candidate columns
    to the tight entries of each row; when every row has a single tight entry
    the optimum is unique and the solve's answer stands. Otherwise columns are
    fixed row by row, each choice verified by re-solving the remaining
    subproblem, which only happens when genuine ties exist.
    """
    n, m = cost.shape
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    reduced = cost - u[:, None] - v[None, :]
    tight = reduced <= tol
    if np.all(tight.sum(axis=1) == 1):
        return col4row
    total = float(cost[np.arange(n), col4row].sum())

    assigned = np.full(n, -1, dtype=np.intp)
    used = np.zeros(m, dtype=bool)
    prefix = 0.0
    all_cols = np.arange(m)
    for s in range(n):
        cands = np.flatnonzero(tight[s] & ~used)
        chosen = -1
        if cands.size == 1:
            # Some optimal completion of the prefix exists and must use a
            # tight unused column here, so a sole candidate is forced.
            chosen = int(cands[0])
        else:
            for cand in cands:
                rest_rows = np.arange(s + 1, n)
                if rest_rows.size == 0:
                    sub_total = 0.0
                else:
                    rem_cols = all_cols[~used & (all_cols != cand)]
                    sub_c4r, _, _ = _lap_min(cost[np.ix_(rest_rows, rem_cols)])
                    sub_total = float(cost[np.ix_(rest_rows, rem_cols)][
                        np.arange(rest_rows.size), sub_c4r].sum())
                if prefix + cost[s, cand] + sub_total <= total + tol * n:
                    chosen = int(cand)
                    break
        if chosen == -1:
            # Numerical fallback: complete optimally without lexicographic refinement.
            rest_rows = np.arange(s, n)
            rem_cols = all_cols[~used]
            sub_c4r, _, _ = _lap_min(cost[np.ix_(rest_rows, rem_cols)])
            assigned[s:] = rem_cols[sub_c4r]
            return assigned
        assigned[s] = chosen
        used[chosen] = True
        prefix += cost[s, chosen]
    return assigned


def hungarian(scores: np.ndarray) -> MatchResult:
    """Maximum-score one-to-one assignment of observation nodes (columns) to
    plan nodes (rows); requires at least as many rows as columns. Ties resolve
    to the assignment whose (a_0, a_1, ...) sequence is lexicographically
    smallest in observation-id order.
    """
    t0 = time.perf_counter()
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0 or scores.shape[1] == 0:
        raise MatchingError(f"score matrix must be non-empty 2-d, got {scores.shape}")
    n1, n2 = scores.shape
    if n2 > n1:
        raise MatchingError(f"more observation nodes ({n2}) than plan nodes ({n1})")
    if not np.all(np.isfinite(scores)):
        raise MatchingError("score matrix contains non-finite values")
    cost = -scores.T  # rows become observation nodes; maximize -> minimize
    col4row, u, v = _lap_min(cost)
    assignment = _lex_smallest_optimal(cost, col4row, u, v)
    pairs = [(s, int(a), float(scores[a, s])) for s, a in enumerate(assignment)]
    return MatchResult(pairs=pairs, elapsed_s=time.perf_counter() - t0)


def brute_force_assignment(scores: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Exhaustive assignment oracle for tests; first maximum in lexicographic
    enumeration order, so ties break exactly like ``hungarian``."""
    scores = np.asarray(scores, dtype=np.float64)
    n1, n2 = scores.shape
    if n2 > n1:
        raise MatchingError(f"more observation nodes ({n2}) than plan nodes ({n1})")
    if n1 > 8:
        raise MatchingError("brute force oracle is limited to 8 plan nodes")
    best_total = -np.inf
    best: tuple[int, ...] | None = None
    for perm in itertools.permutations(range(n1), n2):
        total = float(sum(scores[perm[s], s] for s in range(n2)))
        if total > best_total:
            best_total = total
            best = perm
    assert best is not None
    return [(s, a) for s, a in enumerate(best)], best_total


# ---------------------------------------------------------------------------
# End-to-end matching.


def match(
    a_graph: SceneGraph,
    s_graph: SceneGraph,
    params: EncoderParams,
    stats: FeatureStats,
    temperature: float = DEFAULT_TEMPERATURE,
    sinkhorn_max_iters: int = DEFAULT_SINKHORN_MAX_ITERS,
    sinkhorn_tol: float = DEFAULT_SINKHORN_TOL,
    instnorm_eps: float = INSTNORM_EPS,
) -> MatchResult:
    """Match an observation against a plan: encode both graphs in Eval mode,
    run the soft-assignment pipeline with convergence-mode Sinkhorn, then
    decode a hard assignment over the real columns.

    Both graphs must already carry their augmented edge sets; features are
    (re)computed here from ``stats``.
    """
    t0 = time.perf_counter()
    a_graph = standardize_features(a_graph, stats)
    s_graph = standardize_features(s_graph, stats)
    H1, _ = encoder_forward(a_graph, params, mode=Mode.EVAL)
    H2, _ = encoder_forward(s_graph, params, mode=Mode.EVAL)
    A = affinity(H1, H2)
    An, _ = instance_normalize(A, eps=instnorm_eps)
    Ap = pad_dummy_columns(An)
    soft = sinkhorn(
        Ap, n_real_cols=s_graph.n_nodes, temperature=temperature,
        max_iters=sinkhorn_max_iters, tol=sinkhorn_tol,
    )
    real = soft.values[:, : s_graph.n_nodes]
    hard = hungarian(real)
    return MatchResult(pairs=hard.pairs, elapsed_s=time.perf_counter() - t0)

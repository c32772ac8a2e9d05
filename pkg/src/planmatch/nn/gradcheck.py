"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import multiprocessing
import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

Tensors = dict[str, np.ndarray]
LossFn = Callable[[Tensors], tuple[float, Tensors]]


class GradCheckError(ValueError):
    """The function under test is unusable for finite differencing."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    worst_index: tuple[int, ...]
    n_checked: int

    def __str__(self) -> str:
        return (
            f"max rel err {self.max_rel_error:.3e} over {self.n_checked} params "
            f"(worst: {self.worst_tensor}{list(self.worst_index)})"
        )


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


# Worker state inherited by forked processes; index chunks are the only
# payload crossing the process boundary.
_FORK_STATE: dict = {}


def _check_chunk(job: tuple[str, int, int]) -> tuple[float, str, int]:
    name, start, stop = job
    loss_fn = _FORK_STATE["loss_fn"]
    tensors = _FORK_STATE["tensors"]
    analytic = _FORK_STATE["grads"][name].ravel()
    eps = _FORK_STATE["eps"]
    flat = tensors[name].ravel()
    worst = -1.0
    worst_i = start
    for i in range(start, stop):
        orig = flat[i]
        flat[i] = orig + eps
        plus = loss_fn(tensors)
        flat[i] = orig - eps
        minus = loss_fn(tensors)
        flat[i] = orig
        rel = _rel_error(analytic[i], (plus - minus) / (2.0 * eps))
        if rel > worst:
            worst = rel
            worst_i = i
    return worst, name, worst_i


def grad_check(
    f: LossFn,
    tensors: Tensors,
    eps: float = 1e-5,
    processes: int = 1,
    loss_f: Callable[[Tensors], float] | None = None,
) -> GradCheckReport:
    """Compare f's analytic gradients against central finite differences.

    ``f`` maps the tensor dict to (scalar loss, gradient dict) and must be
    deterministic; any stochastic element (dropout masks included) has to be
    frozen by recreating its rng from a fixed seed inside ``f``. Every scalar
    entry of every tensor is perturbed by +/- eps. The relative error per
    entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    ``loss_f``, when given, is used for the finite-difference evaluations in
    place of ``f``; it must return the identical loss but may skip the
    backward pass entirely, which roughly halves the cost per perturbation.

    ``processes`` > 1 forks workers to split the perturbations (results are
    identical to the serial run; each entry is an independent computation).
    Forking requires a platform with fork, else the check runs serially.
    """
    loss0, grads = f(tensors)
    loss1, _ = f(tensors)
    if loss0 != loss1:
        raise GradCheckError(
            f"f is not deterministic ({loss0!r} != {loss1!r}); freeze its randomness"
        )
    if not np.isfinite(loss0):
        raise GradCheckError(f"loss is not finite: {loss0!r}")
    for name, tensor in tensors.items():
        if name not in grads or grads[name].shape != tensor.shape:
            raise GradCheckError(f"missing or misshaped gradient for {name}")
        if not tensor.flags["C_CONTIGUOUS"]:
            raise GradCheckError(f"tensor {name} must be C-contiguous for in-place FD")

    if loss_f is not None:
        loss_fn = loss_f
        if loss_fn(tensors) != loss0:
            raise GradCheckError("loss_f disagrees with f on the unperturbed tensors")
    else:
        def loss_fn(ts: Tensors) -> float:
            return f(ts)[0]

    jobs: list[tuple[str, int, int]] = []
    chunk = 512
    for name, tensor in tensors.items():
        for start in range(0, tensor.size, chunk):
            jobs.append((name, start, min(start + chunk, tensor.size)))

    results: list[tuple[float, str, int]]
    if processes > 1 and sys.platform.startswith("linux"):
        _FORK_STATE.update(loss_fn=loss_fn, tensors=tensors, grads=grads, eps=eps)
        try:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes) as pool:
                results = pool.map(_check_chunk, jobs)
        finally:
            _FORK_STATE.clear()
    else:
        _FORK_STATE.update(loss_fn=loss_fn, tensors=tensors, grads=grads, eps=eps)
        try:
            results = [_check_chunk(job) for job in jobs]
        finally:
            _FORK_STATE.clear()

    worst, worst_tensor, worst_flat = max(results, key=lambda r: r[0])
    worst_index = np.unravel_index(worst_flat, tensors[worst_tensor].shape)
    return GradCheckReport(
        max_rel_error=float(worst),
        worst_tensor=worst_tensor,
        worst_index=tuple(int(x) for x in worst_index),
        n_checked=sum(t.size for t in tensors.values()),
    )

"""Per-task affine output calibration fitted on the replay buffer.

Task models are trained separately, so the combined class values
``WP_j(x) * P(t|x)`` can sit on different scales per task.  A scale/shift
pair per task, ``p = sigma1 * WP_j * P(t|x) + sigma2``, is fitted by plain
SGD on the buffer cross-entropy; the final prediction takes an argmax over
the raw calibrated values.  The combined value does not depend on the
parameters being fitted, so it is computed once per buffer sample and the
descent itself is cheap vector arithmetic.

The fit keeps the best parameters seen against the full-buffer objective
(identity included), so it can never end worse than no calibration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import scoring
from .errors import UnknownTask
from .numerics import RngState, stable_mean
from .trainer import ReplayBuffer, RunArtifacts

logger = logging.getLogger(__name__)

#: Combined class values are clamped to this floor inside the log.
PROB_FLOOR = 1e-12


@dataclass
class CalibrationParams:
    """Per-task affine output adjustment: ``value -> sigma1 * value + sigma2``."""

    sigma: dict[int, tuple[float, float]]

    @classmethod
    def identity(cls, task_ids) -> "CalibrationParams":
        return cls(sigma={int(t): (1.0, 0.0) for t in task_ids})

    def pair(self, task_id: int) -> tuple[float, float]:
        try:
            return self.sigma[task_id]
        except KeyError:
            raise UnknownTask(f"no calibration for task {task_id}") from None

    def as_records(self) -> list[dict]:
        return [
            {"task_id": t, "sigma1": s1, "sigma2": s2}
            for t, (s1, s2) in sorted(self.sigma.items())
        ]

    @classmethod
    def from_records(cls, records) -> "CalibrationParams":
        return cls(
            sigma={
                int(r["task_id"]): (float(r["sigma1"]), float(r["sigma2"]))
                for r in records
            }
        )


def _combined_values(run: RunArtifacts, buffer: ReplayBuffer):
    """Per-sample combined value WP_y * P(t_y|x) and task position.

    Returns ``(base, tpos, task_ids)`` where ``base[i]`` is the combined
    value of sample i's true class and ``tpos[i]`` indexes its task within
    ``task_ids``.
    """
    x, y, sample_task = buffer.all_samples()
    classes = {t: run.stream.task(t).classes for t in run.task_ids()}
    ctx = scoring.build_context(run.net, run.stats, buffer, run.config, classes)
    bundle = scoring.compute_bundle(ctx, x)
    scores = scoring.task_score_matrix(ctx, bundle, "tpl")
    post = scoring.task_posterior(scores, ctx.temperature)

    pos = {t: j for j, t in enumerate(bundle.task_ids)}
    n = x.shape[0]
    base = np.zeros(n)
    tpos = np.zeros(n, dtype=np.int64)
    for i in range(n):
        t = int(sample_task[i])
        j = classes[t].index(int(y[i]))
        tpos[i] = pos[t]
        base[i] = bundle.wp[pos[t]][i, j] * post[i, pos[t]]
    return base, tpos, list(bundle.task_ids)


def _objective(base: np.ndarray, tpos: np.ndarray, s1: np.ndarray, s2: np.ndarray) -> float:
    p = np.maximum(s1[tpos] * base + s2[tpos], PROB_FLOOR)
    return -stable_mean(np.log(p))


def _sgd_fit(
    base: np.ndarray,
    tpos: np.ndarray,
    n_tasks: int,
    epochs: int,
    batch: int,
    lr: float,
    rng: RngState,
):
    """Minimize mean −log(clamped affine value) over the given samples.

    Tracks the full-set objective after every epoch and returns the best
    parameters seen, starting from (and therefore never losing to) the
    identity.  Clamped samples contribute zero gradient.
    """
    n = base.shape[0]
    s1 = np.ones(n_tasks)
    s2 = np.zeros(n_tasks)
    best_obj = _objective(base, tpos, s1, s2)
    best = (s1.copy(), s2.copy())
    for e in range(epochs):
        perm = rng.stream(f"shuffle-epoch-{e}").permutation(n)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            b = base[idx]
            t = tpos[idx]
            p_raw = s1[t] * b + s2[t]
            active = p_raw >= PROB_FLOOR
            p = np.maximum(p_raw, PROB_FLOOR)
            g1 = np.zeros(n_tasks)
            g2 = np.zeros(n_tasks)
            np.add.at(g1, t[active], -b[active] / p[active])
            np.add.at(g2, t[active], -1.0 / p[active])
            s1 -= lr * g1 / idx.size
            s2 -= lr * g2 / idx.size
        obj = _objective(base, tpos, s1, s2)
        if np.isfinite(obj) and obj < best_obj:
            best_obj = obj
            best = (s1.copy(), s2.copy())
    return best[0], best[1], best_obj


def fit_calibration(
    run: RunArtifacts,
    buffer: ReplayBuffer,
    epochs: int,
    batch: int,
    lr: float,
    rng: RngState,
) -> CalibrationParams:
    """Fit per-task scale/shift parameters on the replay buffer.

    A single-task run (or an empty buffer) yields identity parameters; the
    network, stats, and buffer are never modified.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    task_ids = run.task_ids()
    if len(task_ids) < 2:
        return CalibrationParams.identity(task_ids)
    if len(buffer) == 0:
        logger.warning("calibration: empty replay buffer; keeping identity")
        return CalibrationParams.identity(task_ids)
    base, tpos, ordered = _combined_values(run, buffer)
    s1, s2, _ = _sgd_fit(base, tpos, len(ordered), epochs, batch, lr, rng)
    return CalibrationParams(
        sigma={t: (float(s1[j]), float(s2[j])) for j, t in enumerate(ordered)}
    )


def buffer_cross_entropy(
    run: RunArtifacts, buffer: ReplayBuffer, params: CalibrationParams | None = None
) -> float:
    """Monitored fitting objective: mean −log p(y|x) over buffer samples
    under the given (default identity) parameters."""
    base, tpos, ordered = _combined_values(run, buffer)
    if params is None:
        params = CalibrationParams.identity(ordered)
    s1 = np.array([params.pair(t)[0] for t in ordered])
    s2 = np.array([params.pair(t)[1] for t in ordered])
    return _objective(base, tpos, s1, s2)

"""Online-learning persistent generator.

Bootstraps with a uniform batch, then repeatedly: folds returned results
into a Gaussian-process surrogate (dead simulations come back as NaN and
are dropped), retrains with an effort level steered by the batch RMSE,
ranks a fixed candidate mesh by posterior variance, and emits the next
batch under a shrinking minimum-separation radius. One metrics row per
iteration.

The context object handed to ``gp_gen_loop`` supplies ``rng``, ``seed``,
``send(points)``, ``recv()`` and ``send_recv(points)``; results arrive as
history records. A restarted generator is reconstructed by replaying the
prior history chunk by chunk, so a resumed ensemble continues exactly
where an uninterrupted one would be.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .history import EnsembleRecord, GenPoint
from .runtime.messages import STOP_TAGS, Tag
from .surrogate import GaussianProcess, TrainMethod

METRICS_COLUMNS = ("iteration", "n_train", "rmse_batch", "train_method",
                   "train_seconds", "select_seconds", "sim_seconds",
                   "mse_test", "mean_var", "max_var")


class GeneratorError(Exception):
    pass


@dataclass(frozen=True)
class TrainingPolicy:
    """RMSE-to-effort mapping. A batch RMSE above full_factor standard
    deviations of the accumulated outputs triggers the full global search;
    above reduced_factor, the reduced one; otherwise local refinement
    (or the reduced global search where local training is disabled)."""

    full_factor: float = 10.0
    reduced_factor: float = 2.0
    full_iters: int = 120
    reduced_iters: int = 20
    allow_local: bool = True

    def __post_init__(self):
        if not self.full_factor > self.reduced_factor > 0:
            raise GeneratorError("need full_factor > reduced_factor > 0")


@dataclass(frozen=True)
class SelectionParams:
    batch_size: int
    r_initial: float
    r_decay: float = 0.5
    r_min: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise GeneratorError("batch_size must be >= 1")
        if not 0 < self.r_decay < 1:
            raise GeneratorError("r_decay must lie in (0, 1)")
        # A zero floor would never terminate the decay loop and, fully
        # decayed, would stop separating anything from anything.
        if not 0 < self.r_min < self.r_initial:
            raise GeneratorError("need 0 < r_min < r_initial")

    @classmethod
    def for_bounds(cls, lb, ub, batch_size, r_decay=0.5):
        diag = float(np.linalg.norm(np.asarray(ub, float) - np.asarray(lb, float)))
        return cls(batch_size, r_initial=diag / 2.0, r_decay=r_decay,
                   r_min=diag / 1024.0)


@dataclass(frozen=True)
class CandidateGrid:
    lb: np.ndarray
    ub: np.ndarray
    points_per_dim: int
    points: np.ndarray

    @classmethod
    def build(cls, lb, ub, points_per_dim: int) -> "CandidateGrid":
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
        if lb.shape != ub.shape or lb.ndim != 1:
            raise GeneratorError("lb and ub must be vectors of equal length")
        if np.any(lb >= ub):
            raise GeneratorError("need lb < ub componentwise")
        if points_per_dim < 2:
            raise GeneratorError("points_per_dim must be >= 2")
        axes = [np.linspace(lb[d], ub[d], points_per_dim)
                for d in range(len(lb))]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=-1)
        return cls(lb, ub, points_per_dim, points)


def initial_sample(lb, ub, batch_size: int,
                   rng: np.random.Generator) -> np.ndarray:
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    if np.any(lb >= ub):
        raise GeneratorError("need lb < ub componentwise")
    return rng.uniform(lb, ub, (batch_size, len(lb)))


def decide_training(rmse_val: float, std_y: float,
                    policy: TrainingPolicy) -> TrainMethod:
    """Thresholds are strict: an RMSE exactly at a boundary takes the
    cheaper branch."""
    if std_y < 0:
        raise GeneratorError("std_y must be >= 0")
    if rmse_val > policy.full_factor * std_y:
        return TrainMethod("global", policy.full_iters)
    if rmse_val > policy.reduced_factor * std_y:
        return TrainMethod("global", policy.reduced_iters)
    if policy.allow_local:
        return TrainMethod("local")
    return TrainMethod("global", policy.reduced_iters)


def select_batch(grid: CandidateGrid, variances, params: SelectionParams,
                 exclude=None) -> tuple[list[int], list[float]]:
    """Greedy variance-ranked selection with a decaying separation radius.

    Candidates are walked in variance-descending order (ties by index);
    one is accepted only if it keeps Euclidean distance >= r to everything
    already accepted and to every excluded point. A pass that fails to
    fill the batch halves r and sweeps again; once r falls below r_min the
    remainder is filled by pure variance rank, skipping exact duplicates
    of excluded points. Returns the indices and the r in force at each
    acceptance (0.0 for rank fills).
    """
    pts = grid.points
    variances = np.asarray(variances, dtype=float)
    if variances.shape != (len(pts),):
        raise GeneratorError(
            f"{len(variances)} variances for a grid of {len(pts)} points")
    if exclude is None or len(exclude) == 0:
        excl = np.empty((0, pts.shape[1]))
    else:
        excl = np.atleast_2d(np.asarray(exclude, dtype=float))
        if excl.shape[1] != pts.shape[1]:
            raise GeneratorError("excluded points have the wrong dimension")

    order = np.lexsort((np.arange(len(pts)), -variances))
    if len(excl):
        dup = np.array([np.any(np.all(excl == p, axis=1)) for p in pts])
    else:
        dup = np.zeros(len(pts), dtype=bool)
    if len(pts) - int(dup.sum()) < params.batch_size:
        raise GeneratorError(
            f"grid has {len(pts) - int(dup.sum())} selectable points, "
            f"batch needs {params.batch_size}")

    accepted: list[int] = []
    trace: list[float] = []
    taken = np.zeros(len(pts), dtype=bool)
    r = params.r_initial
    while len(accepted) < params.batch_size and r >= params.r_min:
        for idx in order:
            if taken[idx]:
                continue
            p = pts[idx]
            if len(excl) and np.min(
                    np.linalg.norm(excl - p, axis=1)) < r:
                continue
            if accepted and np.min(
                    np.linalg.norm(pts[accepted] - p, axis=1)) < r:
                continue
            accepted.append(int(idx))
            taken[idx] = True
            trace.append(r)
            if len(accepted) == params.batch_size:
                break
        else:
            r *= params.r_decay
            continue
        break
    for idx in order:
        if len(accepted) == params.batch_size:
            break
        if taken[idx] or dup[idx]:
            continue
        accepted.append(int(idx))
        taken[idx] = True
        trace.append(0.0)
    return accepted, trace


def metrics(model: GaussianProcess, test_set,
            grid: CandidateGrid) -> tuple[float, float, float]:
    """(test MSE, mean grid variance, max grid variance); test MSE is NaN
    when no test set is configured."""
    _, var = model.posterior(grid.points)
    if test_set is None:
        mse = float("nan")
    else:
        X_t, y_t = test_set
        y_t = np.asarray(y_t, dtype=float).ravel()
        if len(y_t) == 0:
            raise GeneratorError("empty test set")
        mean, _ = model.posterior(X_t)
        mse = float(np.mean((mean - y_t) ** 2))
    return mse, float(np.mean(var)), float(np.max(var))


# -- the persistent loop -------------------------------------------------


def _append_metrics_row(path, row):
    write_header = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow(row)


class _OnlineLearner:
    """Model-side state of the loop, shared by live processing and
    history replay so a restart lands in the same state."""

    def __init__(self, n_dims, policy, seed):
        self.model = GaussianProcess(n_dims)
        self.policy = policy
        self.seed = seed
        self.all_x: list[np.ndarray] = []
        self.all_y: list[float] = []
        self.sent_x: list[np.ndarray] = []
        self.noise_set = False
        self.iteration = 0
        self.noise_fraction = 0.01

    def note_sent(self, X):
        for row in np.atleast_2d(X):
            self.sent_x.append(np.asarray(row, dtype=float))

    def ingest(self, records: list[EnsembleRecord]):
        """Fold one returned batch in: drop NaNs, score the pre-update
        model on the batch, extend the data, retrain. Returns None when
        the whole batch was NaN (nothing to learn from)."""
        X = np.array([r.x for r in records], dtype=float)
        y = np.array([r.f for r in records], dtype=float)
        valid = np.isfinite(y)
        if not self.noise_set and np.any(valid):
            level = self.noise_fraction * float(np.mean(np.abs(y[valid])))
            self.model.set_noise_variance(level ** 2)
            self.noise_set = True
        if not np.any(valid):
            return None
        self.iteration += 1
        if self.model.n_train:
            rmse_batch = self.model.rmse(X[valid], y[valid])
        else:
            rmse_batch = float("inf")
        self.all_x.extend(X[valid])
        self.all_y.extend(y[valid])
        std_y = float(np.std(self.all_y))
        method = decide_training(rmse_batch, std_y, self.policy)
        t0 = time.perf_counter()
        self.model.tell(np.array(self.all_x), np.array(self.all_y))
        self.model.train(method.name, method.max_iter,
                         rng=np.random.default_rng([self.seed,
                                                    self.model.n_train]))
        train_seconds = time.perf_counter() - t0
        return rmse_batch, method, train_seconds

    def replay(self, records: list[EnsembleRecord], batch_size: int):
        """Re-apply a prior history in generation order. Complete returned
        chunks are ingested; a trailing chunk with unreturned records is
        the batch still in flight, to be awaited rather than re-selected."""
        records = sorted(records, key=lambda r: r.sim_id)
        outstanding: list[EnsembleRecord] = []
        pos = 0
        while pos < len(records):
            chunk = records[pos:pos + batch_size]
            if all(r.returned for r in chunk):
                self.note_sent([r.x for r in chunk])
                self.ingest(chunk)
                pos += batch_size
            else:
                break
        # The suffix is the batch still in flight. Any already-returned
        # record in it was never forwarded as part of a complete batch and
        # comes back with the rest once the unreturned ones finish.
        for r in records[pos:]:
            self.note_sent([r.x])
            outstanding.append(r)
        return outstanding


def gp_gen_loop(history_in, params: dict, ctx) -> Tag:
    lb = np.asarray(params["lb"], dtype=float)
    ub = np.asarray(params["ub"], dtype=float)
    n = len(lb)
    batch_size = int(params["batch_size"])
    policy = TrainingPolicy(
        full_factor=params.get("full_factor", 10.0),
        reduced_factor=params.get("reduced_factor", 2.0),
        full_iters=params.get("full_iters", 120),
        reduced_iters=params.get("reduced_iters", 20),
        allow_local=params.get("allow_local", True),
    )
    grid = CandidateGrid.build(lb, ub, params.get("points_per_dim", 10))
    defaults = SelectionParams.for_bounds(lb, ub, batch_size,
                                          params.get("r_decay", 0.5))
    sel = SelectionParams(
        batch_size,
        r_initial=params.get("r_initial", defaults.r_initial),
        r_decay=defaults.r_decay,
        r_min=params.get("r_min", defaults.r_min),
    )
    random_mode = bool(params.get("random_mode", False))
    metrics_path = params.get("metrics_path")
    if params.get("test_X") is not None:
        test_set = (np.asarray(params["test_X"], dtype=float),
                    np.asarray(params["test_y"], dtype=float))
    else:
        test_set = None

    learner = _OnlineLearner(n, policy, ctx.seed)
    learner.noise_fraction = params.get("noise_fraction", 0.01)

    def dispatch(X):
        points = [GenPoint(x=row) for row in np.atleast_2d(X)]
        learner.note_sent(X)
        t0 = time.perf_counter()
        tag, recs = ctx.send_recv(points)
        return tag, recs, time.perf_counter() - t0

    sim_seconds = float("nan")
    if history_in:
        # One uniform row was drawn for every point the prior run
        # generated; burning the same count realigns the stream.
        ctx.rng.uniform(lb, ub, (len(history_in), n))
        outstanding = learner.replay(history_in, batch_size)
        if outstanding:
            t0 = time.perf_counter()
            tag, received = ctx.recv()
            sim_seconds = time.perf_counter() - t0
            need_ingest = True
        else:
            tag, received, need_ingest = None, [], False
    else:
        tag, received, sim_seconds = dispatch(
            initial_sample(lb, ub, batch_size, ctx.rng))
        need_ingest = True

    while True:
        if need_ingest:
            if tag in STOP_TAGS:
                return Tag.FINISHED_PERSISTENT_GEN
            outcome = learner.ingest(received)
            if outcome is None:
                # Every point came back dead; probe somewhere fresh.
                tag, received, sim_seconds = dispatch(
                    initial_sample(lb, ub, batch_size, ctx.rng))
                continue
        else:
            # Restart at a clean batch boundary: the last ingest ran in
            # replay and the prior process may have logged its row already,
            # so none is written for it here.
            outcome = None
        need_ingest = True

        t0 = time.perf_counter()
        _, variances = learner.model.posterior(grid.points)
        if random_mode:
            batch = ctx.rng.uniform(lb, ub, (batch_size, n))
        else:
            indices, _ = select_batch(grid, variances, sel,
                                      exclude=learner.sent_x)
            batch = grid.points[indices]
        select_seconds = time.perf_counter() - t0

        if metrics_path and outcome is not None:
            rmse_batch, method, train_seconds = outcome
            mse_test, mean_var, max_var = metrics(learner.model, test_set,
                                                  grid)
            _append_metrics_row(metrics_path, (
                learner.iteration, learner.model.n_train, rmse_batch,
                method.name, train_seconds,
                select_seconds, sim_seconds, mse_test, mean_var, max_var))

        tag, received, sim_seconds = dispatch(batch)

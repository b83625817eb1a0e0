"""Allocation policies: who works on what, decided once per manager cycle.

An allocator maps (history view, worker states, resource pool) to a list
of actions: Work entries start evaluations, Forward entries route finished
records back to a persistent generator. The manager executes them in
order and owns all mutation of the history.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..resources import InsufficientResources, ResourceRequest
from .messages import Tag, Work, WorkerStatus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Forward:
    """Deliver these completed records to a persistent generator."""

    target_worker: int
    record_ids: tuple[int, ...]


def _resource_request(record):
    if record.num_procs <= 0 and record.num_gpus <= 0:
        return None
    return ResourceRequest(
        num_procs=record.num_procs if record.num_procs > 0 else None,
        num_gpus=record.num_gpus if record.num_gpus > 0 else None,
    )


def _assign_sims(view, workers, pool, actions, skip_worker=None,
                 warned=None):
    """Fill idle workers with pending records, highest priority first.
    A record whose request cannot be met right now is deferred; one that
    can never be met is warned about once and skipped."""
    pending = view.pending_sims()
    for state in sorted(workers.values(), key=lambda s: s.worker_id):
        if state.worker_id == skip_worker or not state.idle:
            continue
        while pending:
            record = pending.pop(0)
            request = _resource_request(record)
            assignment = None
            if request is not None and pool is None:
                raise RuntimeError(
                    f"record {record.sim_id} requests resources but no "
                    "pool is configured")
            if pool is not None:
                # No explicit request still occupies one resource set: the
                # per-worker share, which app-launching sims rely on.
                try:
                    assignment = (pool.schedule(request) if request is not None
                                  else pool.schedule_default())
                except InsufficientResources as exc:
                    if warned is not None and record.sim_id not in warned:
                        log.warning("deferring sim %d: %s", record.sim_id, exc)
                        warned.add(record.sim_id)
                    continue
            actions.append(Work(target_worker=state.worker_id,
                                tag=Tag.EVAL_SIM,
                                record_ids=(record.sim_id,),
                                assignment=assignment))
            break


@dataclass
class DefaultAlloc:
    """Sims for idle workers from the pending queue; otherwise one
    generator call at a time. Pairs with non-persistent generators."""

    _warned: set = field(default_factory=set)

    def __call__(self, view, workers, pool):
        actions: list = []
        _assign_sims(view, workers, pool, actions, warned=self._warned)
        claimed = {w.target_worker for w in actions}
        gen_running = any(
            s.status in (WorkerStatus.BUSY_GEN, WorkerStatus.PERSISTENT_GEN)
            for s in workers.values())
        if not gen_running:
            for state in sorted(workers.values(), key=lambda s: s.worker_id):
                if state.idle and state.worker_id not in claimed:
                    actions.append(Work(target_worker=state.worker_id,
                                        tag=Tag.EVAL_GEN))
                    break
        return actions


@dataclass
class PersistentAlloc:
    """One persistent generator on worker `gen_worker`; results stream
    back to it in complete sim_id-sorted batches (or singly when async).

    Forwarding state lives here: `forwarded` holds ids already routed to
    the generator. Seeding it with the returned ids of a prior history
    matches a restarted generator, which replays those records itself and
    awaits only the in-flight remainder.
    """

    gen_worker: int = 1
    async_mode: bool = False
    started: bool = False
    forwarded: set = field(default_factory=set)
    _warned: set = field(default_factory=set)

    @classmethod
    def resuming(cls, prior_records, gen_worker: int = 1, async_mode=False):
        alloc = cls(gen_worker=gen_worker, async_mode=async_mode)
        alloc.forwarded = {r.sim_id for r in prior_records if r.returned}
        return alloc

    def __call__(self, view, workers, pool):
        actions: list = []
        state = workers.get(self.gen_worker)
        if not self.started:
            if state is None or not state.idle:
                raise RuntimeError(
                    f"worker {self.gen_worker} unavailable for the generator")
            actions.append(Work(target_worker=self.gen_worker,
                                tag=Tag.EVAL_GEN, persistent=True))
            self.started = True
        elif state is not None and state.status is WorkerStatus.PERSISTENT_GEN:
            # A finished generator drops its worker back to idle, which
            # ends forwarding without any extra bookkeeping here.
            outstanding = [sid for sid in view.gen_record_ids(self.gen_worker)
                           if sid not in self.forwarded]
            returned = [sid for sid in outstanding if view.is_returned(sid)]
            if self.async_mode:
                ready = sorted(returned)
            elif outstanding and len(returned) == len(outstanding):
                ready = sorted(outstanding)
            else:
                ready = []
            if ready:
                self.forwarded.update(ready)
                actions.append(Forward(self.gen_worker, tuple(ready)))
        _assign_sims(view, workers, pool, actions,
                     skip_worker=self.gen_worker, warned=self._warned)
        return actions

"""App interaction coordinator: instance pool, FIFO dispatch, retries, intervention tickets.

Sessions run on worker threads; the coordinator thread is the only writer of job,
instance, ticket and dataset state. Completions are applied in virtual-time order
(a session occupies its instance for ``steps_taken + 1`` ticks), so the dispatch
log is a deterministic total order regardless of thread timing. Wall-clock values
appear only in ``wall_time`` and ``timing`` fields.
"""

from __future__ import annotations

import concurrent.futures as cf
import hashlib
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from .sim import Action, AppModel, SimDevice
from .store import DatasetStore, TrajectoryRecord
from .traversal import Session, SessionConfig, SessionResult, TraversalPolicy

log = logging.getLogger(__name__)

JOB_STATES = ("queued", "running", "completed", "awaiting_intervention", "failed")
DEFAULT_MAX_ATTEMPTS = 3  # first run + 2 retries


class FleetError(Exception):
    pass


class DuplicateJob(FleetError):
    pass


class UnknownTicket(FleetError):
    pass


class AlreadyResumed(FleetError):
    pass


@dataclass
class CrawlJob:
    job_id: str
    app_id: str
    package_name: str
    category: str
    name: str = ""
    state: str = "queued"
    attempts: int = 0
    assigned_instance: str | None = None
    sessions: list[str] = field(default_factory=list)
    steps: int = 0
    escalations: list[list] = field(default_factory=list)
    last_status: str | None = None
    error: str | None = None
    wall_seconds: float = 0.0


@dataclass
class InterventionTicket:
    ticket_id: str
    job_id: str
    app_id: str
    session_id: str
    frozen_signature: str
    event_offset: int
    reason: str
    snapshot: dict
    created_at: float
    open: bool = True

    def summary(self) -> dict:
        return {
            "ticket_id": self.ticket_id,
            "job_id": self.job_id,
            "app_id": self.app_id,
            "session_id": self.session_id,
            "frozen_signature": self.frozen_signature,
            "event_offset": self.event_offset,
            "reason": self.reason,
            "open": self.open,
        }


class InstancePool:
    def __init__(self, devices: Iterable[SimDevice]):
        self.instances: dict[str, SimDevice] = {d.instance_id: d for d in devices}
        if not self.instances:
            raise ValueError("instance pool is empty")

    @classmethod
    def simulated(cls, n: int, prefix: str = "inst") -> InstancePool:
        return cls(SimDevice(f"{prefix}{i:03d}") for i in range(n))

    def idle(self) -> list[str]:
        return sorted(i for i, d in self.instances.items() if d.status == "idle")

    def __len__(self) -> int:
        return len(self.instances)


@dataclass
class RunOutcome:
    result: SessionResult
    events: list[dict]
    snapshot: dict | None = None
    wall_seconds: float = 0.0


class SessionRunner(Protocol):
    def start(self, job: CrawlJob, device: SimDevice, attempt: int) -> RunOutcome: ...

    def resume(self, ticket: InterventionTicket, device: SimDevice, human_actions: Sequence[Action]) -> RunOutcome: ...


def derive_seed(seed: int, *parts) -> int:
    h = hashlib.blake2b(repr((seed,) + parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") & 0x7FFFFFFF


class CrawlRunner:
    """Runs traversal sessions for simulated app models."""

    def __init__(
        self,
        apps: dict[str, AppModel],
        policy_factory: Callable[[], list[TraversalPolicy]],
        config: SessionConfig = SessionConfig(),
        seed: int = 0,
    ):
        self.apps = apps
        self.policy_factory = policy_factory
        self.config = config
        self.seed = seed

    def start(self, job: CrawlJob, device: SimDevice, attempt: int) -> RunOutcome:
        t0 = time.perf_counter()
        app = self.apps[job.app_id]
        device.install(app, seed=derive_seed(self.seed, job.app_id, attempt))
        device.launch()
        session = Session(device, self.policy_factory(), self.config, f"{job.app_id}-{attempt}")
        try:
            result = session.run()
        finally:
            app.release_images()
        snap = session.snapshot() if result.status == "paused_for_human" else None
        return RunOutcome(result, list(session.events), snap, time.perf_counter() - t0)

    def resume(self, ticket: InterventionTicket, device: SimDevice, human_actions: Sequence[Action]) -> RunOutcome:
        t0 = time.perf_counter()
        app = self.apps[ticket.app_id]
        device.replay(app, ticket.snapshot["device_log"])
        session = Session.restore(ticket.snapshot, device, self.policy_factory(), self.config)
        try:
            result = session.resume(human_actions)
        finally:
            app.release_images()
        snap = session.snapshot() if result.status == "paused_for_human" else None
        return RunOutcome(result, list(session.events), snap, time.perf_counter() - t0)


def _job_state(job: CrawlJob) -> dict:
    d = asdict(job)
    d["timing"] = {"wall_seconds": d.pop("wall_seconds")}
    return d


def _job_from_state(d: dict) -> CrawlJob:
    d = dict(d)
    legacy = d.pop("wall_seconds", 0.0)
    timing = d.pop("timing", {})
    return CrawlJob(**d, wall_seconds=timing.get("wall_seconds", legacy))


def trajectory_of(app_id: str, result: SessionResult) -> TrajectoryRecord:
    steps = [(e.source, e.action, e.target) for e in result.utg.edges]
    return TrajectoryRecord(result.session_id, app_id, steps, result.status)


class Coordinator:
    def __init__(
        self,
        pool: InstancePool,
        runner: SessionRunner,
        *,
        concurrency: int | None = None,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        store: DatasetStore | None = None,
        events_dir: str | Path | None = None,
    ):
        self.pool = pool
        self.runner = runner
        self.concurrency = max(1, min(concurrency or len(pool), len(pool)))
        self.max_attempts = max_attempts
        self.store = store
        self.events_dir = Path(events_dir) if events_dir is not None else None
        self.jobs: dict[str, CrawlJob] = {}
        self.queue: deque[str] = deque()
        self.tickets: dict[str, InterventionTicket] = {}
        self.dispatch_log: list[dict] = []
        self.vt = 0
        self._seq_base = 0
        self._packages: set[str] = set()

    # ------------------------------------------------------------ jobs
    def submit_jobs(self, metadata: Iterable[dict]) -> list[str]:
        batch = list(metadata)
        pkgs = [m["package"] for m in batch]
        dupes = {p for p in pkgs if pkgs.count(p) > 1} | (set(pkgs) & self._packages)
        if dupes:
            raise DuplicateJob(", ".join(sorted(dupes)))
        ids = []
        for m in batch:
            job = CrawlJob(
                job_id=f"job-{len(self.jobs):05d}",
                app_id=m["app_id"],
                package_name=m["package"],
                category=m.get("category", ""),
                name=m.get("name", ""),
            )
            self.jobs[job.job_id] = job
            self.queue.append(job.job_id)
            self._packages.add(job.package_name)
            ids.append(job.job_id)
            if self.store is not None:
                self.store.write_app(
                    {"app_id": job.app_id, "name": job.name, "package": job.package_name, "category": job.category}
                )
        return ids

    def counts(self) -> dict[str, int]:
        c = dict.fromkeys(JOB_STATES, 0)
        for j in self.jobs.values():
            c[j.state] += 1
        return c

    def _log(self, event: str, job: CrawlJob | None = None, **extra) -> None:
        entry = {
            "seq": self._seq_base + len(self.dispatch_log),
            "vt": self.vt,
            "event": event,
            "job": job.job_id if job else None,
            "app_id": job.app_id if job else None,
            **extra,
            "counts": self.counts(),
            "wall_time": time.time(),
        }
        self.dispatch_log.append(entry)

    # ------------------------------------------------------------ dispatch
    def run(self) -> dict:
        """Dispatch until every job is completed, failed or awaiting intervention."""
        t0 = time.perf_counter()
        if not self.queue:
            return self.report(time.perf_counter() - t0)
        running: dict[str, tuple[CrawlJob, cf.Future, int]] = {}
        with cf.ThreadPoolExecutor(max_workers=self.concurrency, thread_name_prefix="session") as ex:
            while self.queue or running:
                for inst in self.pool.idle():
                    if not self.queue or len(running) >= self.concurrency:
                        break
                    job = self.jobs[self.queue.popleft()]
                    device = self.pool.instances[inst]
                    if device.status != "idle":
                        raise FleetError(f"instance {inst} double-booked")
                    device.status = "busy"
                    job.state = "running"
                    job.assigned_instance = inst
                    job.attempts += 1
                    fut = ex.submit(self.runner.start, job, device, job.attempts)
                    running[inst] = (job, fut, self.vt)
                    self._log("dispatch", job, instance=inst, attempt=job.attempts)
                if not running:
                    break
                cf.wait([f for _, f, _ in running.values() if not f.done()])
                finish = {}
                for inst, (job, fut, start) in running.items():
                    exc = fut.exception()
                    steps = 0 if exc is not None else fut.result().result.steps_taken
                    finish[inst] = start + steps + 1
                inst = min(finish, key=lambda i: (finish[i], i))
                job, fut, _ = running.pop(inst)
                self.vt = finish[inst]
                self._complete(job, inst, fut)
        return self.report(time.perf_counter() - t0)

    def _release(self, inst: str) -> None:
        device = self.pool.instances[inst]
        device.uninstall()
        device.status = "idle"

    def _complete(self, job: CrawlJob, inst: str, fut: cf.Future) -> None:
        exc = fut.exception()
        job.assigned_instance = None
        self._release(inst)
        if exc is not None:
            log.warning("%s on %s raised %r", job.app_id, inst, exc)
            job.error = repr(exc)
            self._after_crash(job, inst, reason=repr(exc))
            return
        self._apply_outcome(job, fut.result(), inst)

    def _after_crash(self, job: CrawlJob, inst: str | None, reason: str) -> None:
        if job.attempts < self.max_attempts:
            job.state = "queued"
            self.queue.append(job.job_id)
            self._log("crash_requeued", job, instance=inst, attempt=job.attempts, reason=reason)
        else:
            job.state = "failed"
            self._log("failed", job, instance=inst, attempt=job.attempts, reason=reason)

    def _apply_outcome(self, job: CrawlJob, outcome: RunOutcome, inst: str | None) -> None:
        res = outcome.result
        if res.session_id not in job.sessions:
            job.sessions.append(res.session_id)
        job.steps = res.steps_taken
        job.escalations = [list(e) for e in res.escalations]
        job.last_status = res.status
        job.wall_seconds += outcome.wall_seconds
        self._ingest(job, outcome)
        if res.status == "completed":
            job.state = "completed"
            self._log("completed", job, instance=inst, steps=res.steps_taken, final=str(res.final_signature))
        elif res.status == "paused_for_human":
            job.state = "awaiting_intervention"
            ticket = InterventionTicket(
                ticket_id=f"ticket-{len(self.tickets):05d}",
                job_id=job.job_id,
                app_id=job.app_id,
                session_id=res.session_id,
                frozen_signature=str(res.final_signature),
                event_offset=outcome.snapshot["n_events"],
                reason=res.escalations[-1][2] if res.escalations else "unknown",
                snapshot=outcome.snapshot,
                created_at=time.time(),
            )
            self.tickets[ticket.ticket_id] = ticket
            self._log("paused", job, instance=inst, steps=res.steps_taken, ticket=ticket.ticket_id, reason=ticket.reason)
        else:
            job.error = res.error
            self._log("crashed", job, instance=inst, steps=res.steps_taken, reason=res.error)
            self._after_crash(job, inst, reason=res.error or "crashed")

    def _ingest(self, job: CrawlJob, outcome: RunOutcome) -> None:
        res = outcome.result
        if self.store is not None:
            for cap in res.records:
                self.store.add_capture(
                    job.app_id, res.session_id, cap.step, cap.image, cap.vh, cap.signature, cap.svh, job.category
                )
            self.store.write_trajectory(trajectory_of(job.app_id, res))
        if self.events_dir is not None and outcome.events:
            self.events_dir.mkdir(parents=True, exist_ok=True)
            with (self.events_dir / f"{res.session_id}.jsonl").open("a", encoding="utf-8") as f:
                for ev in outcome.events:
                    f.write(json.dumps(ev, sort_keys=True) + "\n")

    # ------------------------------------------------------------ intervention
    def list_paused(self) -> list[InterventionTicket]:
        return [t for t in self.tickets.values() if t.open]

    def resume(self, ticket_id: str, human_actions: Sequence[Action]) -> SessionResult:
        ticket = self.tickets.get(ticket_id)
        if ticket is None:
            raise UnknownTicket(ticket_id)
        if not ticket.open:
            raise AlreadyResumed(ticket_id)
        ticket.open = False
        job = self.jobs[ticket.job_id]
        idle = self.pool.idle()
        device = self.pool.instances[idle[0]] if idle else SimDevice("intervention")
        job.state = "running"
        job.assigned_instance = device.instance_id
        self._log("resume", job, instance=device.instance_id, ticket=ticket_id)
        try:
            outcome = self.runner.resume(ticket, device, human_actions)
        except Exception as exc:  # noqa: BLE001 - any session failure is a crash of this job
            job.assigned_instance = None
            self._release(device.instance_id) if device.instance_id in self.pool.instances else device.uninstall()
            job.error = repr(exc)
            self._after_crash(job, device.instance_id, reason=repr(exc))
            raise
        job.assigned_instance = None
        if device.instance_id in self.pool.instances:
            self._release(device.instance_id)
        self._apply_outcome(job, outcome, device.instance_id)
        return outcome.result

    # ------------------------------------------------------------ reporting
    def report(self, wall_seconds: float = 0.0) -> dict:
        jobs = []
        for j in self.jobs.values():
            jobs.append(
                {
                    "job_id": j.job_id,
                    "app_id": j.app_id,
                    "package": j.package_name,
                    "category": j.category,
                    "status": j.state,
                    "attempts": j.attempts,
                    "steps": j.steps,
                    "sessions": list(j.sessions),
                    "escalations": j.escalations,
                    "error": j.error,
                    "timing": {"wall_seconds": round(j.wall_seconds, 6)},
                }
            )
        return {
            "summary": {"total": len(self.jobs), **self.counts()},
            "open_tickets": len(self.list_paused()),
            "jobs": jobs,
            "timing": {"wall_seconds": round(wall_seconds, 6)},
        }

    # ------------------------------------------------------------ persistence
    def save_state(self, path: str | Path) -> None:
        state = {
            "vt": self.vt,
            "next_seq": self._seq_base + len(self.dispatch_log),
            "max_attempts": self.max_attempts,
            "jobs": [_job_state(j) for j in self.jobs.values()],
            "queue": list(self.queue),
            "tickets": [asdict(t) for t in self.tickets.values()],
        }
        Path(path).write_text(json.dumps(state, sort_keys=True), encoding="utf-8")

    def load_state(self, path: str | Path) -> None:
        state = json.loads(Path(path).read_text(encoding="utf-8"))
        self.vt = state["vt"]
        self._seq_base = state.get("next_seq", 0)
        self.dispatch_log = []
        self.max_attempts = state.get("max_attempts", self.max_attempts)
        self.jobs = {j["job_id"]: _job_from_state(j) for j in state["jobs"]}
        self.queue = deque(state["queue"])
        self.tickets = {t["ticket_id"]: InterventionTicket(**t) for t in state["tickets"]}
        self._packages = {j.package_name for j in self.jobs.values()}

    def write_dispatch_log(self, path: str | Path, append: bool = False) -> None:
        with Path(path).open("a" if append else "w", encoding="utf-8") as f:
            for entry in self.dispatch_log:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

"""Template-driven hyperparameter search.

Every network-parameter record is paired with every optimization-parameter
record (Cartesian product, network index outer).  Each pairing renders the
experiment template into a job, and jobs compete for ``num_slots`` resource
slots:

1. acquire the semaphore (one permit per slot),
2. take the mask lock, mark the lowest free slot busy, release the lock,
3. run the job bound to that slot,
4. take the mask lock, mark the slot free, release the lock,
5. release the semaphore.

The lock is never held while a job runs.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import re
import subprocess
import sys
import threading
import time
import traceback
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

log = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{\{(.*?)\}\}", re.S)
_PATH = re.compile(r"\s*(net_paras|opt_paras)((?:\s*\[\s*(?:\"[^\"]*\"|'[^']*'|-?\d+)\s*\])+)\s*$")
_ACCESSOR = re.compile(r"\[\s*(\"[^\"]*\"|'[^']*'|-?\d+)\s*\]")


class TemplateParseError(ValueError):
    pass


class RenderError(KeyError):
    def __str__(self):
        return str(self.args[0])


def parse_placeholder(expr: str) -> tuple[str, list[str | int]]:
    """``net_paras["activation"][1]`` -> ``("net_paras", ["activation", 1])``."""
    m = _PATH.match(expr)
    if not m:
        raise TemplateParseError(f"malformed placeholder {{{{{expr}}}}}")
    keys: list[str | int] = []
    for tok in _ACCESSOR.findall(m.group(2)):
        keys.append(tok[1:-1] if tok[0] in "\"'" else int(tok))
    return m.group(1), keys


def render(template: str, net_paras: dict, opt_paras: dict) -> str:
    """Substitute every ``{{ net_paras[...] }}`` / ``{{ opt_paras[...] }}`` with the JSON form of its value."""
    roots = {"net_paras": net_paras, "opt_paras": opt_paras}

    def substitute(m):
        root, keys = parse_placeholder(m.group(1))
        value: Any = roots[root]
        path = root
        for k in keys:
            path += f"[{json.dumps(k)}]"
            try:
                value = value[k]
            except (KeyError, IndexError, TypeError):
                raise RenderError(f"unresolved placeholder {path}") from None
        return json.dumps(value)

    return _PLACEHOLDER.sub(substitute, template)


@dataclass
class TuneJob:
    id: str
    net_index: int
    opt_index: int
    net_paras: dict
    opt_paras: dict
    config_text: str | None
    render_error: str | None = None


@dataclass
class TuneSpec:
    template: str
    net_paras_list: list[dict]
    opt_paras_list: list[dict]
    num_slots: int = 1
    results_dir: str = "results"
    mode: str = "inprocess"

    def __post_init__(self):
        if not self.net_paras_list or not self.opt_paras_list:
            raise ValueError("net_paras_list and opt_paras_list must be non-empty")
        if int(self.num_slots) < 1:
            raise ValueError("num_slots must be >= 1")
        if self.mode not in ("inprocess", "subprocess"):
            raise ValueError(f"unknown tune mode {self.mode!r}")

    @classmethod
    def from_file(cls, path) -> "TuneSpec":
        """Load a JSON tune spec.

        ``template`` may be inline text, an inline object, or a path relative
        to the spec file.  ``results_dir`` is relative to the working directory.
        """
        path = Path(path)
        doc = json.loads(path.read_text())
        unknown = set(doc) - {"template", "net_paras_list", "opt_paras_list", "num_slots", "results_dir", "mode"}
        if unknown:
            raise ValueError(f"tune spec: unknown keys {sorted(unknown)}")
        template = doc["template"]
        if isinstance(template, dict):
            template = json.dumps(template, indent=2)
        elif "{" not in template:
            candidate = (path.parent / template)
            template = candidate.read_text()
        return cls(
            template=template,
            net_paras_list=doc["net_paras_list"],
            opt_paras_list=doc["opt_paras_list"],
            num_slots=doc.get("num_slots", 1),
            results_dir=doc.get("results_dir", "results"),
            mode=doc.get("mode", "inprocess"),
        )


def expand(spec: TuneSpec) -> list[TuneJob]:
    jobs = []
    for i, net in enumerate(spec.net_paras_list):
        for j, opt in enumerate(spec.opt_paras_list):
            text, err = None, None
            try:
                text = render(spec.template, net, opt)
            except (RenderError, TemplateParseError) as e:
                err = str(e)
            jobs.append(TuneJob(f"net{i}_opt{j}", i, j, net, opt, text, err))
    return jobs


# slots ----------------------------------------------------------------------


@dataclass
class TraceEvent:
    seq: int
    time: float
    event: str
    job: str
    slot: int | None
    busy: int


class SlotPool:
    """Counting semaphore plus a lock-guarded availability mask."""

    def __init__(self, num_slots: int):
        self.num_slots = int(num_slots)
        self.semaphore = threading.Semaphore(self.num_slots)
        self.lock = threading.Lock()
        self.mask = [False] * self.num_slots
        self.trace: list[TraceEvent] = []
        self._trace_lock = threading.Lock()
        self.peak = 0

    def _log(self, event, job, slot=None):
        with self._trace_lock:
            busy = sum(self.mask)
            self.peak = max(self.peak, busy)
            self.trace.append(TraceEvent(len(self.trace), time.perf_counter(), event, job, slot, busy))

    def acquire(self, job: str) -> int:
        self.semaphore.acquire()
        self._log("sem_acquire", job)
        with self.lock:
            self._log("lock_acquire", job)
            slot = self.mask.index(False)
            self.mask[slot] = True
            self._log("claim", job, slot)
        self._log("lock_release", job, slot)
        return slot

    def release(self, job: str, slot: int) -> None:
        with self.lock:
            self._log("lock_acquire", job, slot)
            self.mask[slot] = False
            self._log("free", job, slot)
        self._log("lock_release", job, slot)
        self._log("sem_release", job, slot)
        self.semaphore.release()


_JOB_PROTOCOL = (
    "sem_acquire", "lock_acquire", "claim", "lock_release",
    "job_start", "job_end",
    "lock_acquire", "free", "lock_release", "sem_release",
)


def check_trace(trace: list[TraceEvent], num_slots: int) -> None:
    """Raise AssertionError unless the slot-pool protocol held throughout ``trace``.

    Checks: busy <= num_slots; busy plus jobs in transition equals permits
    held; each job's events follow the acquire / run / release protocol
    exactly once, so the mask lock is released before the job starts and
    re-taken only after it ends.
    """
    permits, busy = 0, 0
    transit: set[str] = set()
    per_job: dict[str, list[str]] = {}
    for ev in trace:
        if ev.event == "sem_acquire":
            permits += 1
            transit.add(ev.job)
        elif ev.event == "claim":
            busy += 1
            transit.discard(ev.job)
        elif ev.event == "free":
            busy -= 1
            transit.add(ev.job)
        elif ev.event == "sem_release":
            permits -= 1
            transit.discard(ev.job)
        assert busy == ev.busy, f"event {ev.seq}: mask population {ev.busy} != replayed {busy}"
        assert 0 <= busy <= num_slots, f"event {ev.seq}: {busy} busy slots exceeds {num_slots}"
        assert permits <= num_slots, f"event {ev.seq}: {permits} permits outstanding"
        assert busy + len(transit) == permits, f"event {ev.seq}: busy {busy} + transit {len(transit)} != permits {permits}"
        seq = per_job.setdefault(ev.job, [])
        seq.append(ev.event)
        assert tuple(seq) == _JOB_PROTOCOL[:len(seq)], f"job {ev.job}: events {seq} break the slot protocol"
    assert permits == 0 and busy == 0, "slots still held at end of trace"
    for job, seq in per_job.items():
        assert tuple(seq) == _JOB_PROTOCOL, f"job {job} did not complete the slot protocol"


# running ----------------------------------------------------------------------


JobRunner = Callable[[TuneJob, int, Path], dict]


def train_inprocess(job: TuneJob, slot: int, job_dir: Path) -> dict:
    """Build and train the rendered experiment in this process."""
    from akid.config import build_kid, parse_config

    config = parse_config(json.loads(job.config_text))
    kid = build_kid(config, log_dir=job_dir)
    kid.setup()
    metrics = kid.practice()
    kid.sink.close()
    return metrics


def train_subprocess(job: TuneJob, slot: int, job_dir: Path) -> dict:
    """Run ``python -m akid train`` in a child process bound to ``slot``."""
    job_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = job_dir / "config.json"
    cfg_path.write_text(job.config_text)
    env = dict(os.environ, AKID_SLOT=str(slot))
    proc = subprocess.run(
        [sys.executable, "-m", "akid", "train", "--config", str(cfg_path), "--log-dir", str(job_dir), "--no-plots"],
        env=env, capture_output=True, text=True,
    )
    (job_dir / "stdout.log").write_text(proc.stdout + proc.stderr)
    if proc.returncode != 0:
        raise RuntimeError(f"training exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}")
    return json.loads((job_dir / "metrics.json").read_text())


@dataclass
class TuneReport:
    run_id: str
    num_slots: int
    jobs: list[dict]
    peak_concurrency: int
    trace: list[TraceEvent] = field(repr=False, default_factory=list)
    path: Path | None = None

    @property
    def failed(self) -> list[dict]:
        return [j for j in self.jobs if j["status"] != "ok"]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "num_slots": self.num_slots,
            "peak_concurrency": self.peak_concurrency,
            "jobs": self.jobs,
        }


def run(spec: TuneSpec, runner: JobRunner | None = None, run_id: str | None = None) -> TuneReport:
    """Run every expanded job under the slot pool; failures are reported, not raised."""
    if runner is None:
        runner = train_subprocess if spec.mode == "subprocess" else train_inprocess
    jobs = expand(spec)
    run_id = run_id or time.strftime("%Y%m%d-%H%M%S") + "-" + uuid.uuid4().hex[:6]
    run_dir = Path(spec.results_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    pool = SlotPool(spec.num_slots)
    results: dict[str, dict] = {}
    results_lock = threading.Lock()

    def execute(job: TuneJob):
        entry = {"id": job.id, "net_index": job.net_index, "opt_index": job.opt_index,
                 "slot": None, "status": "failed", "wall_time": 0.0, "metrics": {}, "error": None}
        if job.render_error is not None:
            entry["error"] = job.render_error
        else:
            slot = pool.acquire(job.id)
            entry["slot"] = slot
            start = time.perf_counter()
            pool._log("job_start", job.id, slot)
            try:
                entry["metrics"] = runner(job, slot, run_dir / job.id)
                entry["status"] = "ok"
            except Exception as e:  # a failed job must not stop the others
                entry["error"] = f"{type(e).__name__}: {e}"
                log.debug("job %s failed\n%s", job.id, traceback.format_exc())
            finally:
                pool._log("job_end", job.id, slot)
                entry["wall_time"] = time.perf_counter() - start
                pool.release(job.id, slot)
        with results_lock:
            results[job.id] = entry
            _write_job_summary(run_dir / job.id, entry)

    with ThreadPoolExecutor(max_workers=len(jobs)) as ex:
        list(ex.map(execute, jobs))

    report = TuneReport(run_id, spec.num_slots, [results[j.id] for j in jobs], pool.peak, pool.trace)
    report.path = run_dir / "report.json"
    report.path.write_text(json.dumps(report.to_dict(), indent=2, default=float))
    return report


def _write_job_summary(job_dir: Path, entry: dict) -> None:
    job_dir.mkdir(parents=True, exist_ok=True)
    with open(job_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "value"])
        for key in ("id", "status", "slot", "wall_time", "error"):
            w.writerow([key, entry[key]])
        for key, value in sorted(entry["metrics"].items()):
            w.writerow([f"metric/{key}", value])


def tune(spec: TuneSpec, runner: JobRunner | None = None) -> TuneReport:
    return run(spec, runner)

"""Atomistic batch execution: one independent model call per table row.

Each request is built from a single row and the template, nothing else; no
conversation history is carried between rows. A run owns its table through a
lock file, checkpoints after every finished row under ``.sessions/`` next to
the table, and appends one :class:`~atomcode.store.RunRecord` to the ledger
when it finishes or is interrupted.

Rows are processed at-least-once: a crash between a provider answer and the
checkpoint means that row is asked again on resume. Cell writes are keyed by
(row, column), so with a deterministic provider the final table is the same.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
import uuid
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from ._util import atomic_write_text, content_hash, utc_now
from .errors import (
    AuthError,
    JobInterrupted,
    LockedError,
    NotFoundError,
    ProviderError,
    SchemaError,
    StaleCheckpointError,
)
from .promptlib import PromptTemplate, check_fields, render
from .provider import ChatRequest, ModelConfig, Provider, make_provider, prompt_hash
from .store import (
    CellOutput,
    PerRowEntry,
    Row,
    RunRecord,
    SegmentTable,
    append_run_record,
    load_table,
    parse_output_column,
    write_outputs,
)

logger = logging.getLogger(__name__)

SESSIONS_DIR = ".sessions"
LEDGER_NAME = "ledger.jsonl"

ProgressFn = Callable[[dict[str, Any]], None]


def stderr_progress(event: Mapping[str, Any]) -> None:
    sys.stderr.write(json.dumps(event) + "\n")
    sys.stderr.flush()


def build_request(template: PromptTemplate, row: Row, config: ModelConfig) -> ChatRequest:
    """The request for one row: the rendered template, with no other context."""
    return ChatRequest(user=render(template, row))


@dataclass
class Job:
    table_path: Path
    template: PromptTemplate
    config: ModelConfig
    output_column: str
    row_range: tuple[int, int] | None = None
    parallelism: int = 4
    ledger_path: Path | None = None
    rate: float | None = None

    def __post_init__(self):
        self.table_path = Path(self.table_path).resolve()
        parse_output_column(self.output_column)
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.ledger_path is None:
            self.ledger_path = self.table_path.parent / LEDGER_NAME
        self.ledger_path = Path(self.ledger_path).resolve()
        if self.row_range is not None:
            self.row_range = (int(self.row_range[0]), int(self.row_range[1]))

    @property
    def pass_tag(self) -> str:
        return parse_output_column(self.output_column)[1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "table_path": str(self.table_path),
            "template": {
                "name": self.template.name,
                "body": self.template.body,
                "version_hash": self.template.version_hash,
            },
            "config": self.config.to_dict(),
            "output_column": self.output_column,
            "pass_tag": self.pass_tag,
            "row_range": list(self.row_range) if self.row_range is not None else None,
            "parallelism": self.parallelism,
            "ledger_path": str(self.ledger_path),
            "rate": self.rate,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Job:
        tpl = d["template"]
        template = PromptTemplate(tpl["name"], tpl["body"])
        if template.version_hash != tpl["version_hash"]:
            raise SchemaError("checkpoint template body does not match its recorded hash")
        return cls(
            table_path=Path(d["table_path"]),
            template=template,
            config=ModelConfig.from_dict(d["config"]),
            output_column=d["output_column"],
            row_range=tuple(d["row_range"]) if d.get("row_range") is not None else None,
            parallelism=d["parallelism"],
            ledger_path=Path(d["ledger_path"]),
            rate=d.get("rate"),
        )


@dataclass
class RowState:
    status: str
    response_hash: str


@dataclass
class SessionState:
    session_id: str
    job: dict[str, Any]
    checkpoint_path: str
    n_rows: int
    completed: dict[int, RowState] = field(default_factory=dict)
    created_at: str = field(default_factory=utc_now)
    updated_at: str = field(default_factory=utc_now)
    state: str = "running"
    run_ids: list[str] = field(default_factory=list)

    @property
    def row_range(self) -> tuple[int, int]:
        return tuple(self.job["row_range"])

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "job": self.job,
            "checkpoint_path": self.checkpoint_path,
            "n_rows": self.n_rows,
            "completed": {
                str(i): {"status": s.status, "response_hash": s.response_hash}
                for i, s in sorted(self.completed.items())
            },
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "state": self.state,
            "run_ids": list(self.run_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SessionState:
        return cls(
            session_id=d["session_id"],
            job=d["job"],
            checkpoint_path=d["checkpoint_path"],
            n_rows=d["n_rows"],
            completed={int(i): RowState(**s) for i, s in d["completed"].items()},
            created_at=d["created_at"],
            updated_at=d["updated_at"],
            state=d.get("state", "running"),
            run_ids=list(d.get("run_ids", [])),
        )

    def save(self) -> None:
        self.updated_at = utc_now()
        atomic_write_text(self.checkpoint_path, json.dumps(self.to_dict(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path: str | os.PathLike) -> SessionState:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunResult:
    run_id: str
    session_id: str
    counts: dict[str, int]
    wall_time_ms: int
    checkpoint_path: str = ""

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class TableLock:
    """Advisory lock: ``<table>.lock`` holding the owner's pid.

    A lock left by a dead process is taken over.
    """

    def __init__(self, table_path: Path):
        self.path = table_path.with_name(table_path.name + ".lock")
        self._held = False

    @staticmethod
    def _alive(pid: int) -> bool:
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        return True

    def acquire(self) -> None:
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and self._alive(pid):
                    raise LockedError(f"{self.path} is held by running process {pid}") from None
                logger.warning("removing stale lock %s (pid %s)", self.path, pid)
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            self._held = True
            return
        raise LockedError(f"could not acquire {self.path}")

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> TableLock:
        self.acquire()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()


def session_dir(table_path: Path) -> Path:
    return Path(table_path).resolve().parent / SESSIONS_DIR


def find_checkpoint(session: str, search_dirs: list[Path]) -> Path:
    """Resolve a session id or checkpoint path to an existing checkpoint file."""
    direct = Path(session)
    if direct.suffix == ".json" and direct.is_file():
        return direct
    for d in search_dirs:
        for candidate in (d / SESSIONS_DIR / f"{session}.json", d / f"{session}.json"):
            if candidate.is_file():
                return candidate
    raise NotFoundError(f"no checkpoint for session {session!r}")


def _resolve_range(row_range: tuple[int, int] | None, n: int) -> tuple[int, int]:
    start, end = row_range if row_range is not None else (0, n)
    if not 0 <= start <= end <= n:
        raise SchemaError(f"row range [{start}, {end}) outside table of {n} rows")
    return start, end


class _Execution:
    """One pass over a list of row indices; the caller's thread is the only writer."""

    def __init__(
        self,
        job: Job,
        state: SessionState,
        table: SegmentTable,
        provider: Provider,
        progress: ProgressFn | None,
        module: str,
    ):
        self.job = job
        self.state = state
        self.table = table
        self.provider = provider
        self.progress = progress
        self.module = module
        self.run_id = str(uuid.uuid4())
        self.per_row: dict[int, PerRowEntry] = {}
        self.counts = {"ok": 0, "error": 0, "skipped": 0}
        self.t0 = time.monotonic()

    def _finish(self, index: int, cell: CellOutput, entry: PerRowEntry) -> None:
        # table first, checkpoint second: a crash in between only causes a re-ask
        self.table = write_outputs(self.table, self.job.output_column, {index: cell})
        self.state.completed[index] = RowState(cell.status, entry.response_hash)
        self.state.save()
        self.per_row[index] = entry
        self.counts[cell.status] += 1
        if self.progress is not None:
            elapsed = int((time.monotonic() - self.t0) * 1000)
            self.progress({"row": index, "status": cell.status, "elapsed_ms": elapsed})

    def _settle(self, index: int, phash: str, fut: Future) -> None:
        try:
            resp = fut.result()
        except AuthError:
            raise
        except ProviderError as exc:
            logger.warning("row %d failed: %s", index, exc)
            entry = PerRowEntry(index, phash, "", "error", error=str(exc))
            self._finish(index, CellOutput("", "error", self.run_id), entry)
            return
        if not resp.text.strip():
            entry = PerRowEntry(index, phash, content_hash(resp.text), "error", resp.latency_ms,
                                resp.token_usage, error="empty response")
            self._finish(index, CellOutput("", "error", self.run_id), entry)
            return
        entry = PerRowEntry(index, phash, content_hash(resp.text), "ok", resp.latency_ms, resp.token_usage)
        self._finish(index, CellOutput(resp.text, "ok", self.run_id), entry)

    def run(self, indices: list[int]) -> RunResult:
        outcome = "completed"
        try:
            with ThreadPoolExecutor(max_workers=self.job.parallelism) as pool:
                self._loop(pool, indices)
        except KeyboardInterrupt:
            outcome = "interrupted"
            raise
        except BaseException:
            outcome = "aborted"
            raise
        finally:
            self._finalize(outcome)
        return RunResult(
            self.run_id,
            self.state.session_id,
            dict(self.counts),
            int((time.monotonic() - self.t0) * 1000),
            self.state.checkpoint_path,
        )

    def _loop(self, pool: ThreadPoolExecutor, indices: list[int]) -> None:
        pending = iter(indices)
        in_flight: dict[Future, tuple[int, str]] = {}
        try:
            while True:
                while len(in_flight) < self.job.parallelism:
                    i = next(pending, None)
                    if i is None:
                        break
                    row = self.table.rows[i]
                    if not row.data.strip():
                        self._finish(i, CellOutput("", "skipped", self.run_id), PerRowEntry(i, "", "", "skipped"))
                        continue
                    request = build_request(self.job.template, row, self.job.config)
                    in_flight[pool.submit(self.provider.complete, request)] = (i, prompt_hash(request))
                if not in_flight:
                    return
                done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: in_flight[f][0]):
                    i, phash = in_flight.pop(fut)
                    self._settle(i, phash, fut)
        finally:
            for fut in in_flight:
                fut.cancel()

    def _finalize(self, outcome: str) -> None:
        start, end = self.state.row_range
        self.state.run_ids.append(self.run_id)
        rows_done = all(
            self.state.completed.get(i) and self.state.completed[i].status in ("ok", "skipped")
            for i in range(start, end)
        )
        if outcome == "completed":
            self.state.state = "completed" if rows_done else "partial"
        else:
            self.state.state = outcome
        self.state.save()
        record = RunRecord(
            run_id=self.run_id,
            timestamp=utc_now(),
            module=self.module,
            model_config=self.job.config.to_dict(),
            template_hash=self.job.template.version_hash,
            template_body=self.job.template.body,
            template_name=self.job.template.name,
            source=str(self.job.table_path),
            row_range=(start, end),
            output_column=self.job.output_column,
            per_row=[self.per_row[i] for i in sorted(self.per_row)],
            session_id=self.state.session_id,
            outcome=outcome,
            params={"parallelism": self.job.parallelism, "pass_tag": self.job.pass_tag},
        )
        append_run_record(self.job.ledger_path, record)


def _provider_for(job: Job, provider: Provider | None) -> tuple[Provider, bool]:
    if provider is not None:
        return provider, False
    return make_provider(job.config, rate=job.rate), True


def _execute(job, state, table, indices, provider, progress, module) -> RunResult:
    prov, owned = _provider_for(job, provider)
    try:
        execution = _Execution(job, state, table, prov, progress, module)
        try:
            return execution.run(indices)
        except KeyboardInterrupt:
            raise JobInterrupted(
                f"run interrupted; resume with session {state.session_id}",
                state.session_id,
                state.checkpoint_path,
            ) from None
    finally:
        if owned:
            prov.close()


def run_job(
    job: Job,
    provider: Provider | None = None,
    progress: ProgressFn | None = stderr_progress,
    session_id: str | None = None,
) -> RunResult:
    """Process every row in the job's range into ``job.output_column``.

    Schema problems raise before any request. Per-row provider failures mark
    the row ``error`` and the run continues; an authentication failure or an
    interrupt stops the run after ledgering what was done.
    """
    with TableLock(job.table_path):
        table = load_table(job.table_path)
        check_fields(job.template, table.column_names)
        start, end = _resolve_range(job.row_range, len(table))
        job.row_range = (start, end)

        session_id = session_id or uuid.uuid4().hex[:12]
        state = SessionState(
            session_id=session_id,
            job=job.to_dict(),
            checkpoint_path=str(session_dir(job.table_path) / f"{session_id}.json"),
            n_rows=len(table),
        )
        state.save()
        if not table.has_column(job.output_column):
            table = write_outputs(table, job.output_column, {})
        return _execute(job, state, table, list(range(start, end)), provider, progress, "run")


def resume(
    checkpoint_path: str | os.PathLike,
    provider: Provider | None = None,
    progress: ProgressFn | None = stderr_progress,
) -> RunResult:
    """Finish an interrupted session: redo rows never finished or finished with ``error``."""
    state = SessionState.load(checkpoint_path)
    job = Job.from_dict(state.job)
    with TableLock(job.table_path):
        table = load_table(job.table_path)
        if len(table) != state.n_rows:
            raise StaleCheckpointError(
                f"table {job.table_path} has {len(table)} rows, checkpoint expected {state.n_rows}"
            )
        check_fields(job.template, table.column_names)
        if not table.has_column(job.output_column):
            if any(s.status == "ok" for s in state.completed.values()):
                raise StaleCheckpointError(f"output column {job.output_column} vanished from {job.table_path}")
            table = write_outputs(table, job.output_column, {})
        start, end = state.row_range
        todo = [
            i for i in range(start, end)
            if i not in state.completed or state.completed[i].status == "error"
        ]
        state.state = "running"
        state.save()
        return _execute(job, state, table, todo, provider, progress, "resume")


def replay_prompt_hashes(record: RunRecord, table: SegmentTable | None = None) -> list[tuple[int, str, str]]:
    """Re-render each prompt of a ledger record and return ``(row, recorded, recomputed)``.

    Uses only the record's template body and its source table.
    """
    template = PromptTemplate(record.template_name or "replay", record.template_body)
    if content_hash(template.body) != record.template_hash:
        raise SchemaError(f"run {record.run_id}: template body does not match template_hash")
    table = table if table is not None else load_table(record.source)
    out = []
    for entry in record.per_row:
        if entry.status == "skipped":
            continue
        recomputed = content_hash(render(template, table.rows[entry.row_index]))
        out.append((entry.row_index, entry.prompt_hash, recomputed))
    return out

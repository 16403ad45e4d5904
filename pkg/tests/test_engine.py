import json
import os
import signal
import subprocess
import sys
import textwrap

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomcode._util import content_hash
from atomcode.errors import (
    EmptyDataError,
    JobInterrupted,
    LockedError,
    MissingFieldError,
    ServerError,
    StaleCheckpointError,
)
from atomcode.engine import (
    Job,
    SessionState,
    TableLock,
    build_request,
    replay_prompt_hashes,
    resume,
    run_job,
)
from atomcode.promptlib import PromptTemplate, build_from_codebook, load_codebook
from atomcode.provider import MockProvider, ModelConfig
from atomcode.store import Row, load_table, make_table, read_ledger, save_table

from .conftest import FIXTURES

MOCK = ModelConfig("mock", "mock-seed-1")
TEMPLATE = PromptTemplate("ctx", "Context: {{context_1}}\n\n{{data}}")


def consent_template():
    return build_from_codebook(load_codebook(FIXTURES / "codebook_consent.json"))


def quiet_run(job, **kw):
    kw.setdefault("progress", None)
    return run_job(job, **kw)


def interrupt_after(k):
    seen = []

    def progress(event):
        seen.append(event)
        if len(seen) == k:
            raise KeyboardInterrupt

    return progress


# -- build_request -------------------------------------------------------------


def test_build_request_single_row():
    row = Row(0, "d", {"doc_id": "d", "data": "hello", "context_1": "G8"})
    req = build_request(TEMPLATE, row, MOCK)
    assert req.user == "Context: G8\n\nhello"
    assert req.system is None


def test_build_request_empty_data():
    with pytest.raises(EmptyDataError):
        build_request(TEMPLATE, Row(0, "d", {"data": " ", "context_1": "x"}), MOCK)


cells = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=25).filter(str.strip)


@st.composite
def independence_case(draw):
    target = [draw(cells), draw(cells)]
    others = draw(st.lists(st.tuples(cells, cells), max_size=12))
    perm = draw(st.permutations(range(len(others))))
    cut = draw(st.integers(0, len(others)))
    pos = draw(st.integers(0, len(others)))
    return target, others, perm, cut, pos


def request_for(target, others, pos):
    rows = [[f"d{i}", d, c] for i, (d, c) in enumerate(others)]
    rows.insert(pos, ["target", target[0], target[1]])
    table = make_table(["doc_id", "data", "context_1"], rows)
    return build_request(TEMPLATE, table.rows[pos], MOCK)


@settings(max_examples=250)
@given(independence_case())
def test_request_independent_of_other_rows(case):
    target, others, perm, cut, pos = case
    alone = request_for(target, [], 0)
    assert request_for(target, others, min(pos, len(others))) == alone
    permuted = [others[i] for i in perm]
    assert request_for(target, permuted, min(pos, len(permuted))) == alone
    deleted = permuted[:cut]
    assert request_for(target, deleted, min(pos, len(deleted))) == alone


def test_same_row_in_large_table():
    big = [[f"d{i}", f"segment {i}", "G"] for i in range(1000)]
    table = make_table(["doc_id", "data", "context_1"], big)
    single = make_table(["doc_id", "data", "context_1"], [big[637]])
    assert build_request(TEMPLATE, table.rows[637], MOCK) == build_request(TEMPLATE, single.rows[0], MOCK)


# -- run_job -----------------------------------------------------------------


def test_skip_empty_rows(make_csv):
    path = make_csv(["doc_id", "data", "context_1"], [[f"d{i}", "" if i == 2 else f"text {i}", "c"] for i in range(5)])
    result = quiet_run(Job(path, TEMPLATE, MOCK, "out:label:pass1"))
    assert result.counts == {"ok": 4, "error": 0, "skipped": 1}
    assert load_table(path).column("out:label:pass1")[2] == ""


def test_fault_on_row_three(make_csv):
    path = make_csv(["doc_id", "data", "context_1"], [[f"d{i}", f"text {i}", "c"] for i in range(5)])

    def fault(request):
        if request.user.endswith("text 3"):
            raise ServerError("injected", 500)

    provider = MockProvider(MOCK, fault=fault)
    result = quiet_run(Job(path, TEMPLATE, MOCK, "out:label:pass1"), provider=provider)
    assert result.counts == {"ok": 4, "error": 1, "skipped": 0}
    (record,) = read_ledger(path.parent / "ledger.jsonl")
    statuses = {e.row_index: e.status for e in record.per_row}
    assert statuses[3] == "error"
    assert [e.row_index for e in record.per_row] == [0, 1, 2, 3, 4]
    assert load_table(path).column("out:label:pass1")[3] == ""


def test_dual_pass_identical(interviews):
    template = consent_template()
    for tag in ("pass1", "pass2"):
        quiet_run(Job(interviews, template, MOCK, f"out:label:{tag}", parallelism=4))
    table = load_table(interviews)
    assert table.column("out:label:pass1") == table.column("out:label:pass2")
    assert all(table.column("out:label:pass1"))


def test_one_to_one_ledger(interviews):
    result = quiet_run(Job(interviews, consent_template(), MOCK, "out:label:pass1"))
    (record,) = read_ledger(interviews.parent / "ledger.jsonl")
    assert record.run_id == result.run_id
    assert [e.row_index for e in record.per_row] == list(range(23))
    assert record.row_range == (0, 23)
    assert record.template_body == consent_template().body
    assert record.model_config["model_id"] == "mock-seed-1"
    table = load_table(interviews)
    for e in record.per_row:
        assert e.response_hash == content_hash(table.rows[e.row_index].values["out:label:pass1"])
    assert all(recorded == recomputed for _, recorded, recomputed in replay_prompt_hashes(record))


def test_row_range_and_progress(interviews):
    events = []
    result = run_job(Job(interviews, consent_template(), MOCK, "out:label:p", row_range=(5, 9)), progress=events.append)
    assert result.counts["ok"] == 4
    assert sorted(e["row"] for e in events) == [5, 6, 7, 8]
    assert all(set(e) == {"row", "status", "elapsed_ms"} for e in events)
    col = load_table(interviews).column("out:label:p")
    assert [bool(v) for v in col] == [5 <= i < 9 for i in range(23)]


def test_schema_error_before_any_request(make_csv):
    path = make_csv(["doc_id", "data"], [["a", "x"]])
    provider = MockProvider(MOCK)
    with pytest.raises(MissingFieldError):
        quiet_run(Job(path, TEMPLATE, MOCK, "out:label:p"), provider=provider)
    assert provider.calls == 0
    assert not (path.parent / "ledger.jsonl").exists()


def test_checkpoint_reparses_equal(interviews):
    result = quiet_run(Job(interviews, consent_template(), MOCK, "out:label:p"))
    state = SessionState.load(result.checkpoint_path)
    assert SessionState.from_dict(json.loads(json.dumps(state.to_dict()))) == state
    assert set(state.completed) == set(range(23))
    assert state.state == "completed"


# -- resume ------------------------------------------------------------------


def reference_bytes(tmp_path_factory):
    ref = tmp_path_factory.mktemp("ref") / "interviews.csv"
    ref.write_bytes((FIXTURES / "interviews_23.csv").read_bytes())
    quiet_run(Job(ref, consent_template(), MOCK, "out:label:pass1", parallelism=1))
    return ref.read_bytes()


@pytest.mark.parametrize("k", [1, 5, 10, 12, 22])
@pytest.mark.parametrize("parallelism", [1, 4])
def test_resume_converges(interviews, tmp_path_factory, k, parallelism):
    expected = reference_bytes(tmp_path_factory)
    job = Job(interviews, consent_template(), MOCK, "out:label:pass1", parallelism=parallelism)
    with pytest.raises(JobInterrupted) as info:
        run_job(job, progress=interrupt_after(k))
    state = SessionState.load(info.value.checkpoint_path)
    assert len(state.completed) >= k
    assert not (interviews.parent / "interviews.csv.lock").exists()
    result = resume(info.value.checkpoint_path, progress=None)
    assert interviews.read_bytes() == expected
    assert result.counts["ok"] == 23 - len(state.completed)
    records = read_ledger(interviews.parent / "ledger.jsonl")
    assert [r.outcome for r in records] == ["interrupted", "completed"]
    assert len({r.session_id for r in records}) == 1
    assert records[1].module == "resume"


def test_resume_completed_is_noop(interviews):
    result = quiet_run(Job(interviews, consent_template(), MOCK, "out:label:pass1"))
    before = interviews.read_bytes()
    again = resume(result.checkpoint_path, progress=None)
    assert again.counts == {"ok": 0, "error": 0, "skipped": 0}
    assert interviews.read_bytes() == before


def test_resume_retries_errors(make_csv):
    path = make_csv(["doc_id", "data", "context_1"], [[f"d{i}", f"text {i}", "c"] for i in range(4)])

    def fault(request):
        if request.user.endswith("text 1"):
            raise ServerError("injected", 500)

    first = quiet_run(Job(path, TEMPLATE, MOCK, "out:label:p"), provider=MockProvider(MOCK, fault=fault))
    assert first.counts["error"] == 1
    second = resume(first.checkpoint_path, progress=None)
    assert second.counts == {"ok": 1, "error": 0, "skipped": 0}
    assert all(load_table(path).column("out:label:p"))


def test_resume_stale_row_count(interviews):
    with pytest.raises(JobInterrupted) as info:
        run_job(Job(interviews, consent_template(), MOCK, "out:label:p"), progress=interrupt_after(3))
    table = load_table(interviews)
    grown = make_table(table.column_names, [[r.values[n] for n in table.column_names] for r in table.rows] + [["X"] + [""] * (len(table.column_names) - 1)])
    save_table(grown, interviews)
    with pytest.raises(StaleCheckpointError):
        resume(info.value.checkpoint_path, progress=None)


def test_hard_kill_then_resume(interviews, tmp_path_factory):
    """SIGKILL mid-run: no interrupted record is written, but resume still converges."""
    expected = reference_bytes(tmp_path_factory)
    script = textwrap.dedent(
        f"""
        import os, signal
        from atomcode.engine import Job, run_job
        from atomcode.promptlib import build_from_codebook, load_codebook
        from atomcode.provider import ModelConfig
        seen = []
        def progress(event):
            seen.append(event)
            if len(seen) == 7:
                os.kill(os.getpid(), signal.SIGKILL)
        tpl = build_from_codebook(load_codebook({str(FIXTURES / "codebook_consent.json")!r}))
        run_job(Job({str(interviews)!r}, tpl, ModelConfig("mock", "mock-seed-1"), "out:label:pass1", parallelism=1),
                progress=progress, session_id="killed")
        """
    )
    proc = subprocess.run([sys.executable, "-c", script], capture_output=True)
    assert proc.returncode == -signal.SIGKILL
    lock = interviews.parent / "interviews.csv.lock"
    assert lock.exists()  # left behind by the dead process, taken over below
    resume(interviews.parent / ".sessions" / "killed.json", progress=None)
    assert interviews.read_bytes() == expected
    assert not lock.exists()
    records = read_ledger(interviews.parent / "ledger.jsonl")
    assert [r.session_id for r in records] == ["killed"]


# -- locking -------------------------------------------------------------------


def test_live_lock_blocks(small_table):
    lock = small_table.with_name(small_table.name + ".lock")
    lock.write_text(str(os.getppid()))
    with pytest.raises(LockedError):
        quiet_run(Job(small_table, TEMPLATE, MOCK, "out:label:p"))
    assert lock.read_text() == str(os.getppid())


def test_lock_released_and_exclusive(small_table):
    with TableLock(small_table):
        with pytest.raises(LockedError):
            TableLock(small_table).acquire()
    quiet_run(Job(small_table, TEMPLATE, MOCK, "out:label:p"))
    assert not small_table.with_name(small_table.name + ".lock").exists()

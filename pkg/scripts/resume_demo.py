"""Interrupt a mock run after k rows, resume it, and compare with an uninterrupted run.

    python scripts/resume_demo.py tests/fixtures/interviews_23.csv \
        --codebook tests/fixtures/codebook_consent.json -k 1 5 12 22
"""

import argparse
import logging
import shutil
import tempfile
from pathlib import Path

from atomcode.engine import Job, resume, run_job
from atomcode.errors import JobInterrupted
from atomcode.promptlib import build_from_codebook, load_codebook
from atomcode.provider import ModelConfig
from atomcode.store import read_ledger

logger = logging.getLogger("resume_demo")


def copy_into(src: Path, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    dst = directory / src.name
    shutil.copyfile(src, dst)
    return dst


def interrupting_progress(k: int):
    seen = 0

    def progress(event):
        nonlocal seen
        seen += 1
        if seen == k:
            raise KeyboardInterrupt

    return progress


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("table")
    parser.add_argument("--codebook", required=True)
    parser.add_argument("-k", type=int, nargs="+", default=[1, 5, 12, 22])
    parser.add_argument("--parallelism", type=int, default=4)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    template = build_from_codebook(load_codebook(args.codebook))
    config = ModelConfig("mock", "resume-demo")
    column = "out:code:pass1"
    src = Path(args.table)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        reference = copy_into(src, root / "reference")
        run_job(Job(reference, template, config, column, parallelism=args.parallelism), progress=None)
        expected = reference.read_bytes()

        all_ok = True
        for k in args.k:
            path = copy_into(src, root / f"k{k}")
            try:
                run_job(Job(path, template, config, column, parallelism=args.parallelism),
                        progress=interrupting_progress(k))
                logger.info("k=%d: run finished before the interruption point", k)
                continue
            except JobInterrupted as exc:
                result = resume(exc.checkpoint_path, progress=None)
            same = path.read_bytes() == expected
            sessions = {r.session_id for r in read_ledger(path.parent / "ledger.jsonl")}
            all_ok &= same
            print(f"k={k:>3}: resumed {result.counts['ok']} rows, identical={same}, "
                  f"ledger sessions={len(sessions)}")
        print("all identical" if all_ok else "MISMATCH")


if __name__ == "__main__":
    main()

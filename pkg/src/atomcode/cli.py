"""Command-line entry point: segment -> prompt -> run -> extract -> irr -> history.

Exit codes: 0 success, 1 partial (some rows errored), 2 configuration or
schema error, 3 provider authentication error, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import uuid
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from ._util import content_hash, utc_now
from .engine import LEDGER_NAME, Job, find_checkpoint, replay_prompt_hashes, resume, run_job, stderr_progress
from .errors import (
    AtomcodeError,
    AuthError,
    EmptyDocumentError,
    JobInterrupted,
    ProviderError,
)
from .extract import (
    OutputSchema,
    TabulationPolicy,
    derived_column,
    extract_column,
    format_number,
    tabulate_passes,
)
from .irr import compare_columns
from .promptlib import (
    PromptTemplate,
    build_from_codebook,
    list_templates,
    load_codebook,
    render,
    resolve_template,
    save_template,
    slugify,
)
from .provider import parse_model_spec
from .segmenter import MODE_NAMES, load_document, parse_mode, segment, to_table
from .store import (
    LedgerWarning,
    PerRowEntry,
    RunRecord,
    append_run_record,
    load_table,
    query_history,
    save_table,
    set_cells,
)

logger = logging.getLogger("atomcode")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_AUTH, EXIT_INTERRUPTED = 0, 1, 2, 3, 130
SECRET_KEYS = ("api_key", "apikey", "key", "token", "secret", "password")


class CliError(AtomcodeError):
    """Bad invocation: reported with exit code 2."""


@dataclass
class CliConfig:
    model: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    base_url: str | None = None
    api_key_env: str | None = None
    request_timeout_s: int = 120
    ledger: str | None = None
    library: str = "prompts"
    parallelism: int = 4
    rate: float = 2.0

    @classmethod
    def load(cls, path: str | None) -> CliConfig:
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        secret = [k for k in data if k.lower() in SECRET_KEYS]
        if secret:
            raise CliError(
                f"config file {path} contains {', '.join(secret)}; API keys are only read from "
                "environment variables named by api_key_env"
            )
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CliError(f"unknown config keys in {path}: {', '.join(unknown)}")
        return cls(**data)

    def merged(self, args: argparse.Namespace) -> CliConfig:
        values = asdict(self)
        for name in values:
            flag = getattr(args, name, None)
            if flag is not None:
                values[name] = flag
        return CliConfig(**values)

    def describe(self) -> dict[str, Any]:
        d = asdict(self)
        env = self.api_key_env
        if env is None and self.model:
            try:
                env = parse_model_spec(self.model).api_key_env
            except ValueError:
                env = None
        d["effective_api_key_env"] = env or None
        d["api_key_present"] = bool(env and os.environ.get(env))
        return d


def _emit(args: argparse.Namespace, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, ensure_ascii=False, default=str))
    else:
        print(text)


def _parse_range(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    start, sep, end = text.partition(":")
    if not sep:
        raise CliError(f"--range must look like start:end, got {text!r}")
    try:
        lo = int(start) if start else 0
        hi = int(end) if end else None
    except ValueError:
        raise CliError(f"--range must hold integers, got {text!r}") from None
    return (lo, hi) if hi is not None else (lo, -1)


def _ledger_for(cfg: CliConfig, table: Path) -> Path:
    return Path(cfg.ledger) if cfg.ledger else table.resolve().parent / LEDGER_NAME


def _model_config(cfg: CliConfig, args: argparse.Namespace):
    if not cfg.model:
        raise CliError("no model given; pass --model <kind>:<model_id> or set model in the config file")
    return parse_model_spec(
        cfg.model,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        base_url=cfg.base_url,
        api_key_env=cfg.api_key_env,
        request_timeout_s=cfg.request_timeout_s,
        fixture_path=str(Path(args.mock_fixtures).resolve()) if getattr(args, "mock_fixtures", None) else None,
    )


# -- commands ----------------------------------------------------------------


def cmd_segment(args: argparse.Namespace, cfg: CliConfig) -> int:
    for p in args.inputs:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")
    context = {}
    for item in args.context or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--context must look like name=value, got {item!r}")
        context[name] = value
    mode = parse_mode(args.mode, args.delimiter, args.sentences)
    segments = []
    for p in args.inputs:
        doc = load_document(p)
        try:
            segments.extend(segment(doc, mode))
        except EmptyDocumentError:
            logger.warning("skipping empty document %s", p)
    if not segments:
        raise CliError("no segments produced: every input document was empty")
    table = to_table(segments, context, args.output)
    save_table(table)
    n_docs = len({s.doc_id for s in segments})
    payload = {"table": str(args.output), "rows": len(table), "documents": n_docs, "mode": args.mode}
    _emit(args, payload, f"wrote {len(table)} rows from {n_docs} document(s) to {args.output}")
    return EXIT_OK


def cmd_prompt(args: argparse.Namespace, cfg: CliConfig) -> int:
    library = Path(cfg.library)
    if args.prompt_cmd == "build":
        codebook = load_codebook(args.codebook)
        template = build_from_codebook(codebook, args.name)
        payload = {"name": template.name, "hash": template.version_hash, "fields": sorted(template.declared_fields)}
        if not args.no_save:
            payload["path"] = str(save_template(library, template))
        if args.show:
            payload["body"] = template.body
        text = f"{template.name} {template.version_hash}"
        if args.show:
            text += "\n\n" + template.body
        _emit(args, payload, text)
    elif args.prompt_cmd == "save":
        with open(args.file, encoding="utf-8", newline="") as fh:
            template = PromptTemplate(args.name or slugify(Path(args.file).stem), fh.read())
        path = save_template(library, template)
        _emit(args, {"name": template.name, "hash": template.version_hash, "path": str(path)},
              f"{template.name} {template.version_hash}")
    elif args.prompt_cmd == "list":
        entries = list_templates(library, args.name)
        _emit(args, [asdict(e) for e in entries],
              "\n".join(f"{e.saved_at}  {e.name}  {e.hash}" for e in entries) or "(library is empty)")
    elif args.prompt_cmd == "show":
        template = resolve_template(args.ref, library)
        _emit(args, {"name": template.name, "hash": template.version_hash, "body": template.body}, template.body)
    elif args.prompt_cmd == "render":
        template = resolve_template(args.ref, library)
        table = load_table(args.table)
        if not 0 <= args.row < len(table):
            raise CliError(f"--row {args.row} outside table of {len(table)} rows")
        prompt = render(template, table.rows[args.row])
        _emit(args, {"row": args.row, "prompt": prompt, "prompt_hash": content_hash(prompt)}, prompt)
    return EXIT_OK


def _raise_keyboard_interrupt(signum, frame):
    raise KeyboardInterrupt


def cmd_run(args: argparse.Namespace, cfg: CliConfig) -> int:
    progress = None if args.no_progress else stderr_progress
    previous = signal.signal(signal.SIGTERM, _raise_keyboard_interrupt)
    try:
        if args.resume:
            dirs = [Path(args.table).resolve().parent] if args.table else []
            checkpoint = find_checkpoint(args.resume, dirs + [Path.cwd()])
            result = resume(checkpoint, progress=progress)
            column = json.loads(Path(checkpoint).read_text(encoding="utf-8"))["job"]["output_column"]
        else:
            if not args.table or not args.prompt or not args.out:
                raise CliError("run needs TABLE, --prompt and --out (or --resume SESSION)")
            table_path = Path(args.table)
            if not table_path.is_file():
                raise FileNotFoundError(f"table not found: {table_path}")
            row_range = _parse_range(args.range)
            if row_range is not None and row_range[1] == -1:
                row_range = (row_range[0], len(load_table(table_path)))
            job = Job(
                table_path=table_path,
                template=resolve_template(args.prompt, cfg.library),
                config=_model_config(cfg, args),
                output_column=args.out,
                row_range=row_range,
                parallelism=cfg.parallelism,
                ledger_path=_ledger_for(cfg, table_path),
                rate=cfg.rate,
            )
            result = run_job(job, progress=progress)
            column = args.out
    finally:
        signal.signal(signal.SIGTERM, previous)
    payload = {
        "run_id": result.run_id,
        "session_id": result.session_id,
        "output_column": column,
        "counts": result.counts,
        "wall_time_ms": result.wall_time_ms,
        "checkpoint": result.checkpoint_path,
    }
    c = result.counts
    _emit(args, payload,
          f"session {result.session_id}: ok={c['ok']} error={c['error']} skipped={c['skipped']} "
          f"-> {column} ({result.wall_time_ms} ms)")
    return EXIT_PARTIAL if c["error"] else EXIT_OK


def _schema_from_args(args: argparse.Namespace) -> OutputSchema:
    if args.codebook:
        return load_codebook(args.codebook).output_schema
    if args.schema:
        with open(args.schema, encoding="utf-8") as fh:
            return OutputSchema.from_dict(json.load(fh))
    labels = tuple(v for v in args.labels.split(",")) if args.labels else None
    try:
        return OutputSchema(
            score=tuple(args.score_range) if args.score_range else None,
            labels=labels,
            count=args.count,
            quotes=args.quotes,
            rationale=args.rationale,
        )
    except ValueError as exc:
        raise CliError(f"{exc}; pass --codebook, --schema or field flags") from None


def _ledger_module_record(module, table, column, row_range, per_row, params) -> RunRecord:
    return RunRecord(
        run_id=str(uuid.uuid4()),
        timestamp=utc_now(),
        module=module,
        model_config=None,
        template_hash=content_hash(""),
        template_body="",
        source=str(Path(table.source_path).resolve()),
        row_range=row_range,
        output_column=column,
        per_row=per_row,
        params=params,
    )


def cmd_extract(args: argparse.Namespace, cfg: CliConfig) -> int:
    table = load_table(args.table)
    schema = _schema_from_args(args)
    table.column(args.col)
    columns, parsed = extract_column(table, args.col, schema, check_quotes=args.verify_quotes)
    for name, values in columns.items():
        table = set_cells(table, name, values, persist=False)
    save_table(table)
    modes = {m: sum(1 for p in parsed if p.parse_mode == m) for m in ("json", "fallback_regex", "failed")}
    per_row = [
        PerRowEntry(i, "", content_hash(table.rows[i].values[args.col]), "ok" if m != "failed" else "error")
        for i, m in sorted(columns[derived_column(args.col, "parse_mode")].items())
    ]
    append_run_record(
        _ledger_for(cfg, Path(args.table)),
        _ledger_module_record("extract", table, args.col, (0, len(table)), per_row,
                              {"schema": schema.to_dict(), "parse_modes": modes, "derived": list(columns)}),
    )
    payload = {"column": args.col, "derived_columns": list(columns), "parse_modes": modes}
    _emit(args, payload,
          f"{args.col}: json={modes['json']} fallback={modes['fallback_regex']} failed={modes['failed']}\n"
          + "wrote " + ", ".join(columns))
    return EXIT_OK


def cmd_tabulate(args: argparse.Namespace, cfg: CliConfig) -> int:
    table = load_table(args.table)
    policy = TabulationPolicy(threshold=args.threshold)
    a_col, b_col = table.column(args.col_a), table.column(args.col_b)

    def num(text: str) -> float | None:
        text = text.strip()
        if not text:
            return None
        try:
            return float(text)
        except ValueError:
            raise CliError(f"non-numeric score {text!r} in tabulation input") from None

    values, flags = {}, {}
    for i, (a, b) in enumerate(zip(a_col, b_col)):
        t = tabulate_passes(num(a), num(b), policy)
        values[i] = format_number(t.value)
        flags[i] = t.flag
    flag_col = derived_column(args.out, "flag")
    table = set_cells(table, args.out, values, persist=False)
    table = set_cells(table, flag_col, flags)
    tally = {f: sum(1 for v in flags.values() if v == f) for f in ("ok", "adjudicate", "missing")}
    append_run_record(
        _ledger_for(cfg, Path(args.table)),
        _ledger_module_record("tabulate", table, args.out, (0, len(table)), [],
                              {"policy": policy.to_dict(), "inputs": [args.col_a, args.col_b], "flags": tally}),
    )
    _emit(args, {"output_column": args.out, "flag_column": flag_col, "flags": tally, "policy": policy.to_dict()},
          f"{args.out}: ok={tally['ok']} adjudicate={tally['adjudicate']} missing={tally['missing']}")
    return EXIT_OK


def cmd_irr(args: argparse.Namespace, cfg: CliConfig) -> int:
    table = load_table(args.table)
    report = compare_columns(table, args.col_a, args.col_b, args.kind)
    _emit(args, report.to_dict(), report.format_text())
    return EXIT_OK


def cmd_history(args: argparse.Namespace, cfg: CliConfig) -> int:
    ledger = Path(cfg.ledger) if cfg.ledger else Path.cwd() / LEDGER_NAME
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LedgerWarning)
        records = query_history(ledger, model=args.model, column=args.column, since=args.since)
    problems = [str(w.message) for w in caught if issubclass(w.category, LedgerWarning)]
    for p in problems:
        print(f"warning: {p}", file=sys.stderr)

    mismatches = []
    if args.verify:
        for rec in records:
            if rec.module not in ("run", "resume"):
                continue
            for row, recorded, recomputed in replay_prompt_hashes(rec):
                if recorded != recomputed:
                    mismatches.append({"run_id": rec.run_id, "row": row})

    if args.json:
        payload: dict[str, Any] = {"records": [r.to_dict() for r in records], "warnings": problems}
        if args.verify:
            payload["prompt_hash_mismatches"] = mismatches
        print(json.dumps(payload, indent=2, ensure_ascii=False))
    else:
        for r in records:
            model = f"{r.model_config['kind']}:{r.model_config['model_id']}" if r.model_config else "-"
            c = r.counts
            print(
                f"{r.timestamp}  {r.run_id[:8]}  {r.module:<8} {model:<24} {r.output_column}  "
                f"rows {r.row_range[0]}-{r.row_range[1]}  ok={c['ok']} error={c['error']} "
                f"skipped={c['skipped']}  {r.outcome}"
                + (f"  session={r.session_id}" if r.session_id else "")
            )
        if args.verify:
            print(f"prompt hash replay: {len(mismatches)} mismatch(es)")
    return EXIT_PARTIAL if mismatches else EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with defaults (flags win)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--print-config", action="store_true", help="show the effective configuration and exit")
    common.add_argument("--ledger", help="run ledger path (default: ledger.jsonl next to the table)")
    common.add_argument("--library", help="prompt library directory (default: ./prompts)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="atomcode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="split text files into a segment table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--mode", choices=MODE_NAMES, default="paragraph")
    p.add_argument("--delimiter")
    p.add_argument("--sentences", type=int)
    p.add_argument("--context", action="append", metavar="NAME=VALUE", help="constant context column")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("prompt", parents=[common], help="build, save, list, show or render templates")
    psub = p.add_subparsers(dest="prompt_cmd", required=True)
    b = psub.add_parser("build", parents=[common])
    b.add_argument("codebook")
    b.add_argument("--name")
    b.add_argument("--no-save", action="store_true")
    b.add_argument("--show", action="store_true", help="also print the template body")
    s = psub.add_parser("save", parents=[common])
    s.add_argument("file")
    s.add_argument("--name")
    ls = psub.add_parser("list", parents=[common])
    ls.add_argument("name", nargs="?")
    sh = psub.add_parser("show", parents=[common])
    sh.add_argument("ref", help="name, name@hash, or a .txt path")
    r = psub.add_parser("render", parents=[common])
    r.add_argument("ref")
    r.add_argument("table")
    r.add_argument("--row", type=int, default=0)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("run", parents=[common], help="apply a template to every row of a table")
    p.add_argument("table", nargs="?")
    p.add_argument("--prompt", help="template: name, name@hash, or a .txt path")
    p.add_argument("--model", help="<kind>:<model_id>, kind in openai_compat|anthropic|ollama_local|mock")
    p.add_argument("--out", help="output column, out:<label>:<pass>")
    p.add_argument("--range", help="row range start:end (end exclusive)")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--api-key-env", dest="api_key_env", help="name of the env var holding the API key")
    p.add_argument("--timeout", dest="request_timeout_s", type=int)
    p.add_argument("--rate", type=float, help="max requests per second (0 disables the limiter)")
    p.add_argument("--mock-fixtures", help="JSON prompt-hash -> response map for the mock provider")
    p.add_argument("--resume", metavar="SESSION", help="session id or checkpoint path to resume")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("extract", parents=[common], help="parse an output column into derived columns")
    p.add_argument("table")
    p.add_argument("--col", required=True)
    p.add_argument("--codebook")
    p.add_argument("--schema", help="JSON output schema file")
    p.add_argument("--score-range", nargs=2, type=float, metavar=("MIN", "MAX"))
    p.add_argument("--labels", help="comma-separated allowed labels")
    p.add_argument("--count", action="store_true")
    p.add_argument("--quotes", action="store_true")
    p.add_argument("--rationale", action="store_true")
    p.add_argument("--verify-quotes", action="store_true", help="check quotes against the data cell")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("tabulate", parents=[common], help="combine two score passes")
    p.add_argument("table")
    p.add_argument("--col-a", required=True)
    p.add_argument("--col-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=1.0)
    p.set_defaults(func=cmd_tabulate)

    p = sub.add_parser("irr", parents=[common], help="agreement between two columns")
    p.add_argument("table")
    p.add_argument("--col-a", required=True)
    p.add_argument("--col-b", required=True)
    p.add_argument("--kind", choices=("categorical", "count"), default="categorical")
    p.set_defaults(func=cmd_irr)

    p = sub.add_parser("history", parents=[common], help="list ledgered runs, newest first")
    p.add_argument("--model")
    p.add_argument("--column")
    p.add_argument("--since", help="ISO-8601 timestamp")
    p.add_argument("--verify", action="store_true", help="replay prompt hashes from the ledger")
    p.set_defaults(func=cmd_history)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = CliConfig.load(args.config).merged(args)
        if args.print_config:
            print(json.dumps(cfg.describe(), indent=2))
            return EXIT_OK
        return args.func(args, cfg)
    except JobInterrupted as exc:
        print(f"atomcode: {exc} (checkpoint {exc.checkpoint_path})", file=sys.stderr)
        return EXIT_INTERRUPTED
    except AuthError as exc:
        print(f"atomcode: authentication failed: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except ProviderError as exc:
        print(f"atomcode: provider error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (AtomcodeError, FileNotFoundError, ValueError, TypeError, IndexError) as exc:
        print(f"atomcode: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("atomcode: interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())

"""Run the same template twice over a table and report within-model agreement.

Uses the offline mock provider by default, so the result is reproducible:

    python scripts/dual_pass_consistency.py tests/fixtures/interviews_23.csv \
        --codebook tests/fixtures/codebook_consent.json --workdir /tmp/dual
"""

import argparse
import json
import logging
import shutil
from pathlib import Path

from atomcode.engine import Job, run_job
from atomcode.extract import extract_column
from atomcode.irr import compare_columns
from atomcode.promptlib import build_from_codebook, load_codebook
from atomcode.provider import parse_model_spec
from atomcode.store import load_table, set_cells

logger = logging.getLogger("dual_pass")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("table")
    parser.add_argument("--codebook", required=True)
    parser.add_argument("--model", default="mock:dual-pass")
    parser.add_argument("--label", default="code")
    parser.add_argument("--workdir", default="dual_pass_run")
    parser.add_argument("--parallelism", type=int, default=4)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    table_path = work / Path(args.table).name
    shutil.copyfile(args.table, table_path)

    codebook = load_codebook(args.codebook)
    template = build_from_codebook(codebook)
    config = parse_model_spec(args.model)
    logger.info("template %s %s", template.name, template.version_hash[:12])

    columns = []
    for tag in ("pass1", "pass2"):
        column = f"out:{args.label}:{tag}"
        result = run_job(Job(table_path, template, config, column, parallelism=args.parallelism), progress=None)
        logger.info("%s: %s in %d ms", column, result.counts, result.wall_time_ms)
        columns.append(column)

    table = load_table(table_path)
    raw_identical = table.column(columns[0]) == table.column(columns[1])

    # compare the primary parsed field of each pass
    field = codebook.output_schema.primary[0]
    derived = []
    for column in columns:
        parsed_cols, _ = extract_column(table, column, codebook.output_schema)
        for name, values in parsed_cols.items():
            table = set_cells(table, name, values, persist=False)
        derived.append(column.replace(f":{args.label}:", f":{args.label}.{field}:"))
    kind = "count" if field == "count" else "categorical"
    report = compare_columns(table, derived[0], derived[1], kind)
    print(report.format_text())
    print(json.dumps({"raw_outputs_identical": raw_identical, "kappa": report.kappa,
                      "percent_agreement": report.percent_agreement, "n": report.n}))


if __name__ == "__main__":
    main()

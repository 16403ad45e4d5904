"""Count-agreement statistics between two integer columns of a table.

    python scripts/count_agreement.py tests/fixtures/count_pairs_23.csv \
        out:consent.count:pass1 out:consent.count:pass2

Prints exact agreement, mean signed and absolute difference, the largest
difference, and the list of disagreeing rows.
"""

import argparse
import json

from atomcode.irr import compare_columns
from atomcode.store import load_table


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("table")
    parser.add_argument("col_a")
    parser.add_argument("col_b")
    parser.add_argument("--json", action="store_true")
    args = parser.parse_args()

    table = load_table(args.table)
    report = compare_columns(table, args.col_a, args.col_b, kind="count")
    disagreements = [
        {"row": row.index, "doc_id": row.doc_id, "a": row.values[args.col_a], "b": row.values[args.col_b]}
        for row in table.rows
        if row.values[args.col_a].strip() and row.values[args.col_b].strip()
        and int(row.values[args.col_a]) != int(row.values[args.col_b])
    ]
    if args.json:
        payload = report.to_dict()
        payload["disagreements"] = disagreements
        print(json.dumps(payload, indent=2))
        return
    print(report.format_text())
    print(f"disagreeing rows: {len(disagreements)}")
    for d in disagreements:
        print(f"  row {d['row']:>3} {d['doc_id']}: {d['a']} vs {d['b']}")


if __name__ == "__main__":
    main()

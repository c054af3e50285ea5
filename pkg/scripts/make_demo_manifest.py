"""Build a demo CSV manifest with randomly masked annotations.

The output feeds ``seke generate``: every row carries a subject id and a
source dataset tag, and each annotation level (expression, valence-arousal,
action units) is independently dropped with the chosen probability so the
completion loop has something to do.

Usage:
    python3 scripts/make_demo_manifest.py --out demo/manifest.csv --rows 60
"""

import argparse
import csv
import os

import numpy as np

from seke.affect import AuVocabulary, ExpressionLabel


def build_rows(n: int, mask_rate: float, subjects: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    vocab = AuVocabulary.default()
    labels = list(ExpressionLabel)
    columns_seen = []
    for i in range(n):
        row = {
            "record_id": f"demo-{i:04d}",
            "image_ref": f"images/demo-{i:04d}.jpg",
            "subject_id": f"subj-{int(rng.integers(subjects)):03d}",
            "source_dataset": "demo",
            "expression": "",
            "valence": "",
            "arousal": "",
        }
        for a in vocab:
            row[f"au_{a}"] = ""
        keep_expr = rng.random() >= mask_rate
        keep_va = rng.random() >= mask_rate
        keep_aus = rng.random() >= mask_rate
        if keep_expr:
            row["expression"] = labels[int(rng.integers(len(labels)))].value
        if keep_va:
            row["valence"] = f"{float(rng.uniform(-1, 1)):.3f}"
            row["arousal"] = f"{float(rng.uniform(-1, 1)):.3f}"
        if keep_aus:
            for a in vocab:
                row[f"au_{a}"] = "1" if rng.random() < 0.3 else "0"
        columns_seen.append(row)
    return columns_seen


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output CSV path")
    parser.add_argument("--rows", type=int, default=60)
    parser.add_argument("--mask-rate", type=float, default=0.5,
                        help="probability that each annotation level is missing")
    parser.add_argument("--subjects", type=int, default=12)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    if not 0.0 <= args.mask_rate <= 1.0:
        parser.error("--mask-rate must lie in [0, 1]")
    if args.rows < 1 or args.subjects < 1:
        parser.error("--rows and --subjects must be positive")

    rows = build_rows(args.rows, args.mask_rate, args.subjects, args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    masked = sum(1 for r in rows if not (r["expression"] and r["valence"] and r["au_6"]))
    print(f"wrote {len(rows)} rows to {args.out} ({masked} with missing levels)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Attention-map export: one CSV per record plus an 8-bit PGM heatmap per head."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import AttentionRecord

CSV_HEADER = ("head", "query", "key", "weight")


def record_stem(rec: AttentionRecord) -> str:
    branch = rec.branch.replace("->", "2")
    return f"stage{rec.stage}_block{rec.block}_{branch}"


def record_rows(rec: AttentionRecord):
    """Yield ``(head, query, key, weight)`` for every in-window pair.

    Query and key indices are global over the record's windows: window ``w``
    owns queries ``w*Nq .. (w+1)*Nq - 1`` and keys ``w*Nk .. (w+1)*Nk - 1``.
    """
    nw, heads, nq, nk = rec.weights.shape
    for h in range(heads):
        for w in range(nw):
            for q in range(nq):
                row = rec.weights[w, h, q]
                for k in range(nk):
                    yield h, w * nq + q, w * nk + k, float(row[k])


def heatmap(matrix: np.ndarray) -> np.ndarray:
    """Scale a nonnegative matrix to ``uint8`` with its maximum at 255."""
    top = float(matrix.max()) if matrix.size else 0.0
    scaled = matrix / top if top > 0 else np.zeros_like(matrix)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def export_records(records: list[AttentionRecord], out_dir) -> list[Path]:
    """Write each record as ``<stem>.csv`` and ``<stem>_head<h>.pgm``; returns the CSV paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        stem = record_stem(rec)
        path = out / f"{stem}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for h, q, k, v in record_rows(rec):
                w.writerow([h, q, k, repr(v)])
        dense = rec.dense()
        for h in range(dense.shape[0]):
            Image.fromarray(heatmap(dense[h]), mode="L").save(out / f"{stem}_head{h}.pgm")
        written.append(path)
    return written


def read_record_csv(path) -> dict[tuple[int, int], float]:
    """Row sums ``(head, query) -> sum of weights`` re-read from an exported CSV."""
    sums: dict[tuple[int, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for h, q, _, v in reader:
            key = (int(h), int(q))
            sums[key] = sums.get(key, 0.0) + float(v)
    return sums


def entropy_profile(records: list[AttentionRecord]) -> dict[str, float]:
    """Variance over query rows of the normalised attention entropy, per record.

    A descriptive statistic only: low-variance maps attend uniformly
    everywhere, high-variance maps mix focused and diffuse rows.
    """
    out = {}
    for rec in records:
        p = rec.weights
        nk = p.shape[-1]
        ent = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)
        norm = ent / np.log(nk) if nk > 1 else np.zeros_like(ent)
        out[record_stem(rec)] = float(norm.var())
    return out

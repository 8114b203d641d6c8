"""Per-step metrics: JSONL stream, CSV summary and an SVG loss curve."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path


@dataclass
class MetricsRecord:
    step: int
    lr: float
    mcm: float
    pic: float
    umc: float
    total: float
    top1: float
    wall: float


FIELDS = [f for f in MetricsRecord.__dataclass_fields__]


class MetricsWriter:
    """Appends one JSON object per line, flushed every record so the file is readable mid-run."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[MetricsRecord] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"metrics step {record.step} is not after {self.records[-1].step}")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def read_jsonl(path) -> list[MetricsRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(MetricsRecord(**json.loads(line)))
    return out


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def loss_curve_svg(records, path, width: int = 480, height: int = 240, key: str = "total") -> None:
    """Minimal polyline plot of one metric against step."""
    pts = [(r.step, getattr(r, key)) for r in records if math.isfinite(getattr(r, key))]
    pad = 30
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if pts:
        xs, ys = zip(*pts)
        x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
        y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
        sx = lambda x: pad + (x - x0) / (x1 - x0) * (width - 2 * pad)
        sy = lambda y: height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        lines += [
            f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{poly}"/>',
            f'<text x="{pad}" y="{pad - 10}" font-size="12">{key} loss: {ys[0]:.3f} to {ys[-1]:.3f}</text>',
            f'<text x="{width - pad}" y="{height - 8}" font-size="10" text-anchor="end">step {x1}</text>',
        ]
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = ["MetricsRecord", "MetricsWriter", "read_jsonl", "write_csv", "loss_curve_svg"]

"""Box post-processing: IoU, greedy NMS, soft-NMS and weighted box fusion.

Conventions shared by every routine:

* corners are continuous coordinates; area is ``(x2 - x1) * (y2 - y1)`` with
  no +1 pixel term;
* suppression requires IoU strictly greater than the threshold;
* equal scores are ordered by lower input index;
* classes are processed independently.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from deskdp import kernels
from deskdp.errors import ParameterError

SOFT_SIGMA = 0.5
SOFT_NT = 0.3
SOFT_FLOOR = 0.001

COLUMNS = ("x1", "y1", "x2", "y2", "score", "class")


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    cls: int = 0

    def __post_init__(self):
        if not (self.x2 >= self.x1 and self.y2 >= self.y1):
            raise ParameterError(f"box corners out of order: {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"score {self.score} outside [0, 1]")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


class BoxSet(list):
    """A list of :class:`Box` with array views and per-class partitioning."""

    def coords(self) -> np.ndarray:
        return np.array([b.coords for b in self], dtype=np.float64).reshape(-1, 4)

    def scores(self) -> np.ndarray:
        return np.array([b.score for b in self], dtype=np.float64)

    def by_class(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, b in enumerate(self):
            groups.setdefault(b.cls, []).append(i)
        return groups


def iou(a: Box, b: Box) -> float:
    return float(kernels._iou_pair(np.array(a.coords), np.array(b.coords)))


def _check_thresh(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ParameterError(f"{name} must lie in [0, 1], got {v}")


def _score_order(scores: np.ndarray, idx: list[int]) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return idx[np.argsort(-scores[idx], kind="stable")]


def nms_greedy(boxes: BoxSet, iou_thresh: float = 0.5) -> list[int]:
    """Indices of kept boxes, in descending score order across all classes."""
    _check_thresh("iou_thresh", iou_thresh)
    boxes = BoxSet(boxes)
    if not boxes:
        return []
    coords, scores = boxes.coords(), boxes.scores()
    kept: list[int] = []
    for idx in boxes.by_class().values():
        order = _score_order(scores, idx)
        keep = kernels.greedy_nms(np.ascontiguousarray(coords[order]), float(iou_thresh))
        kept.extend(int(i) for i in order[keep])
    return [int(i) for i in _score_order(scores, sorted(kept))] if kept else []


def nms_soft(boxes: BoxSet, method: str = "linear", iou_thresh: float = SOFT_NT, sigma: float = SOFT_SIGMA,
             score_floor: float = SOFT_FLOOR) -> BoxSet:
    """Rescored boxes that survive the floor, in selection order.

    linear: ``s *= 1 - IoU`` when IoU > Nt; gaussian: ``s *= exp(-IoU^2 / sigma)``.
    """
    if method not in ("linear", "gaussian"):
        raise ParameterError(f"soft-NMS method must be linear or gaussian, got {method!r}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    _check_thresh("iou_thresh", iou_thresh)
    boxes = BoxSet(boxes)
    if not boxes:
        return BoxSet()
    coords, scores = boxes.coords(), boxes.scores()
    code = kernels.SOFT_LINEAR if method == "linear" else kernels.SOFT_GAUSSIAN
    picked: list[tuple[int, float]] = []
    for idx in boxes.by_class().values():
        idx = np.asarray(idx, dtype=np.int64)
        order, s = kernels.soft_nms(np.ascontiguousarray(coords[idx]), scores[idx].copy(), code,
                                    float(iou_thresh), float(sigma), float(score_floor))
        for local in order:
            if s[local] >= score_floor:
                picked.append((int(idx[local]), float(s[local])))
    picked.sort(key=lambda p: (-p[1], p[0]))
    out = BoxSet()
    for i, s in picked:
        b = boxes[i]
        out.append(Box(b.x1, b.y1, b.x2, b.y2, s, b.cls))
    return out


def nms_weighted(boxes: BoxSet, iou_thresh: float = 0.5) -> BoxSet:
    """Greedy clusters around the current top box (members with IoU > thresh);
    each cluster becomes one score-weighted average box carrying the cluster max score."""
    _check_thresh("iou_thresh", iou_thresh)
    boxes = BoxSet(boxes)
    coords, scores = boxes.coords(), boxes.scores()
    fused: list[tuple[float, int, Box]] = []
    for cls, idx in boxes.by_class().items():
        remaining = list(_score_order(scores, idx))
        while remaining:
            top = remaining[0]
            rest = np.asarray(remaining[1:], dtype=np.int64)
            ov = kernels.iou_one_to_many(coords[top], coords[rest]) if len(rest) else np.zeros(0)
            members = [top] + [int(j) for j in rest[ov > iou_thresh]]
            remaining = [int(j) for j in rest[~(ov > iou_thresh)]]
            w = scores[members]
            total = w.sum()
            # offsets from the top box keep singletons and identical boxes exact
            delta = coords[members] - coords[top]
            if total > 0:
                xy = coords[top] + (delta * w[:, None]).sum(axis=0) / total
            else:
                xy = coords[top] + delta.mean(axis=0)
            fused.append((scores[top], top, Box(*map(float, xy), float(scores[top]), cls)))
    fused.sort(key=lambda f: (-f[0], f[1]))
    return BoxSet(b for _, _, b in fused)


# ---------------------------------------------------------------- file I/O


def _box_from_row(row, where: str) -> Box:
    try:
        x1, y1, x2, y2, score = (float(row[k]) for k in COLUMNS[:5])
        cls = int(row["class"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParameterError(f"{where}: bad box record {row!r} ({exc})") from None
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2, score)):
        raise ParameterError(f"{where}: non-finite value in {row!r}")
    return Box(x1, y1, x2, y2, score, cls)


def _is_jsonl(path: Path) -> bool:
    return path.suffix.lower() in (".jsonl", ".json", ".ndjson")


def read_boxes(path) -> BoxSet:
    """CSV with header ``x1,y1,x2,y2,score,class`` or JSON lines with the same keys."""
    path = Path(path)
    out = BoxSet()
    with path.open(newline="") as fh:
        if _is_jsonl(path):
            for n, line in enumerate(fh, 1):
                if line.strip():
                    out.append(_box_from_row(json.loads(line), f"{path}:{n}"))
        else:
            for n, row in enumerate(csv.DictReader(fh), 2):
                out.append(_box_from_row(row, f"{path}:{n}"))
    return out


def dump_boxes(boxes, fh, jsonl: bool = False) -> None:
    rows = [dict(zip(COLUMNS, (b.x1, b.y1, b.x2, b.y2, b.score, b.cls))) for b in boxes]
    if jsonl:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
        return
    w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def write_boxes(boxes, path) -> None:
    """Write in the format implied by the extension (JSON lines or CSV)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        dump_boxes(boxes, fh, _is_jsonl(path))

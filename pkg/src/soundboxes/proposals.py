"""Class-agnostic box proposals from edge density.

A lightweight EdgeBoxes-style surrogate: boxes are enumerated on a
geometric sliding-window grid and scored by the edge mass they enclose,
penalised by edge mass crossing their border.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int
    objectness: float = 0.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidInputError(f"degenerate box {self.as_tuple()}")
        if self.x0 < 0 or self.y0 < 0:
            raise InvalidInputError(f"box {self.as_tuple()} has negative coordinates")
        if not self.objectness >= 0:
            raise InvalidInputError("objectness must be nonnegative")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def fits(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def intersection(self, other: "BoundingBox") -> int:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(w, 0) * max(h, 0)

    def iou(self, other: "BoundingBox") -> float:
        inter = self.intersection(other)
        return inter / (self.area + other.area - inter)

    def shifted(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy, self.objectness)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1,
                "objectness": float(self.objectness)}


@dataclass
class ProposalSet:
    boxes: list
    source_image_id: str = ""

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def __getitem__(self, i):
        return self.boxes[i]

    def as_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.int64).reshape(-1, 4)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"image_id": self.source_image_id, **b.to_dict()}) + "\n"
                       for b in self.boxes)

    @classmethod
    def from_jsonl(cls, text: str) -> list["ProposalSet"]:
        sets: dict[str, list] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            box = BoundingBox(rec["x0"], rec["y0"], rec["x1"], rec["y1"], rec["objectness"])
            sets.setdefault(rec["image_id"], []).append(box)
        return [cls(boxes, image_id) for image_id, boxes in sets.items()]


@dataclass(frozen=True)
class ProposalConfig:
    min_size: int = 16
    scale_step: float = 1.5
    aspects: tuple = (0.5, 1.0, 2.0)  # width / height
    stride_fraction: float = 1.0 / 8
    band: int = 2
    boundary_weight: float = 1.0
    perimeter_exponent: float = 1.5
    nms_iou: float = 0.7
    fallback_grid: int = 4


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise InvalidInputError(f"image {img.shape[:2]} is smaller than 16x16")
    return img


def compute_edge_map(image) -> np.ndarray:
    """Gradient magnitude of the grayscale image using central differences."""
    img = _as_image(image)
    gray = img @ np.array([0.299, 0.587, 0.114])
    p = np.pad(gray, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return np.hypot(gx, gy)


def _integral(edge_map: np.ndarray) -> np.ndarray:
    ii = np.zeros((edge_map.shape[0] + 1, edge_map.shape[1] + 1))
    ii[1:, 1:] = edge_map.cumsum(0).cumsum(1)
    return ii


def _box_sums(ii, x0, y0, x1, y1):
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def _score_boxes(ii: np.ndarray, boxes: np.ndarray, cfg: ProposalConfig) -> np.ndarray:
    x0, y0, x1, y1 = boxes.T
    total = _box_sums(ii, x0, y0, x1, y1)
    ix0, iy0 = x0 + cfg.band, y0 + cfg.band
    ix1, iy1 = x1 - cfg.band, y1 - cfg.band
    has_inner = (ix1 > ix0) & (iy1 > iy0)
    inner = np.where(
        has_inner,
        _box_sums(ii, np.where(has_inner, ix0, 0), np.where(has_inner, iy0, 0),
                  np.where(has_inner, ix1, 0), np.where(has_inner, iy1, 0)),
        0.0,
    )
    boundary = total - inner
    perimeter = 2.0 * ((x1 - x0) + (y1 - y0))
    raw = (inner - cfg.boundary_weight * boundary) / perimeter ** cfg.perimeter_exponent
    # float noise from the integral image must not leak into edge-free regions
    raw = np.where(np.abs(raw) < 1e-12, 0.0, raw)
    return np.maximum(raw, 0.0)


def score_box(edge_map, box: BoundingBox, cfg: ProposalConfig | None = None) -> float:
    cfg = cfg or ProposalConfig()
    edge_map = np.asarray(edge_map, dtype=np.float64)
    h, w = edge_map.shape
    if not box.fits(w, h):
        raise InvalidInputError(f"box {box.as_tuple()} exceeds image {w}x{h}")
    arr = np.array([box.as_tuple()])
    return float(_score_boxes(_integral(edge_map), arr, cfg)[0])


def candidate_windows(width: int, height: int, cfg: ProposalConfig | None = None) -> np.ndarray:
    """Sliding windows over a geometric scale grid and a fixed aspect set, as (K, 4) int array."""
    cfg = cfg or ProposalConfig()
    out = []
    seen = set()
    size = float(cfg.min_size)
    while size <= max(width, height) * math.sqrt(2):
        for aspect in cfg.aspects:
            w = int(round(size * math.sqrt(aspect)))
            h = int(round(size / math.sqrt(aspect)))
            if w > width or h > height or w < 2 or h < 2 or (w, h) in seen:
                continue
            seen.add((w, h))
            sx = max(1, int(round(w * cfg.stride_fraction)))
            sy = max(1, int(round(h * cfg.stride_fraction)))
            xs = list(range(0, width - w + 1, sx))
            ys = list(range(0, height - h + 1, sy))
            if xs[-1] != width - w:
                xs.append(width - w)
            if ys[-1] != height - h:
                ys.append(height - h)
            gx, gy = np.meshgrid(xs, ys, indexing="xy")
            gx, gy = gx.ravel(), gy.ravel()
            out.append(np.stack([gx, gy, gx + w, gy + h], axis=1))
        size *= cfg.scale_step
    if not out:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def _iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def _fallback_boxes(width: int, height: int, grid: int) -> list:
    """Boxes centred on a grid x grid lattice, nearest-to-centre first, several sizes."""
    centres = [((i + 0.5) * width / grid, (j + 0.5) * height / grid)
               for j in range(grid) for i in range(grid)]
    centres.sort(key=lambda c: ((c[0] - width / 2) ** 2 + (c[1] - height / 2) ** 2, c[1], c[0]))
    fractions = [1.0 / grid * k for k in (1, 2, 3, 4)] + [1.0 / grid * k for k in (1.5, 2.5, 3.5, 0.5)]
    boxes = []
    for frac in fractions:
        bw = max(2, int(round(width * frac)))
        bh = max(2, int(round(height * frac)))
        for cx, cy in centres:
            x0 = int(round(cx - bw / 2))
            y0 = int(round(cy - bh / 2))
            x0 = min(max(x0, 0), width - bw)
            y0 = min(max(y0, 0), height - bh)
            boxes.append((x0, y0, x0 + bw, y0 + bh))
    return boxes


def propose_boxes(image, count: int, cfg: ProposalConfig | None = None,
                  image_id: str = "") -> ProposalSet:
    """Return exactly ``count`` proposals sorted by descending objectness."""
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    cfg = cfg or ProposalConfig()
    img = _as_image(image)
    height, width = img.shape[:2]
    edges = compute_edge_map(img)
    cands = candidate_windows(width, height, cfg)
    scores = _score_boxes(_integral(edges), cands, cfg)

    keep = scores > 0
    cands, scores = cands[keep], scores[keep]
    # stable sort keeps enumeration order among equal scores
    order = np.argsort(-scores, kind="stable")
    cands, scores = cands[order], scores[order]

    chosen: list[np.ndarray] = []
    chosen_scores: list[float] = []
    alive = np.ones(len(cands), dtype=bool)
    idx = 0
    while len(chosen) < count:
        nxt = np.flatnonzero(alive[idx:])
        if len(nxt) == 0:
            break
        idx += int(nxt[0])
        box = cands[idx]
        chosen.append(box)
        chosen_scores.append(float(scores[idx]))
        alive[idx] = False
        rest = slice(idx + 1, None)
        alive[rest] &= _iou_one_to_many(box, cands[rest]) <= cfg.nms_iou
        idx += 1

    boxes = [BoundingBox(int(b[0]), int(b[1]), int(b[2]), int(b[3]), s)
             for b, s in zip(chosen, chosen_scores)]
    if len(boxes) < count:
        boxes.extend(_pad_with_fallback(boxes, width, height, count, cfg))
    return ProposalSet(boxes, image_id)


def _pad_with_fallback(existing: list, width: int, height: int, count: int,
                       cfg: ProposalConfig) -> list:
    taken = np.array([b.as_tuple() for b in existing], dtype=np.int64).reshape(-1, 4)
    pool = _fallback_boxes(width, height, cfg.fallback_grid)
    added = []
    for strict in (True, False):
        for b in pool:
            if len(existing) + len(added) >= count:
                return added
            arr = np.array(b)
            if strict and len(taken) and np.any(_iou_one_to_many(arr, taken) > cfg.nms_iou):
                continue
            if not strict and any(b == a.as_tuple() for a in added):
                continue
            added.append(BoundingBox(*b, objectness=0.0))
            taken = np.vstack([taken, arr[None]])
    # more boxes requested than the fallback pool can supply without repeats
    while len(existing) + len(added) < count:
        added.append(BoundingBox(*pool[len(added) % len(pool)], objectness=0.0))
    return added


def crop(image, box: BoundingBox) -> np.ndarray:
    img = np.asarray(image)
    out = img[box.y0:box.y1, box.x0:box.x1]
    if out.size == 0:
        raise InvalidInputError(f"empty crop for box {box.as_tuple()}")
    return out

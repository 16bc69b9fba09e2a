"""Synthetic audio-visual scenes and a loader for real frame + audio folders.

Each sounding category owns a glyph (shape + colour) and a timbre (harmonic
stack with fixed partial weights, fundamental drawn from a category band).
Silent distractors use a disjoint shape set and muted colours.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .audio import AudioClip, read_wav, write_wav
from .errors import DataError, InvalidInputError
from .proposals import BoundingBox

logger = logging.getLogger(__name__)

SOUNDING_SHAPES = ("circle", "square", "triangle", "diamond", "hexagon", "star", "plus")
SILENT_SHAPES = ("bar", "chevron", "pentagon", "trapezoid", "crescent")

SOUNDING_COLORS = (
    (1.00, 0.25, 0.20), (0.20, 0.85, 0.30), (0.30, 0.50, 1.00), (1.00, 0.90, 0.15),
    (0.95, 0.30, 0.95), (0.15, 0.95, 0.95), (1.00, 0.60, 0.10),
)
SILENT_COLORS = ((0.42, 0.42, 0.42), (0.45, 0.40, 0.32), (0.36, 0.42, 0.48), (0.48, 0.44, 0.40))


@dataclass(frozen=True)
class SceneConfig:
    n_categories: int = 7
    image_size: int = 64
    glyph_sizes: tuple = (17, 21)  # inclusive range of glyph side lengths
    n_distractors: tuple = (1, 3)
    sample_rate: int = 11025
    clip_samples: int = 3968
    f0_low: float = 150.0
    f0_high: float = 1200.0
    band_fill: float = 0.6  # fraction of each category's log-band used for fundamentals
    n_partials: int = 6
    background_level: float = 0.15
    texture_amplitude: float = 0.04

    def __post_init__(self):
        if self.n_categories < 2:
            raise InvalidInputError("need at least two categories")
        if self.n_categories > len(SOUNDING_SHAPES):
            raise InvalidInputError(f"at most {len(SOUNDING_SHAPES)} categories are available")


@dataclass
class SceneSample:
    image: np.ndarray
    audio: AudioClip
    gt_box: BoundingBox
    category_id: int
    distractor_boxes: list
    seed: int

    @property
    def sample_id(self) -> str:
        return f"solo-c{self.category_id}-s{self.seed}"


@dataclass
class DuetSample:
    image: np.ndarray
    audio: AudioClip
    gt_boxes: tuple
    references: tuple
    categories: tuple
    seed: int
    distractor_boxes: list = field(default_factory=list)

    @property
    def sample_id(self) -> str:
        return f"duet-c{self.categories[0]}-c{self.categories[1]}-s{self.seed}"


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def category_band(cfg: SceneConfig, category_id: int) -> tuple[float, float]:
    """Fundamental-frequency band of a category: disjoint log-spaced sub-bands."""
    ratio = (cfg.f0_high / cfg.f0_low) ** (1.0 / cfg.n_categories)
    lo = cfg.f0_low * ratio ** category_id
    return lo, lo * ratio ** cfg.band_fill


def partial_weights(cfg: SceneConfig, category_id: int) -> np.ndarray:
    """Fixed per-category harmonic amplitudes (the category's timbre)."""
    rng = _rng(7919, category_id)
    w = rng.uniform(0.2, 1.0, cfg.n_partials) / np.arange(1, cfg.n_partials + 1) ** 0.5
    w[0] = 1.0
    return w


def synthesize_tone(cfg: SceneConfig, category_id: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = category_band(cfg, category_id)
    f0 = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    t = np.arange(cfg.clip_samples) / cfg.sample_rate
    weights = partial_weights(cfg, category_id)
    x = np.zeros_like(t)
    nyquist = cfg.sample_rate / 2
    for h, w in enumerate(weights, start=1):
        if h * f0 >= 0.95 * nyquist:
            break
        x += w * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    # slow amplitude envelope: attack then exponential-ish decay with tremolo
    attack = rng.uniform(0.01, 0.1) * t[-1]
    env = np.minimum(t / attack, 1.0) * np.exp(-t * rng.uniform(0.0, 1.5))
    env *= 1.0 + 0.2 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t)
    x *= env
    peak = rng.uniform(0.3, 0.9)
    return x * (peak / np.max(np.abs(x)))


def _glyph_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask of a glyph drawn in a size x size canvas."""
    im = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(im)
    s = size - 1
    c = s / 2
    if shape == "circle":
        d.ellipse([0, 0, s, s], fill=255)
    elif shape == "square":
        d.rectangle([0, 0, s, s], fill=255)
    elif shape == "triangle":
        d.polygon([(c, 0), (s, s), (0, s)], fill=255)
    elif shape == "diamond":
        d.polygon([(c, 0), (s, c), (c, s), (0, c)], fill=255)
    elif shape == "hexagon":
        pts = [(c + c * math.cos(a), c + c * math.sin(a)) for a in np.linspace(0, 2 * np.pi, 7)[:-1]]
        d.polygon(pts, fill=255)
    elif shape == "star":
        pts = []
        for k in range(10):
            r = c if k % 2 == 0 else c * 0.45
            a = -np.pi / 2 + k * np.pi / 5
            pts.append((c + r * math.cos(a), c + r * math.sin(a)))
        d.polygon(pts, fill=255)
    elif shape == "plus":
        w = s / 3
        d.rectangle([w, 0, 2 * w, s], fill=255)
        d.rectangle([0, w, s, 2 * w], fill=255)
    elif shape == "bar":
        d.rectangle([0, s * 0.3, s, s * 0.7], fill=255)
    elif shape == "chevron":
        d.polygon([(0, 0), (c, c * 0.6), (s, 0), (s, s * 0.4), (c, s), (0, s * 0.4)], fill=255)
    elif shape == "pentagon":
        pts = [(c + c * math.cos(a), c + c * math.sin(a))
               for a in -np.pi / 2 + np.linspace(0, 2 * np.pi, 6)[:-1]]
        d.polygon(pts, fill=255)
    elif shape == "trapezoid":
        d.polygon([(s * 0.25, 0), (s * 0.75, 0), (s, s), (0, s)], fill=255)
    elif shape == "crescent":
        d.ellipse([0, 0, s, s], fill=255)
        d.ellipse([s * 0.35, -s * 0.1, s * 1.2, s * 0.9], fill=0)
    else:
        raise InvalidInputError(f"unknown glyph shape {shape!r}")
    return np.asarray(im) > 127


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    coarse = rng.uniform(-1, 1, (5, 5, 3))
    # bilinear upsample of a coarse grid: smooth texture with weak gradients
    xs = np.linspace(0, 4, n)
    i0 = np.clip(np.floor(xs).astype(int), 0, 3)
    f = xs - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
    tex = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    return np.clip(cfg.background_level + cfg.texture_amplitude * tex, 0, 1)


def _place(rng, cfg: SceneConfig, size: int, taken: list, gap: int = 3, tries: int = 200):
    n = cfg.image_size
    for _ in range(tries):
        x0 = int(rng.integers(1, n - size))
        y0 = int(rng.integers(1, n - size))
        box = BoundingBox(x0, y0, x0 + size, y0 + size)
        grown = (x0 - gap, y0 - gap, x0 + size + gap, y0 + size + gap)
        if all(not _overlaps(grown, t.as_tuple()) for t in taken):
            return box
    return None


def _overlaps(a, b) -> bool:
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def _draw(image: np.ndarray, shape: str, color, box: BoundingBox) -> BoundingBox:
    mask = _glyph_mask(shape, box.width)
    region = image[box.y0:box.y1, box.x0:box.x1]
    region[mask] = color
    ys, xs = np.nonzero(mask)
    return BoundingBox(box.x0 + int(xs.min()), box.y0 + int(ys.min()),
                       box.x0 + int(xs.max()) + 1, box.y0 + int(ys.max()) + 1)


def _check_category(cfg: SceneConfig, category_id: int):
    if not 0 <= category_id < cfg.n_categories:
        raise InvalidInputError(f"category {category_id} outside [0, {cfg.n_categories})")


def _render(cfg: SceneConfig, rng, sounding: list[int]):
    image = _background(cfg, rng)
    lo, hi = cfg.glyph_sizes
    placed: list[BoundingBox] = []
    gt = []
    for cat in sounding:
        box = _place(rng, cfg, int(rng.integers(lo, hi + 1)), placed)
        if box is None:
            raise DataError("could not place sounding glyph")
        placed.append(box)
        gt.append(_draw(image, SOUNDING_SHAPES[cat], SOUNDING_COLORS[cat], box))
    distractors = []
    for _ in range(int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))):
        box = _place(rng, cfg, int(rng.integers(lo, hi + 1)), placed)
        if box is None:
            continue
        placed.append(box)
        shape = SILENT_SHAPES[int(rng.integers(len(SILENT_SHAPES)))]
        color = SILENT_COLORS[int(rng.integers(len(SILENT_COLORS)))]
        distractors.append(_draw(image, shape, color, box))
    return image, gt, distractors


def generate_solo(category_id: int, seed: int, cfg: SceneConfig | None = None) -> SceneSample:
    cfg = cfg or SceneConfig()
    _check_category(cfg, category_id)
    image, gt, distractors = _render(cfg, _rng(1, category_id, seed), [category_id])
    audio = AudioClip(synthesize_tone(cfg, category_id, _rng(2, category_id, seed)), cfg.sample_rate)
    return SceneSample(image, audio, gt[0], category_id, distractors, seed)


def generate_duet(cat_a: int, cat_b: int, seed: int, cfg: SceneConfig | None = None) -> DuetSample:
    cfg = cfg or SceneConfig()
    _check_category(cfg, cat_a)
    _check_category(cfg, cat_b)
    if cat_a == cat_b:
        raise InvalidInputError("a duet needs two different categories")
    image, gt, distractors = _render(cfg, _rng(3, cat_a, cat_b, seed), [cat_a, cat_b])
    ref_a = AudioClip(synthesize_tone(cfg, cat_a, _rng(4, cat_a, cat_b, seed, 0)), cfg.sample_rate)
    ref_b = AudioClip(synthesize_tone(cfg, cat_b, _rng(4, cat_a, cat_b, seed, 1)), cfg.sample_rate)
    audio = AudioClip(ref_a.samples + ref_b.samples, cfg.sample_rate)
    return DuetSample(image, audio, tuple(gt), (ref_a, ref_b), (cat_a, cat_b), seed, distractors)


# --- splits -----------------------------------------------------------------

def _id_hash(clip_id: str, salt: int) -> str:
    return hashlib.sha1(f"{salt}:{clip_id}".encode()).hexdigest()


def split_ids(ids, categories, val_ratio: float, salt: int = 0) -> tuple[list, list]:
    """Stratified train/val split that depends only on the ids, categories, ratio and salt.

    Within each category clips are ordered by a salted hash and the first
    ``round(val_ratio * n)`` go to validation.
    """
    by_cat: dict = {}
    for clip_id, cat in zip(ids, categories):
        by_cat.setdefault(cat, []).append(clip_id)
    train, val = [], []
    for cat in sorted(by_cat):
        members = sorted(by_cat[cat], key=lambda c: _id_hash(str(c), salt))
        n_val = int(round(val_ratio * len(members)))
        val.extend(members[:n_val])
        train.extend(members[n_val:])
    return sorted(train, key=str), sorted(val, key=str)


@dataclass
class SyntheticCorpus:
    train: list
    val: list
    config: SceneConfig


def generate_corpus(n_train: int, n_val: int, cfg: SceneConfig | None = None,
                    seed: int = 0) -> SyntheticCorpus:
    """Solos with categories assigned round-robin, split stratified by hash."""
    cfg = cfg or SceneConfig()
    total = n_train + n_val
    seeds = [seed * 1_000_003 + i for i in range(total)]
    cats = [i % cfg.n_categories for i in range(total)]
    ids = [f"c{c}-s{s}" for c, s in zip(cats, seeds)]
    lookup = dict(zip(ids, zip(cats, seeds)))
    _, val_ids = split_ids(ids, cats, n_val / total, salt=seed)
    val_set = set(val_ids)
    train = [generate_solo(*lookup[i], cfg) for i in ids if i not in val_set]
    val = [generate_solo(*lookup[i], cfg) for i in ids if i in val_set]
    return SyntheticCorpus(train, val, cfg)


def validation_pairs(samples: list, n_pairs: int, seed: int = 0) -> list[tuple[int, int]]:
    """Deterministic cross-category pairing of sample indices."""
    rng = _rng(5, seed)
    pairs = []
    n = len(samples)
    if n < 2:
        raise InvalidInputError("need at least two samples to pair")
    attempts = 0
    while len(pairs) < n_pairs:
        i, j = (int(v) for v in rng.choice(n, 2, replace=False))
        attempts += 1
        if samples[i].category_id != samples[j].category_id:
            pairs.append((i, j))
        elif attempts > 100 * n_pairs:
            raise InvalidInputError("could not find enough cross-category pairs")
    return pairs


# --- disk cache and manifests -----------------------------------------------

def save_sample(sample, directory) -> Path:
    """Write a sample as PNG + WAV + JSON ground truth under ``directory/<sample_id>``."""
    out = Path(directory) / sample.sample_id
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8)).save(out / "frame.png")
    write_wav(out / "audio.wav", sample.audio)
    if isinstance(sample, SceneSample):
        truth = {"kind": "solo", "category_id": sample.category_id, "seed": sample.seed,
                 "gt_box": sample.gt_box.to_dict(),
                 "distractor_boxes": [b.to_dict() for b in sample.distractor_boxes]}
    else:
        truth = {"kind": "duet", "categories": list(sample.categories), "seed": sample.seed,
                 "gt_boxes": [b.to_dict() for b in sample.gt_boxes],
                 "distractor_boxes": [b.to_dict() for b in sample.distractor_boxes]}
        for k, ref in enumerate(sample.references):
            write_wav(out / f"reference{k}.wav", ref)
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    return out


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- real data ---------------------------------------------------------------

def _center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    return img[y0:y0 + side, x0:x0 + side]


def load_real_pair(root, split: str = "train", sample_rate: int = 11025,
                   val_ratio: float = 0.2, salt: int = 0):
    """Yield ``(image, AudioClip)`` from ``root/<category>/<clip_id>/{frame.png,audio.wav}``.

    ``split`` is ``"train"``, ``"val"`` or ``"all"``.  Unreadable clips are
    skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist")
    entries = sorted((p.parent.name, p.name) for p in root.glob("*/*") if p.is_dir())
    ids = [f"{cat}/{clip}" for cat, clip in entries]
    cats = [cat for cat, _ in entries]
    if split == "all":
        chosen = ids
    else:
        train, val = split_ids(ids, cats, val_ratio, salt)
        if split == "train":
            chosen = train
        elif split == "val":
            chosen = val
        else:
            raise InvalidInputError(f"unknown split {split!r}")
    if not chosen:
        raise DataError(f"split {split!r} under {root} is empty")
    for clip_id in chosen:
        d = root / clip_id
        try:
            with Image.open(d / "frame.png") as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            clip = read_wav(d / "audio.wav", target_rate=sample_rate)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", clip_id, exc)
            continue
        yield _center_square(img), clip

"""Training loop, inference, evaluation and checkpointing."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio as au
from .config import RunConfig
from .errors import ConfigError, DataError, InvalidInputError
from .metrics import BssScores, bss_eval, summarize, write_metrics_csv
from .proposals import BoundingBox, ProposalSet, propose_boxes
from .selector import (BoxScorer, CropEncoder, PairSelection, gather_selected_features,
                       pair_probabilities, select_pair_inference, st_gumbel_sample)
from .separator import ConditionedUNet, apply_head, per_pixel_cross_entropy

logger = logging.getLogger(__name__)


class AVSeparationModel(nn.Module):
    """Crop encoder + box scorer + conditioned U-Net, trained jointly."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        self.head = m.head
        self.encoder = CropEncoder(m.feature_dim, tuple(m.encoder_channels))
        self.scorer = BoxScorer(m.feature_dim, m.hidden)
        self.unet = ConditionedUNet(cfg.separator_config())

    def encode(self, crops: torch.Tensor) -> torch.Tensor:
        return self.encoder(crops)

    def score(self, features: torch.Tensor) -> torch.Tensor:
        return self.scorer(features)

    def mask_logits(self, net_input: torch.Tensor, f1: torch.Tensor, f2: torch.Tensor):
        """Two conditioned passes of the shared U-Net.

        The contracting path does not see the feature, so it is computed once
        and reused by both decoder passes.
        """
        b = net_input.shape[0]
        skips = [torch.cat([s, s]) for s in self.unet.encode(net_input)]
        U = self.unet.decode(skips, torch.cat([f1, f2]))
        return U[:b], U[b:]

    def masks(self, net_input, f1, f2):
        return apply_head(self.head, *self.mask_logits(net_input, f1, f2))


# --- data preparation ----------------------------------------------------------

class ProposalCache:
    """Proposals depend only on the image and proposal settings, so they are memoised."""

    def __init__(self):
        self._store: dict = {}

    def get(self, image: np.ndarray, count: int, cfg: RunConfig, image_id: str = "") -> ProposalSet:
        key = (hashlib.sha1(np.ascontiguousarray(image).tobytes()).hexdigest(), image.shape, count,
               cfg.proposal_config())
        if key not in self._store:
            self._store[key] = propose_boxes(image, count, cfg.proposal_config(), image_id)
        return self._store[key]

    def __len__(self):
        return len(self._store)


def crop_tensor(image: np.ndarray, boxes, size: int) -> torch.Tensor:
    """Crop every box and resize to ``size`` x ``size``: returns (K, 3, size, size)."""
    img = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)
    out = []
    for b in boxes:
        patch = img[:, b.y0:b.y1, b.x0:b.x1]
        if patch.numel() == 0:
            raise InvalidInputError(f"empty crop for box {b.as_tuple()}")
        out.append(F.interpolate(patch[None], size=(size, size), mode="bilinear",
                                 align_corners=False, antialias=True)[0])
    return torch.stack(out)


def to_net_resolution(mag: np.ndarray, cfg: RunConfig) -> torch.Tensor:
    """Resample a magnitude grid (or a batch of them) to the U-Net input shape."""
    t = torch.as_tensor(mag, dtype=torch.float32)
    squeeze = t.dim() == 2
    if squeeze:
        t = t[None]
    shape = tuple(cfg.model.net_shape)
    if tuple(t.shape[-2:]) != shape:
        t = F.interpolate(t[:, None], size=shape, mode="bilinear", align_corners=False, antialias=True)[:, 0]
    return t[0] if squeeze else t


def to_stft_resolution(mask: torch.Tensor, shape) -> torch.Tensor:
    if tuple(mask.shape[-2:]) == tuple(shape):
        return mask
    return F.interpolate(mask[:, None], size=tuple(shape), mode="bilinear", align_corners=False)[:, 0]


@dataclass
class PreparedSolo:
    sample_id: str
    boxes: ProposalSet
    crops: torch.Tensor
    audio: au.AudioClip
    net_magnitude: torch.Tensor
    category_id: int = -1
    gt_box: BoundingBox | None = None


def prepare_solo(sample, cfg: RunConfig, cache: ProposalCache | None = None,
                 count: int | None = None) -> PreparedSolo:
    cache = ProposalCache() if cache is None else cache
    count = count or cfg.model.n_train_boxes
    sid = getattr(sample, "sample_id", "")
    boxes = cache.get(sample.image, count, cfg, sid)
    crops = crop_tensor(sample.image, boxes, cfg.model.crop_size)
    spec = au.stft(sample.audio, cfg.stft_config())
    return PreparedSolo(sid, boxes, crops, sample.audio, to_net_resolution(spec.magnitude, cfg),
                        getattr(sample, "category_id", -1), getattr(sample, "gt_box", None))


def _check_clip(clip: au.AudioClip, cfg: RunConfig):
    if clip.sample_rate != cfg.audio.sample_rate:
        raise InvalidInputError(f"clip rate {clip.sample_rate} != configured {cfg.audio.sample_rate}")


# --- training --------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: RunConfig
    model: AVSeparationModel
    optimizer: torch.optim.Optimizer
    pair_rng: np.random.Generator
    gumbel_gen: torch.Generator
    step: int = 0
    running_loss: float = float("nan")
    config_hash: str = ""
    history: list = field(default_factory=list)


def build_optimizer(model: AVSeparationModel, cfg: RunConfig) -> torch.optim.Optimizer:
    t = cfg.train
    groups = [
        {"params": list(model.unet.parameters()), "lr": t.lr, "base_lr": t.lr},
        {"params": list(model.encoder.parameters()) + list(model.scorer.parameters()),
         "lr": t.selector_lr, "base_lr": t.selector_lr},
    ]
    if t.optimizer == "adam":
        return torch.optim.Adam(groups, weight_decay=t.weight_decay)
    return torch.optim.SGD(groups, momentum=t.momentum, weight_decay=t.weight_decay)


def init_state(cfg: RunConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = AVSeparationModel(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 7777)
    return TrainState(cfg, model, build_optimizer(model, cfg), np.random.default_rng([cfg.seed, 1]),
                      gen, config_hash=cfg.config_hash())


def sample_pairs(state: TrainState, solos: list) -> list[tuple]:
    cfg = state.cfg
    n = len(solos)
    if n < 2:
        raise DataError("need at least two training solos")
    pairs = []
    while len(pairs) < cfg.train.batch_size:
        i, j = (int(v) for v in state.pair_rng.choice(n, 2, replace=False))
        if cfg.train.cross_category_pairs and solos[i].category_id == solos[j].category_id >= 0:
            continue
        pairs.append((solos[i], solos[j]))
    return pairs


@dataclass
class StepResult:
    loss: float
    grad_norms: dict


def _batch_tensors(batch, cfg: RunConfig):
    stft_cfg = cfg.stft_config()
    mixes, t1, t2 = [], [], []
    for a, b in batch:
        _check_clip(a.audio, cfg)
        mixed = au.mix(a.audio, b.audio)
        mixes.append(au.stft(mixed, stft_cfg).magnitude)
        m1, m2 = au.binary_target_masks(a.net_magnitude.numpy(), b.net_magnitude.numpy())
        t1.append(m1.values)
        t2.append(m2.values)
    mix_mag = to_net_resolution(np.stack(mixes), cfg)
    return (torch.log1p(mix_mag), torch.as_tensor(np.stack(t1), dtype=torch.float32),
            torch.as_tensor(np.stack(t2), dtype=torch.float32))


def compute_loss(model: AVSeparationModel, batch, cfg: RunConfig, generator=None, noise=None):
    crops1 = torch.stack([a.crops for a, _ in batch])
    crops2 = torch.stack([b.crops for _, b in batch])
    feats = model.encode(torch.cat([crops1, crops2]))
    v1, v2 = feats[:len(batch)], feats[len(batch):]
    s1, s2 = model.score(v1), model.score(v2)
    P = pair_probabilities(s1, s2)
    D = st_gumbel_sample(P, cfg.model.temperature, generator=generator, noise=noise)
    f1, f2 = gather_selected_features(v1, v2, D)
    net_in, t1, t2 = _batch_tensors(batch, cfg)
    m1, m2 = model.masks(net_in, f1, f2)
    return per_pixel_cross_entropy([m1, m2], [t1, t2])


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.sqrt(torch.stack(sq).sum())) if sq else 0.0


def train_step(state: TrainState, batch) -> StepResult:
    """One optimisation step on a batch of (solo, solo) pairs."""
    if state.cfg.config_hash() != state.config_hash:
        raise ConfigError("configuration changed during the run")
    cfg = state.cfg
    model = state.model
    model.train()
    frac = state.step / max(cfg.train.steps, 1)
    for g in state.optimizer.param_groups:
        g["lr"] = g["base_lr"] * cfg.train.lr_final_ratio ** min(frac, 1.0)
    state.optimizer.zero_grad(set_to_none=True)
    loss = compute_loss(model, batch, cfg, generator=state.gumbel_gen)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    loss.backward()
    norms = {
        "scorer": _grad_norm(model.scorer.parameters()),
        "encoder": _grad_norm(model.encoder.parameters()),
        "unet": _grad_norm(model.unet.parameters()),
    }
    state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.running_loss = value if np.isnan(state.running_loss) else 0.95 * state.running_loss + 0.05 * value
    return StepResult(value, norms)


def train(state: TrainState, solos: list, steps: int | None = None, callback=None) -> TrainState:
    steps = state.cfg.train.steps if steps is None else steps
    t0 = time.time()
    for _ in range(steps):
        result = train_step(state, sample_pairs(state, solos))
        state.history.append(result.loss)
        if state.step % state.cfg.train.log_every == 0:
            logger.info("step %d loss %.4f (running %.4f) %.1fs", state.step, result.loss,
                        state.running_loss, time.time() - t0)
        if callback is not None:
            callback(state, result)
    return state


# --- separation and inference -------------------------------------------------

@dataclass
class Separation:
    clips: tuple
    masks: tuple  # at STFT resolution, numpy
    mixture_spec: au.Spectrogram


@torch.no_grad()
def separate(model: AVSeparationModel, mixture: au.AudioClip, f1: torch.Tensor, f2: torch.Tensor,
             cfg: RunConfig) -> Separation:
    model.eval()
    _check_clip(mixture, cfg)
    spec = au.stft(mixture, cfg.stft_config())
    net_in = torch.log1p(to_net_resolution(spec.magnitude, cfg))[None]
    m1, m2 = model.masks(net_in, f1.reshape(1, -1), f2.reshape(1, -1))
    masks = [to_stft_resolution(m, spec.shape)[0].double().numpy().clip(0.0, 1.0) for m in (m1, m2)]
    clips = tuple(au.apply_mask_reconstruct(spec, m) for m in masks)
    return Separation(clips, tuple(masks), spec)


@torch.no_grad()
def top_box(model: AVSeparationModel, solo: PreparedSolo):
    """Index and feature of the highest-scoring proposal of one image."""
    model.eval()
    v = model.encode(solo.crops)
    s = model.score(v)
    # lowest index wins ties
    k = int(torch.argmax(s))
    return k, v[k], s


@dataclass
class InferenceResult:
    boxes: tuple
    clips: tuple
    selection: PairSelection
    masks: tuple
    proposals: ProposalSet


@torch.no_grad()
def infer(image: np.ndarray, clip: au.AudioClip, model: AVSeparationModel, cfg: RunConfig,
          cache: ProposalCache | None = None, image_id: str = "") -> InferenceResult:
    model.eval()
    cache = ProposalCache() if cache is None else cache
    proposals = cache.get(image, cfg.model.n_infer_boxes, cfg, image_id)
    v = model.encode(crop_tensor(image, proposals, cfg.model.crop_size))
    s = model.score(v)
    sel = select_pair_inference(s, proposals.boxes, eps=cfg.model.overlap_eps)
    k, l = sel.indices
    sel.features = (v[k], v[l])
    sep = separate(model, clip, v[k], v[l], cfg)
    return InferenceResult((proposals[k], proposals[l]), sep.clips, sel, sep.masks, proposals)


# --- evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list
    summary: dict
    selection_accuracy: float = float("nan")


def evaluate(model: AVSeparationModel | None, solos: list, pairs: list, cfg: RunConfig,
             mode: str = "model", filter_length: int = 512, csv_path=None) -> EvalReport:
    """Mix-and-separate every pair, then score with bss_eval.

    ``mode`` selects the estimates: ``"model"`` (predicted masks from the
    top-scoring box of each image), ``"ideal"`` (ground-truth binary masks)
    or ``"identity"`` (the mixture itself for both sources).
    """
    if mode not in ("model", "ideal", "identity"):
        raise InvalidInputError(f"unknown evaluation mode {mode!r}")
    if mode == "model" and model is None:
        raise InvalidInputError("model mode needs a model")
    stft_cfg = cfg.stft_config()
    rows = []
    for i, j in pairs:
        a, b = solos[i], solos[j]
        mixed = au.mix(a.audio, b.audio)
        if mode == "model":
            _, fa, _ = top_box(model, a)
            _, fb, _ = top_box(model, b)
            est = separate(model, mixed, fa, fb, cfg).clips
        elif mode == "ideal":
            spec = au.stft(mixed, stft_cfg)
            m1, m2 = au.binary_target_masks(au.stft(a.audio, stft_cfg), au.stft(b.audio, stft_cfg))
            est = (au.apply_mask_reconstruct(spec, m1), au.apply_mask_reconstruct(spec, m2))
        else:
            est = (mixed, mixed)
        scores = bss_eval([a.audio, b.audio], list(est), filter_length)
        sample_id = f"{a.sample_id}+{b.sample_id}"
        rows.extend((sample_id, k, s) for k, s in enumerate(scores))
    if csv_path is not None:
        write_metrics_csv(csv_path, rows)
    return EvalReport(rows, summarize(s for _, _, s in rows))


def selection_accuracy(model: AVSeparationModel, solos: list, iou_threshold: float = 0.3) -> float:
    """Fraction of solos whose top-scoring proposal overlaps the sounding object's box."""
    hits = 0
    for solo in solos:
        if solo.gt_box is None:
            raise InvalidInputError("selection accuracy needs ground-truth boxes")
        k, _, _ = top_box(model, solo)
        hits += solo.boxes[k].iou(solo.gt_box) >= iou_threshold
    return hits / len(solos)


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(state: TrainState, directory) -> Path:
    """Flat named-tensor archive (``weights.npz``) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for pid, pstate in opt["state"].items():
        for key, value in pstate.items():
            arrays[f"optim.{pid}.{key}"] = torch.as_tensor(value).cpu().numpy()
    arrays["rng.gumbel"] = state.gumbel_gen.get_state().numpy()
    np.savez(directory / "weights.npz", **arrays)
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": g["params"]}
              for g in opt["param_groups"]]
    manifest = {
        "config_hash": state.config_hash,
        "step": state.step,
        "head": state.cfg.model.head,
        "config": state.cfg.to_dict(),
        "running_loss": state.running_loss,
        "pair_rng": state.pair_rng.bit_generator.state,
        "optimizer_param_groups": groups,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return directory


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj)}")


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = np.load(directory / "weights.npz")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {directory}: {exc}") from exc
    cfg = RunConfig.from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise ConfigError("checkpoint manifest hash does not match its stored config")
    state = init_state(cfg)
    model_sd = {k[len("model."):]: torch.as_tensor(arrays[k]) for k in arrays.files if k.startswith("model.")}
    state.model.load_state_dict(model_sd)
    opt_state: dict = {}
    for k in arrays.files:
        if k.startswith("optim."):
            _, pid, key = k.split(".", 2)
            opt_state.setdefault(int(pid), {})[key] = torch.as_tensor(arrays[k])
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": manifest["optimizer_param_groups"]})
    state.gumbel_gen.set_state(torch.as_tensor(arrays["rng.gumbel"], dtype=torch.uint8))
    state.pair_rng.bit_generator.state = manifest["pair_rng"]
    state.step = manifest["step"]
    state.running_loss = manifest["running_loss"]
    return state

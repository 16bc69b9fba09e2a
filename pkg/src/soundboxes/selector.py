"""Box scoring and pair selection.

Training selects one box per image through a straight-through Gumbel-Softmax
sample over the N x N grid of pair probabilities; inference picks the best
pair of non-overlapping boxes by exhaustive search.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError
from .proposals import BoundingBox

logger = logging.getLogger(__name__)


class CropEncoder(nn.Module):
    """Four stride-2 conv blocks, global average pooling, linear projection to C."""

    def __init__(self, feature_dim: int = 32, channels=(16, 32, 64, 64), bias: bool = True):
        super().__init__()
        layers = []
        cin = 3
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=bias), nn.ReLU(inplace=True)]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, feature_dim, bias=bias)
        self.feature_dim = feature_dim

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        if crops.numel() == 0:
            raise InvalidInputError("empty crop batch")
        lead = crops.shape[:-3]
        x = self.body(crops.reshape(-1, *crops.shape[-3:]))
        x = self.proj(x.mean(dim=(2, 3)))
        return x.reshape(*lead, self.feature_dim)


class BoxScorer(nn.Module):
    """s = ReLU(FC(ReLU(FC(v)))), a nonnegative sounding-likelihood per feature."""

    def __init__(self, feature_dim: int = 32, hidden: int = 128, init_bias: float = 1.0):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        # a fresh scorer must not sit in the dead zone of the final ReLU
        nn.init.constant_(self.fc2.bias, init_bias)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return score_feature(v, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


def score_feature(v, w1, b1, w2, b2) -> torch.Tensor:
    """Two-layer ReLU MLP ending in a ReLU; works on a single vector or a batch."""
    v, w1, b1, w2, b2 = (torch.as_tensor(t) for t in (v, w1, b1, w2, b2))
    if v.shape[-1] != w1.shape[1]:
        raise InvalidInputError(f"feature length {v.shape[-1]} != FC input {w1.shape[1]}")
    if w2.shape[-1] != w1.shape[0]:
        raise InvalidInputError(f"hidden sizes disagree: {w1.shape[0]} vs {w2.shape[-1]}")
    h = F.relu(F.linear(v, w1, b1))
    return F.relu(F.linear(h, w2.reshape(1, -1), b2.reshape(1))).squeeze(-1)


def pair_probabilities(s1: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
    """P[i, j] = s1[i] s2[j] / sum(s1 s2^T); leading batch dims are allowed.

    If every product is zero the distribution is undefined and a uniform P is
    returned instead.
    """
    s1 = torch.as_tensor(s1)
    s2 = torch.as_tensor(s2)
    if s1.shape[:-1] != s2.shape[:-1]:
        raise InvalidInputError("score batches have different leading shapes")
    if (s1 < 0).any() or (s2 < 0).any():
        raise InvalidInputError("scores must be nonnegative")
    outer = s1.unsqueeze(-1) * s2.unsqueeze(-2)
    total = outer.sum(dim=(-2, -1), keepdim=True)
    dead = total == 0
    if dead.any():
        logger.warning("all pair products are zero for %d item(s); using uniform pair probabilities",
                       int(dead.sum()))
    uniform = torch.full_like(outer, 1.0 / (outer.shape[-1] * outer.shape[-2]))
    return torch.where(dead, uniform, outer / torch.where(dead, torch.ones_like(total), total))


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))


def relaxed_sample(P: torch.Tensor, temperature: float, noise: torch.Tensor) -> torch.Tensor:
    """Soft Gumbel-Softmax weights over the flattened N x N cells."""
    flat = P.flatten(-2)
    logits = torch.where(flat > 0, torch.log(flat.clamp_min(torch.finfo(flat.dtype).tiny)),
                         torch.full_like(flat, float("-inf")))
    y = torch.softmax((logits + noise.flatten(-2)) / temperature, dim=-1)
    return y.reshape(P.shape)


def st_gumbel_sample(P: torch.Tensor, temperature: float = 1.0,
                     generator: torch.Generator | None = None,
                     noise: torch.Tensor | None = None,
                     return_soft: bool = False):
    """Straight-through Gumbel-Softmax over the last two dims of ``P``.

    The forward value is one-hot at argmax(log P + g); gradients are those of
    the soft relaxation.  Zero-probability cells are never chosen.
    """
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    if noise is None:
        noise = sample_gumbel(P.shape, generator, P.dtype)
    soft = relaxed_sample(P, temperature, noise)
    flat = soft.flatten(-2)
    # argmax picks the lowest flat index among ties
    hard = F.one_hot(flat.argmax(dim=-1), flat.shape[-1]).to(soft.dtype).reshape(P.shape)
    D = hard - soft.detach() + soft
    return (D, soft) if return_soft else D


def gather_selected_features(features1: torch.Tensor, features2: torch.Tensor, D: torch.Tensor):
    """v1 = sum_i v1_i sum_j D_ij ;  v2 = sum_j v2_j sum_i D_ij."""
    if features1.shape[-2] != D.shape[-2] or features2.shape[-2] != D.shape[-1]:
        raise InvalidInputError(
            f"feature counts {features1.shape[-2]}, {features2.shape[-2]} do not match D {tuple(D.shape[-2:])}")
    w1 = D.sum(dim=-1)
    w2 = D.sum(dim=-2)
    return (w1.unsqueeze(-1) * features1).sum(-2), (w2.unsqueeze(-1) * features2).sum(-2)


@dataclass
class SelectionDistribution:
    P: torch.Tensor
    D: torch.Tensor
    temperature: float


@dataclass
class PairSelection:
    indices: tuple
    features: tuple = ()
    no_set: set = field(default_factory=set)
    fallback: bool = False
    scores: tuple = ()

    def to_dict(self, image_id: str = "") -> dict:
        return {"image_id": image_id, "box_indices": list(self.indices),
                "scores": [float(s) for s in self.scores], "fallback": self.fallback}


def boxes_disjoint(a: BoundingBox, b: BoundingBox, eps: float = 0.0) -> bool:
    return a.intersection(b) <= eps * min(a.area, b.area)


def select_pair_inference(scores, boxes, eps: float = 0.0, fallback_top: int = 10) -> PairSelection:
    """argmax of s_i s_j over index pairs i < j whose boxes do not overlap.

    Ties go to the lexicographically smallest (i, j).  When no pair qualifies,
    the ``fallback_top`` highest-product pairs are searched for the one with
    the smallest IoU, and a warning is logged.
    """
    s = np.asarray(torch.as_tensor(scores).detach().cpu().numpy() if torch.is_tensor(scores) else scores,
                   dtype=np.float64)
    m = len(s)
    if m < 2 or len(boxes) != m:
        raise InvalidInputError(f"need >= 2 scores with one box each (got {m} scores, {len(boxes)} boxes)")
    no_set = {(i, j) for i in range(m) for j in range(i + 1, m) if boxes_disjoint(boxes[i], boxes[j], eps)}
    if no_set:
        best = max(sorted(no_set), key=lambda p: s[p[0]] * s[p[1]])
        return PairSelection(best, no_set=no_set, scores=(s[best[0]], s[best[1]]))
    logger.warning("no non-overlapping box pair among %d proposals; relaxing the overlap test", m)
    pairs = sorted(((i, j) for i in range(m) for j in range(i + 1, m)),
                   key=lambda p: (-s[p[0]] * s[p[1]], p))
    top = pairs[:fallback_top]
    best = min(top, key=lambda p: (boxes[p[0]].iou(boxes[p[1]]), -s[p[0]] * s[p[1]], p))
    return PairSelection(best, no_set=set(), fallback=True, scores=(s[best[0]], s[best[1]]))

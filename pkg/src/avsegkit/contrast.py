"""Contrastive machinery over fused pixel features.

A record pool is built by re-pairing each visual item in a batch with a
permuted audio item, fusing them, and keeping a subsample of pixels. Each
record carries the fused vector z, the permuted audio's label set t, and
the pixel's ground-truth label y. Records partition into:

  foreground  y is a real class and y is in t
  unknown     y is background but t is non-empty (audio claims an object
              the pixel does not show; ambiguous, excluded by default)
  background  everything else, including a labeled pixel whose class is
              absent from t (visible but silent)

For a foreground anchor of class c, candidates split into positives
(c in t_j and y_j = c), hard negatives (exactly one of those holds), and
easy negatives (neither holds). A background anchor takes the rest of the
background partition as positives and the whole foreground partition as
negatives. Losses are a supervised InfoNCE where each positive competes
against the negatives only, averaged over positives.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fusion import FusionResult, ProjectionWeights, cross_attend

DEFAULT_TAU = 0.1
DEFAULT_BUDGET = 128
DEFAULT_PROPORTION = 0.5
DEFAULT_MAX_ANCHORS_PER_ITEM = 256
DEFAULT_BANK_CAPACITY = 64
NORMALIZE_EPS = 1e-12


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorRecord:
    z: np.ndarray
    audio_labels: frozenset[int]
    pixel_label: int
    origin: tuple[int, int]  # (batch item, flat pixel index)


class RecordPool:
    """Stacked fused features plus per-record labels and provenance."""

    def __init__(
        self,
        features: np.ndarray,
        audio_labels: Sequence[frozenset[int]],
        pixel_labels: np.ndarray,
        origins: Sequence[tuple[int, int]],
        num_classes: int,
        background_id: int = 0,
    ):
        features = np.asarray(features, dtype=np.float64)
        pixel_labels = np.asarray(pixel_labels, dtype=np.int64)
        n = features.shape[0]
        if features.ndim != 2:
            raise MiningError("features must be (records, dim)")
        if not (len(audio_labels) == pixel_labels.shape[0] == len(origins) == n):
            raise MiningError("record fields disagree in length")
        if pixel_labels.size and (
            pixel_labels.min() < 0 or pixel_labels.max() >= num_classes
        ):
            raise MiningError(f"pixel labels outside [0, {num_classes})")
        for t in audio_labels:
            if background_id in t:
                raise MiningError("audio label sets must not contain background")
            for c in t:
                if not 0 <= c < num_classes:
                    raise MiningError(f"audio label {c} outside [0, {num_classes})")
        self.features = features
        self.audio_labels = tuple(frozenset(t) for t in audio_labels)
        self.pixel_labels = pixel_labels
        self.origins = tuple(tuple(o) for o in origins)
        self.num_classes = num_classes
        self.background_id = background_id
        member = np.zeros((n, num_classes), dtype=bool)
        for j, t in enumerate(self.audio_labels):
            for c in t:
                member[j, c] = True
        self.membership = member

    def __len__(self) -> int:
        return self.features.shape[0]

    def record(self, index: int) -> AnchorRecord:
        return AnchorRecord(
            self.features[index],
            self.audio_labels[index],
            int(self.pixel_labels[index]),
            self.origins[index],
        )


@dataclass
class PairingResult:
    pool: RecordPool
    permutation: np.ndarray
    caches: list[FusionResult]
    pixel_indices: list[np.ndarray]  # retained flat pixels per batch item


def random_pairing(
    visual_features: Sequence[np.ndarray],
    audio_features: Sequence[np.ndarray],
    label_rasters: Sequence[np.ndarray],
    audio_label_sets: Sequence[frozenset[int]],
    num_classes: int,
    rng: np.random.Generator | None = None,
    permutation: np.ndarray | None = None,
    pixel_indices: Sequence[np.ndarray] | None = None,
    max_anchors_per_item: int = DEFAULT_MAX_ANCHORS_PER_ITEM,
    activation: str = "sigmoid",
    num_heads: int = 1,
    weights: ProjectionWeights | None = None,
    background_id: int = 0,
) -> PairingResult:
    """Re-pair audio across the batch, fuse, and collect anchor records.

    The identity permutation reproduces the original pairings. When ``rng``
    draws the permutation and pixel subsample, results are deterministic in
    the generator state. Retained pixel indices are kept sorted so record
    order is stable.
    """
    batch = len(visual_features)
    if not (batch == len(audio_features) == len(label_rasters)
            == len(audio_label_sets)):
        raise MiningError("batch inputs disagree in length")
    if batch == 0:
        raise MiningError("empty batch")
    if permutation is None:
        if rng is None:
            raise MiningError("need rng or an explicit permutation")
        permutation = rng.permutation(batch)
    else:
        permutation = np.asarray(permutation, dtype=np.int64)
        if sorted(permutation.tolist()) != list(range(batch)):
            raise MiningError(f"not a permutation of {batch} items: {permutation}")

    features = []
    labels = []
    origins = []
    sets_per_record = []
    caches = []
    chosen_per_item = []
    for i in range(batch):
        fused = cross_attend(
            visual_features[i],
            audio_features[permutation[i]],
            activation=activation,
            num_heads=num_heads,
            weights=weights,
        )
        flat = fused.fused.reshape(-1, fused.fused.shape[-1])
        raster = np.asarray(label_rasters[i]).reshape(-1)
        if raster.shape[0] != flat.shape[0]:
            raise MiningError(
                f"item {i}: raster has {raster.shape[0]} pixels, features "
                f"have {flat.shape[0]}"
            )
        if pixel_indices is not None:
            chosen = np.asarray(pixel_indices[i], dtype=np.int64)
        elif flat.shape[0] > max_anchors_per_item:
            if rng is None:
                raise MiningError("need rng to subsample pixels")
            chosen = np.sort(
                rng.choice(flat.shape[0], size=max_anchors_per_item, replace=False)
            )
        else:
            chosen = np.arange(flat.shape[0])
        t = frozenset(audio_label_sets[permutation[i]])
        for p in chosen.tolist():
            origins.append((i, p))
            sets_per_record.append(t)
        features.append(flat[chosen])
        labels.append(raster[chosen])
        caches.append(fused)
        chosen_per_item.append(chosen)

    pool = RecordPool(
        np.concatenate(features, axis=0),
        sets_per_record,
        np.concatenate(labels, axis=0),
        origins,
        num_classes,
        background_id,
    )
    return PairingResult(pool, permutation, caches, chosen_per_item)


# ---------------------------------------------------------------------------
# partition and mining


@dataclass
class AnchorPartition:
    fg_mask: np.ndarray
    unknown_mask: np.ndarray
    bg_mask: np.ndarray

    @property
    def fg(self) -> np.ndarray:
        return np.nonzero(self.fg_mask)[0]

    @property
    def unknown(self) -> np.ndarray:
        return np.nonzero(self.unknown_mask)[0]

    @property
    def bg(self) -> np.ndarray:
        return np.nonzero(self.bg_mask)[0]

    def label_of(self, index: int) -> str:
        if self.fg_mask[index]:
            return "fg"
        if self.unknown_mask[index]:
            return "unknown"
        return "bg"


def partition_anchors(pool: RecordPool) -> AnchorPartition:
    """Split records into foreground / unknown / background (disjoint, total)."""
    y = pool.pixel_labels
    bg = pool.background_id
    n = len(pool)
    in_own = np.zeros(n, dtype=bool)
    nonbg = y != bg
    idx = np.nonzero(nonbg)[0]
    in_own[idx] = pool.membership[idx, y[idx]]
    has_audio = pool.membership.any(axis=1)
    fg_mask = nonbg & in_own
    unknown_mask = (~nonbg) & has_audio
    bg_mask = ~(fg_mask | unknown_mask)
    return AnchorPartition(fg_mask, unknown_mask, bg_mask)


@dataclass
class ContrastiveSets:
    """Candidate indices for one anchor. Hardness grading applies to
    foreground anchors; background anchors carry all negatives as easy."""

    anchor_index: int
    anchor_class: int
    partition_label: str  # 'fg' | 'bg'
    positives: np.ndarray
    hard_negatives: np.ndarray
    easy_negatives: np.ndarray

    def negatives(self) -> np.ndarray:
        return np.concatenate([self.hard_negatives, self.easy_negatives])


def mine_sets(
    pool: RecordPool,
    partition: AnchorPartition,
    anchor_index: int,
    label_match: str = "membership",
    include_unknown_negatives: bool = False,
) -> ContrastiveSets:
    """Mine positive / hard-negative / easy-negative candidates for an anchor.

    ``label_match`` controls the audio-side predicate for foreground anchors:
    'membership' asks whether the anchor class is in the candidate's label
    set; 'set_equality' compares whole label sets. Records from the unknown
    partition stay out of every set unless ``include_unknown_negatives``.
    The anchor is excluded from its own sets.
    """
    if label_match not in ("membership", "set_equality"):
        raise MiningError(f"unknown label_match {label_match!r}")
    n = len(pool)
    if not 0 <= anchor_index < n:
        raise MiningError(f"anchor index {anchor_index} outside pool of {n}")
    if partition.unknown_mask[anchor_index]:
        raise MiningError(
            f"record {anchor_index} is in the unknown partition and cannot anchor"
        )
    self_mask = np.zeros(n, dtype=bool)
    self_mask[anchor_index] = True
    allowed = ~self_mask
    if not include_unknown_negatives:
        allowed &= ~partition.unknown_mask

    if partition.bg_mask[anchor_index]:
        pos = partition.bg_mask & ~self_mask
        neg = partition.fg_mask.copy()
        return ContrastiveSets(
            anchor_index,
            pool.background_id,
            "bg",
            np.nonzero(pos)[0],
            np.zeros(0, dtype=np.int64),
            np.nonzero(neg)[0],
        )

    c = int(pool.pixel_labels[anchor_index])
    if label_match == "membership":
        audio_side = pool.membership[:, c]
    else:
        anchor_set = pool.audio_labels[anchor_index]
        audio_side = np.array(
            [t == anchor_set for t in pool.audio_labels], dtype=bool
        )
    pixel_side = pool.pixel_labels == c
    pos = audio_side & pixel_side & ~self_mask
    # unknown records can never be positives (their label is background)
    hard = (audio_side ^ pixel_side) & allowed
    easy = ~audio_side & ~pixel_side & allowed
    return ContrastiveSets(
        anchor_index,
        c,
        "fg",
        np.nonzero(pos)[0],
        np.nonzero(hard)[0],
        np.nonzero(easy)[0],
    )


def mine_label_sets(pool: RecordPool, anchor_index: int) -> ContrastiveSets:
    """Plain supervised-contrastive mining: positives share the anchor's
    pixel label, negatives differ; audio label sets are ignored."""
    n = len(pool)
    if not 0 <= anchor_index < n:
        raise MiningError(f"anchor index {anchor_index} outside pool of {n}")
    y = pool.pixel_labels
    c = int(y[anchor_index])
    same = y == c
    same[anchor_index] = False
    part = "bg" if c == pool.background_id else "fg"
    return ContrastiveSets(
        anchor_index,
        c,
        part,
        np.nonzero(same)[0],
        np.zeros(0, dtype=np.int64),
        np.nonzero(y != c)[0],
    )


def dump_sets(
    pool: RecordPool, partition: AnchorPartition, sets: Sequence[ContrastiveSets]
) -> list[str]:
    """Deterministic text form of mined sets, one line per anchor, for
    diffing against an independent implementation."""

    def fmt(indices: np.ndarray) -> str:
        return " ".join(f"({pool.origins[j][0]},{pool.origins[j][1]})"
                        for j in indices.tolist())

    lines = []
    for s in sets:
        o = pool.origins[s.anchor_index]
        lines.append(
            f"anchor ({o[0]},{o[1]}) part {s.partition_label} "
            f"class {s.anchor_class} | pos {len(s.positives)}: "
            f"{fmt(s.positives)} | hard {len(s.hard_negatives)}: "
            f"{fmt(s.hard_negatives)} | easy {len(s.easy_negatives)}: "
            f"{fmt(s.easy_negatives)}"
        )
    return lines


# ---------------------------------------------------------------------------
# memory bank and balanced sampling


class MemoryBank:
    """Per-class bounded FIFO of raw audio payloads.

    Mutation is single-writer by design; reads return snapshots. At
    capacity the oldest entry of that class is evicted first.
    """

    def __init__(self, capacity: int = DEFAULT_BANK_CAPACITY):
        if capacity < 1:
            raise MiningError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._store: dict[int, deque] = {}

    def push(self, class_id: int, item) -> None:
        self._store.setdefault(class_id, deque(maxlen=self.capacity)).append(item)

    def items(self, class_id: int) -> tuple:
        return tuple(self._store.get(class_id, ()))

    def size(self, class_id: int) -> int:
        return len(self._store.get(class_id, ()))

    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self._store))


@dataclass
class SampledSets:
    """Balanced draw for one anchor. Synthesized positives are raw vectors
    appended after the indexed ones and carry no gradients."""

    anchor_index: int
    positive_indices: np.ndarray
    negative_indices: np.ndarray
    synthesized_positives: np.ndarray | None = None

    def positive_count(self) -> int:
        extra = 0 if self.synthesized_positives is None else len(
            self.synthesized_positives
        )
        return len(self.positive_indices) + extra


def _draw(rng: np.random.Generator, indices: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    replace = indices.size < count
    return np.sort(rng.choice(indices, size=count, replace=replace))


def balance(
    sets: ContrastiveSets,
    rng: np.random.Generator,
    proportion: float = DEFAULT_PROPORTION,
    budget: int = DEFAULT_BUDGET,
    bank: MemoryBank | None = None,
    synthesize: Callable | None = None,
    counters: dict | None = None,
) -> SampledSets | None:
    """Draw ceil(p*budget) positives and floor((1-p)*budget) negatives.

    Draws are uniform, without replacement when the candidate set is large
    enough, with replacement otherwise. When positives fall short and a
    bank plus ``synthesize`` callback are supplied, the shortfall is covered
    by synthesizing from stored payloads of the anchor class; an anchor with
    no positives and no usable bank entries is skipped (returns None and
    bumps ``counters['skipped_anchors']``). An empty negative set is an error.
    """
    if not 0.0 < proportion < 1.0:
        raise MiningError(f"proportion must lie in (0, 1), got {proportion}")
    if budget < 2:
        raise MiningError(f"budget must be >= 2, got {budget}")
    # tiny guard keeps exact-integer products exact under float rounding
    n_pos = int(math.ceil(proportion * budget - 1e-9))
    n_neg = int(math.floor((1.0 - proportion) * budget + 1e-9))

    negatives = sets.negatives()
    if negatives.size == 0:
        raise MiningError(
            f"anchor {sets.anchor_index} has no negatives to sample"
        )
    neg_drawn = _draw(rng, negatives, n_neg)

    pos_pool = sets.positives
    synthesized = None
    if pos_pool.size >= n_pos:
        pos_drawn = _draw(rng, pos_pool, n_pos)
    else:
        shortfall = n_pos - pos_pool.size
        bank_items = bank.items(sets.anchor_class) if bank is not None else ()
        if bank_items and synthesize is not None:
            pos_drawn = pos_pool.copy()
            picks = (
                rng.choice(len(bank_items), size=shortfall, replace=False)
                if len(bank_items) >= shortfall
                else rng.choice(len(bank_items), size=shortfall, replace=True)
            )
            synthesized = np.stack(
                [np.asarray(synthesize(bank_items[k]), dtype=np.float64)
                 for k in picks.tolist()]
            )
        elif pos_pool.size > 0:
            pos_drawn = _draw(rng, pos_pool, n_pos)
        else:
            if counters is not None:
                counters["skipped_anchors"] = counters.get("skipped_anchors", 0) + 1
            return None
    return SampledSets(sets.anchor_index, pos_drawn, neg_drawn, synthesized)


# ---------------------------------------------------------------------------
# losses


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; returns (unit rows, norms). Norms are floored at a
    tiny epsilon so zero rows pass through as zeros."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), NORMALIZE_EPS)
    return x / norms, norms


def l2_normalize_grad(
    unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray
) -> np.ndarray:
    inner = (unit * d_unit).sum(axis=-1, keepdims=True)
    return (d_unit - unit * inner) / norms


@dataclass
class InfoNceResult:
    loss: float
    d_anchor: np.ndarray
    d_positives: np.ndarray
    d_negatives: np.ndarray


def info_nce(
    anchor: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> InfoNceResult:
    """Supervised InfoNCE: mean over positives of
    -log( exp(a.p/tau) / (exp(a.p/tau) + sum_n exp(a.n/tau)) ).

    Inputs are expected L2-normalized already. Each positive competes only
    against the negative set, never against other positives. With no
    negatives the loss is exactly zero. Log-sum-exp is shift-stabilized.
    """
    if tau <= 0:
        raise MiningError(f"temperature must be positive, got {tau}")
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, anchor.shape[0])
    num_pos = positives.shape[0]
    if num_pos == 0:
        raise MiningError("info_nce needs at least one positive")
    a_pos = positives @ anchor / tau
    a_neg = negatives @ anchor / tau
    if a_neg.size:
        lse_neg = np.logaddexp.reduce(a_neg)
        lse = np.logaddexp(a_pos, lse_neg)
    else:
        lse = a_pos.copy()
    loss = float(np.mean(lse - a_pos))

    # d loss / d a_pos[p] = (softmax weight of the positive - 1) / P
    w_pos = np.exp(a_pos - lse)
    coeff_pos = (w_pos - 1.0) / num_pos
    if a_neg.size:
        w_neg = np.exp(a_neg[np.newaxis, :] - lse[:, np.newaxis])
        coeff_neg = w_neg.sum(axis=0) / num_pos
    else:
        coeff_neg = np.zeros(0)
    d_anchor = (coeff_pos @ positives + coeff_neg @ negatives) / tau
    d_positives = coeff_pos[:, np.newaxis] * anchor / tau
    d_negatives = coeff_neg[:, np.newaxis] * anchor / tau
    return InfoNceResult(loss, d_anchor, d_positives, d_negatives)


@dataclass
class TotalLossResult:
    total: float
    ce: float
    cp: float
    d_scores: np.ndarray
    d_features: np.ndarray


def cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy from raw class scores; returns the
    gradient in the same shape."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise MiningError(
            f"scores must be (pixels, classes) with matching labels, got "
            f"{scores.shape} and {labels.shape}"
        )
    n, c = scores.shape
    if n == 0:
        raise MiningError("cross_entropy over zero pixels")
    if labels.min() < 0 or labels.max() >= c:
        raise MiningError(f"labels outside [0, {c})")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def total_loss(
    scores: np.ndarray,
    labels: np.ndarray,
    features: np.ndarray,
    plans: Sequence[SampledSets],
    tau: float = DEFAULT_TAU,
) -> TotalLossResult:
    """Combined objective: mean pixel cross-entropy plus the mean anchor
    InfoNCE, unit weights. ``features`` are raw fused vectors; they are
    L2-normalized here and gradients flow back through the normalization.
    With no anchors the contrastive term is zero."""
    ce, d_scores = cross_entropy(scores, labels)
    features = np.asarray(features, dtype=np.float64)
    if not plans:
        return TotalLossResult(ce, ce, 0.0, d_scores,
                               np.zeros_like(features))
    unit, norms = l2_normalize(features)
    d_unit = np.zeros_like(unit)
    cp_sum = 0.0
    k = len(plans)
    for plan in plans:
        pos = unit[plan.positive_indices]
        if plan.synthesized_positives is not None:
            synth_unit, _ = l2_normalize(plan.synthesized_positives)
            pos = np.concatenate([pos, synth_unit], axis=0) if pos.size else synth_unit
        res = info_nce(unit[plan.anchor_index], pos,
                       unit[plan.negative_indices], tau)
        cp_sum += res.loss
        d_unit[plan.anchor_index] += res.d_anchor / k
        n_real = len(plan.positive_indices)
        if n_real:
            np.add.at(d_unit, plan.positive_indices,
                      res.d_positives[:n_real] / k)
        if len(plan.negative_indices):
            np.add.at(d_unit, plan.negative_indices, res.d_negatives / k)
    cp = cp_sum / k
    d_features = l2_normalize_grad(unit, norms, d_unit)
    return TotalLossResult(ce + cp, ce, cp, d_scores, d_features)

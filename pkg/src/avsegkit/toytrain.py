"""Desk-scale training harness on synthetic audio-visual scenes.

Scenes are feature grids built from per-class prototype vectors plus noise.
Each scene contains a few rectangular objects; some sound (their class
appears in the audio token list, their pixels carry their class label) and
some are silent distractors (same visual features, labeled background).
Telling a sounding object from a silent one therefore requires the audio.

The model is deliberately tiny: linear visual and audio encoders into a
shared space, cross-attention fusion, and a linear per-pixel classifier.
Three loss modes train it: plain cross-entropy, cross-entropy plus a
label-only supervised contrastive term, and cross-entropy plus the full
audio-aware contrastive term (batch re-pairing, informative mining, memory
bank). All gradients are assembled analytically from the fusion and
contrast modules. Runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import contrast, metrics
from .fusion import FusionResult, ProjectionWeights, cross_attend, cross_attend_grad

LOSS_MODES = ("ce_only", "ce+supcon", "ce+cavp")


class ToyTrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Data and optimization settings for the toy harness."""

    # data
    num_classes: int = 4  # including background 0
    height: int = 8
    width: int = 8
    feature_dim: int = 8
    audio_dim: int = 8  # before the two position channels
    embed_dim: int = 8
    noise: float = 0.4
    distractor_rate: float = 1.0
    train_scenes: int = 24
    eval_scenes: int = 16
    # optimization
    epochs: int = 10
    batch_size: int = 4
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    tau: float = contrast.DEFAULT_TAU
    proportion: float = contrast.DEFAULT_PROPORTION
    budget: int = 32
    anchors_per_item: int = 48
    activation: str = "sigmoid"
    bank_capacity: int = contrast.DEFAULT_BANK_CAPACITY
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ToyTrainError("need at least one foreground class")
        if self.feature_dim < self.num_classes or self.audio_dim < self.num_classes:
            raise ToyTrainError(
                "feature_dim and audio_dim must be >= num_classes so class "
                "prototypes can be orthogonal"
            )

    @classmethod
    def from_kv(cls, kv: Mapping[str, str]) -> "TrainConfig":
        casts = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in kv.items():
            if key not in casts:
                raise ToyTrainError(f"unknown config key {key!r}")
            kind = casts[key]
            if kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        return cls(**values)

    def to_kv(self) -> str:
        lines = [f"{f.name} {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def poly_lr(lr0: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """lr0 * (1 - step/total) ** power; lr0 at step 0, zero at the end."""
    if total_steps <= 0:
        raise ToyTrainError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ToyTrainError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    features: np.ndarray  # (H, W, feature_dim)
    labels: np.ndarray  # (H, W) int64; silent distractors are background
    audio_tokens: np.ndarray  # (sounding objects, audio_dim + 2)
    sounding_classes: tuple[int, ...]  # aligned with audio_tokens rows
    audio_labels: frozenset[int]
    distractor_classes: frozenset[int]


def class_prototypes(num_classes: int, dim: int) -> np.ndarray:
    """Orthonormal prototype rows, fixed by (num_classes, dim) so separately
    generated scene sets share the same class geometry."""
    rng = np.random.default_rng([811, num_classes, dim])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:num_classes]


def gen_scenes(
    count: int,
    num_classes: int,
    height: int,
    width: int,
    noise: float,
    seed: int,
    distractor_rate: float = 1.0,
    feature_dim: int | None = None,
    audio_dim: int | None = None,
    stream: int = 0,
) -> list[SyntheticScene]:
    """Deterministic synthetic scenes. With ``noise`` 0 and no distractors
    the pixels are exactly their class prototypes, hence linearly separable.
    ``stream`` separates train/eval draws under one seed."""
    if count < 1:
        raise ToyTrainError("need at least one scene")
    feature_dim = feature_dim or max(8, num_classes)
    audio_dim = audio_dim or max(8, num_classes)
    vis_proto = class_prototypes(num_classes, feature_dim)
    aud_proto = class_prototypes(num_classes, audio_dim)
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, stream, i])
        max_objects = min(3, num_classes - 1)
        want_distractor = distractor_rate > 0 and rng.random() < distractor_rate
        k = int(rng.integers(2, max_objects + 1)) if (
            want_distractor and max_objects >= 2
        ) else int(rng.integers(1, max_objects + 1))
        classes = rng.choice(
            np.arange(1, num_classes), size=k, replace=False
        ).tolist()
        if want_distractor and k >= 2:
            n_sound = int(rng.integers(1, k))
        else:
            n_sound = k
        sound_flags = np.zeros(k, dtype=bool)
        sound_flags[rng.choice(k, size=n_sound, replace=False)] = True

        visual = np.zeros((height, width), dtype=np.int64)
        labels = np.zeros((height, width), dtype=np.int64)
        tokens = []
        sounding_classes = []
        distractors = []
        for j in range(k):
            h = int(rng.integers(2, max(3, height // 2) + 1))
            w = int(rng.integers(2, max(3, width // 2) + 1))
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            visual[top : top + h, left : left + w] = classes[j]
            if sound_flags[j]:
                labels[top : top + h, left : left + w] = classes[j]
                alpha = (left + w / 2.0) / width
                tokens.append(
                    np.concatenate(
                        [aud_proto[classes[j]], [1.0 - alpha, alpha]]
                    )
                )
                sounding_classes.append(classes[j])
            else:
                labels[top : top + h, left : left + w] = 0
                distractors.append(classes[j])
        features = vis_proto[visual] + noise * rng.standard_normal(
            (height, width, feature_dim)
        )
        scenes.append(
            SyntheticScene(
                features,
                labels,
                np.stack(tokens),
                tuple(sounding_classes),
                frozenset(sounding_classes),
                frozenset(distractors),
            )
        )
    return scenes


@dataclass
class ToyDataset:
    train: list[SyntheticScene]
    eval: list[SyntheticScene]
    num_classes: int


def make_dataset(config: TrainConfig) -> ToyDataset:
    common = dict(
        num_classes=config.num_classes,
        height=config.height,
        width=config.width,
        noise=config.noise,
        seed=config.seed,
        distractor_rate=config.distractor_rate,
        feature_dim=config.feature_dim,
        audio_dim=config.audio_dim,
    )
    return ToyDataset(
        gen_scenes(config.train_scenes, stream=0, **common),
        gen_scenes(config.eval_scenes, stream=1, **common),
        config.num_classes,
    )


# ---------------------------------------------------------------------------
# model


@dataclass
class ToyParams:
    w_vis: np.ndarray  # (feature_dim, embed_dim)
    w_aud: np.ndarray  # (audio_dim + 2, embed_dim)
    proj: ProjectionWeights
    w_cls: np.ndarray  # (embed_dim, num_classes)
    b_cls: np.ndarray  # (num_classes,)

    @classmethod
    def init(cls, config: TrainConfig, rng: np.random.Generator) -> "ToyParams":
        d = config.embed_dim
        return cls(
            w_vis=np.eye(config.feature_dim, d)
            + 0.01 * rng.standard_normal((config.feature_dim, d)),
            w_aud=np.eye(config.audio_dim + 2, d)
            + 0.01 * rng.standard_normal((config.audio_dim + 2, d)),
            proj=ProjectionWeights.identity(d),
            w_cls=0.01 * rng.standard_normal((d, config.num_classes)),
            b_cls=np.zeros(config.num_classes),
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.w_vis, self.w_aud, self.proj.wq, self.proj.wk,
                self.proj.wv, self.w_cls, self.b_cls]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, flat: np.ndarray) -> "ToyParams":
        want = sum(a.size for a in self.arrays())
        if flat.size != want:
            raise ToyTrainError(
                f"flat vector has {flat.size} values, expected {want}"
            )
        out = []
        pos = 0
        for a in self.arrays():
            out.append(flat[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return ToyParams(out[0], out[1], ProjectionWeights(*out[2:5]),
                         out[5], out[6])

    def zeros_like(self) -> "ToyParams":
        return self.from_flat(np.zeros(self.flatten().size))


@dataclass
class SceneForward:
    u_visual: np.ndarray  # (pixels, embed_dim)
    u_audio: np.ndarray  # (tokens, embed_dim)
    fusion: FusionResult
    fused: np.ndarray  # (pixels, embed_dim)
    scores: np.ndarray  # (pixels, classes)


def forward_scene(
    params: ToyParams,
    scene: SyntheticScene,
    config: TrainConfig,
    audio_tokens: np.ndarray | None = None,
) -> SceneForward:
    tokens = scene.audio_tokens if audio_tokens is None else audio_tokens
    flat = scene.features.reshape(-1, scene.features.shape[-1])
    u_v = flat @ params.w_vis
    u_a = tokens @ params.w_aud
    fusion = cross_attend(u_v, u_a, activation=config.activation,
                          weights=params.proj)
    fused = fusion.fused
    scores = fused @ params.w_cls + params.b_cls
    return SceneForward(u_v, u_a, fusion, fused, scores)


def predict(params: ToyParams, scene: SyntheticScene,
            config: TrainConfig) -> np.ndarray:
    fw = forward_scene(params, scene, config)
    return fw.scores.argmax(axis=1).reshape(scene.labels.shape)


def evaluate_miou(params: ToyParams, scenes: Sequence[SyntheticScene],
                  config: TrainConfig) -> float:
    t = metrics.tally_many(
        [predict(params, s, config) for s in scenes],
        [s.labels for s in scenes],
        config.num_classes,
    )
    return metrics.miou(t)


# ---------------------------------------------------------------------------
# step plan: every random choice and mined set for one update, fixed before
# the differentiable part so the loss is a deterministic function of params


@dataclass
class StepPlan:
    loss_mode: str
    permutation: np.ndarray | None = None
    pixel_indices: list[np.ndarray] | None = None
    sampled: list[contrast.SampledSets] = field(default_factory=list)


def _label_pool(
    scenes: Sequence[SyntheticScene],
    permutation: np.ndarray,
    pixel_indices: Sequence[np.ndarray],
    num_classes: int,
) -> contrast.RecordPool:
    # mining only needs labels and origins; features are filled with dummies
    labels = []
    sets_ = []
    origins = []
    for i, scene in enumerate(scenes):
        raster = scene.labels.reshape(-1)
        t = frozenset(scenes[permutation[i]].audio_labels)
        for p in pixel_indices[i].tolist():
            origins.append((i, p))
            sets_.append(t)
        labels.append(raster[pixel_indices[i]])
    n = len(origins)
    return contrast.RecordPool(
        np.zeros((n, 1)), sets_, np.concatenate(labels), origins, num_classes
    )


def _subsample_pixels(
    scenes: Sequence[SyntheticScene], rng: np.random.Generator, cap: int
) -> list[np.ndarray]:
    out = []
    for scene in scenes:
        n = scene.labels.size
        if n > cap:
            out.append(np.sort(rng.choice(n, size=cap, replace=False)))
        else:
            out.append(np.arange(n))
    return out


def _synth_positive(
    params: ToyParams, scene: SyntheticScene, pixel: int, token: np.ndarray,
    config: TrainConfig,
) -> np.ndarray:
    """Re-pair one pixel with a bank token through the audio/fusion path."""
    flat = scene.features.reshape(-1, scene.features.shape[-1])
    u_v = flat[pixel : pixel + 1] @ params.w_vis
    u_a = token[np.newaxis, :] @ params.w_aud
    fused = cross_attend(u_v, u_a, activation=config.activation,
                         weights=params.proj, keep_cache=False)
    return fused.fused[0]


def make_step_plan(
    params: ToyParams,
    scenes: Sequence[SyntheticScene],
    rng: np.random.Generator,
    config: TrainConfig,
    loss_mode: str,
    bank: contrast.MemoryBank | None = None,
    counters: dict | None = None,
) -> StepPlan:
    if loss_mode not in LOSS_MODES:
        raise ToyTrainError(
            f"unknown loss mode {loss_mode!r}, expected one of {LOSS_MODES}"
        )
    if loss_mode == "ce_only":
        return StepPlan(loss_mode)
    batch = len(scenes)
    if loss_mode == "ce+supcon":
        permutation = np.arange(batch)
    else:
        permutation = rng.permutation(batch)
    pixel_indices = _subsample_pixels(scenes, rng, config.anchors_per_item)
    pool = _label_pool(scenes, permutation, pixel_indices, config.num_classes)
    sampled = []
    if loss_mode == "ce+supcon":
        anchor_indices = range(len(pool))
        for a in anchor_indices:
            sets = contrast.mine_label_sets(pool, a)
            if sets.negatives().size == 0:
                if counters is not None:
                    counters["no_negative_anchors"] = (
                        counters.get("no_negative_anchors", 0) + 1
                    )
                continue
            drawn = contrast.balance(
                sets, rng, config.proportion, config.budget, counters=counters
            )
            if drawn is not None:
                sampled.append(drawn)
    else:
        partition = contrast.partition_anchors(pool)
        for a in np.nonzero(partition.fg_mask | partition.bg_mask)[0].tolist():
            sets = contrast.mine_sets(pool, partition, a)
            if sets.negatives().size == 0:
                if counters is not None:
                    counters["no_negative_anchors"] = (
                        counters.get("no_negative_anchors", 0) + 1
                    )
                continue
            item, pixel = pool.origins[a]
            drawn = contrast.balance(
                sets,
                rng,
                config.proportion,
                config.budget,
                bank=bank,
                synthesize=lambda token, _s=scenes[item], _p=pixel: _synth_positive(
                    params, _s, _p, token, config
                ),
                counters=counters,
            )
            if drawn is not None:
                sampled.append(drawn)
    return StepPlan(loss_mode, permutation, pixel_indices, sampled)


@dataclass
class StepResult:
    loss: float
    ce: float
    cp: float
    grads: ToyParams


def loss_and_grads(
    params: ToyParams,
    scenes: Sequence[SyntheticScene],
    plan: StepPlan,
    config: TrainConfig,
) -> StepResult:
    """Objective value and analytic parameter gradients for one batch under
    a fixed plan. Synthesized positives in the plan are constants."""
    originals = [forward_scene(params, s, config) for s in scenes]
    scores = np.concatenate([f.scores for f in originals], axis=0)
    labels = np.concatenate([s.labels.reshape(-1) for s in scenes])

    permuted: list[SceneForward] | None = None
    features = np.zeros((0, config.embed_dim))
    if plan.sampled:
        if plan.loss_mode == "ce+supcon":
            features = np.concatenate(
                [
                    originals[i].fused[plan.pixel_indices[i]]
                    for i in range(len(scenes))
                ],
                axis=0,
            )
        else:
            permuted = [
                forward_scene(
                    params, s, config,
                    audio_tokens=scenes[plan.permutation[i]].audio_tokens,
                )
                for i, s in enumerate(scenes)
            ]
            features = np.concatenate(
                [
                    permuted[i].fused[plan.pixel_indices[i]]
                    for i in range(len(scenes))
                ],
                axis=0,
            )

    res = contrast.total_loss(scores, labels, features, plan.sampled, config.tau)

    grads = params.zeros_like()
    pixel_counts = [s.labels.size for s in scenes]
    offsets = np.cumsum([0] + pixel_counts)
    record_offsets = None
    if plan.sampled:
        lens = [len(ix) for ix in plan.pixel_indices]
        record_offsets = np.cumsum([0] + lens)

    for i, scene in enumerate(scenes):
        fw = originals[i]
        d_scores_i = res.d_scores[offsets[i] : offsets[i + 1]]
        d_fused = d_scores_i @ params.w_cls.T
        grads.w_cls += fw.fused.T @ d_scores_i
        grads.b_cls += d_scores_i.sum(axis=0)
        if plan.sampled and plan.loss_mode == "ce+supcon":
            rows = res.d_features[record_offsets[i] : record_offsets[i + 1]]
            np.add.at(d_fused, plan.pixel_indices[i], rows)
        g = cross_attend_grad(fw.fusion, d_fused)
        flat = scene.features.reshape(-1, scene.features.shape[-1])
        grads.w_vis += flat.T @ g.d_visual
        grads.w_aud += scene.audio_tokens.T @ g.d_audio
        grads.proj.wq += g.d_weights.wq
        grads.proj.wk += g.d_weights.wk
        grads.proj.wv += g.d_weights.wv

    if permuted is not None:
        for i, scene in enumerate(scenes):
            rows = res.d_features[record_offsets[i] : record_offsets[i + 1]]
            d_fused = np.zeros_like(permuted[i].fused)
            np.add.at(d_fused, plan.pixel_indices[i], rows)
            g = cross_attend_grad(permuted[i].fusion, d_fused)
            flat = scene.features.reshape(-1, scene.features.shape[-1])
            grads.w_vis += flat.T @ g.d_visual
            tokens = scenes[plan.permutation[i]].audio_tokens
            grads.w_aud += tokens.T @ g.d_audio
            grads.proj.wq += g.d_weights.wq
            grads.proj.wk += g.d_weights.wk
            grads.proj.wv += g.d_weights.wv

    return StepResult(res.total, res.ce, res.cp, grads)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TraceRow:
    epoch: int
    lr: float
    ce: float
    cp: float
    miou: float


def trace_lines(trace: Sequence[TraceRow]) -> list[str]:
    # repr keeps full float precision so the trace is diffable bit for bit
    return [
        f"epoch {r.epoch} lr {r.lr!r} ce {r.ce!r} cp {r.cp!r} miou {r.miou!r}"
        for r in trace
    ]


@dataclass
class TrainResult:
    params: ToyParams
    trace: list[TraceRow]
    counters: dict
    final_miou: float


def train(dataset: ToyDataset, config: TrainConfig, loss_mode: str) -> TrainResult:
    """SGD with momentum, weight decay, and polynomial lr decay.

    Single-threaded and deterministic for a fixed seed. Raises
    TrainingDiverged on a non-finite loss.
    """
    if loss_mode not in LOSS_MODES:
        raise ToyTrainError(
            f"unknown loss mode {loss_mode!r}, expected one of {LOSS_MODES}"
        )
    rng = np.random.default_rng([config.seed, 3])
    params = ToyParams.init(config, rng)
    velocity = params.zeros_like()
    bank = (
        contrast.MemoryBank(config.bank_capacity)
        if loss_mode == "ce+cavp"
        else None
    )
    counters: dict = {}
    scenes = dataset.train
    steps_per_epoch = max(1, math.ceil(len(scenes) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        epoch_lr = poly_lr(config.lr0, step, total_steps, config.poly_power)
        ce_sum = 0.0
        cp_sum = 0.0
        for b in range(steps_per_epoch):
            batch_ids = order[b * config.batch_size : (b + 1) * config.batch_size]
            if batch_ids.size == 0:
                continue
            batch = [scenes[i] for i in batch_ids.tolist()]
            if bank is not None:
                for s in batch:
                    for c, token in zip(s.sounding_classes, s.audio_tokens):
                        bank.push(c, token)
            plan = make_step_plan(
                params, batch, rng, config, loss_mode, bank, counters
            )
            result = loss_and_grads(params, batch, plan, config)
            if not math.isfinite(result.loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {b}: "
                    f"ce {result.ce} cp {result.cp}"
                )
            lr = poly_lr(config.lr0, step, total_steps, config.poly_power)
            flat_p = params.flatten()
            flat_g = result.grads.flatten() + config.weight_decay * flat_p
            flat_v = config.momentum * velocity.flatten() + flat_g
            velocity = velocity.from_flat(flat_v)
            params = params.from_flat(flat_p - lr * flat_v)
            ce_sum += result.ce
            cp_sum += result.cp
            step += 1
        trace.append(
            TraceRow(
                epoch,
                epoch_lr,
                ce_sum / steps_per_epoch,
                cp_sum / steps_per_epoch,
                evaluate_miou(params, dataset.eval, config),
            )
        )
    return TrainResult(params, trace, counters, trace[-1].miou)


def compare_loss_modes(
    config: TrainConfig, seeds: Sequence[int]
) -> dict[str, list[float]]:
    """Final eval scores per loss mode across seeds (one dataset per seed)."""
    out: dict[str, list[float]] = {m: [] for m in LOSS_MODES}
    for seed in seeds:
        cfg = replace(config, seed=seed)
        dataset = make_dataset(cfg)
        for mode in LOSS_MODES:
            out[mode].append(train(dataset, cfg, mode).final_miou)
    return out

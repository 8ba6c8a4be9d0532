"""Benchmark synthesis: pair annotated images with class-matched audio.

Three subset flavors share one pipeline:

  ss    exactly one sounding instance per image
  ms    images without duplicated classes; every instance starts sounding
  msmi  images with at least one duplicated class; duplicates are told
        apart only by the stereo position of their clips

Sounding instances beyond a small count are randomly silenced (the silenced
instances keep their pixels labeled background), each clip is panned by the
instance mask's horizontal center over the image width, and the panned
clips are mixed into one stereo track per image. Every random draw for an
image comes from a stream keyed by (global seed, image id), so results are
independent of processing order and thread count.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import audio as audio_mod
from .annotations import AnnotationError, ClassTable, SceneSample, center_of_mass

SUBSETS = ("ss", "ms", "msmi")
DEFAULT_P_DROP = 0.5
DEFAULT_DROP_THRESHOLD = 2  # silencing starts above this many sounding objects
MAX_SOUNDING = 5

# documented corpus proportions used as per-subset split defaults
DEFAULT_TEST_FRACTION = {
    "ss": 890 / 12202,
    "ms": 1437 / 9817,
    "msmi": 1775 / 12855,
}


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRef:
    path: str
    duration: float


class AudioPool:
    """Audio tags mapped to their available clips."""

    def __init__(self, clips: Mapping[str, Sequence[ClipRef]],
                 table: ClassTable | None = None):
        self.clips = {tag: tuple(refs) for tag, refs in clips.items()}
        if table is not None:
            known = table.all_audio_tags()
            foreign = sorted(set(self.clips) - known)
            if foreign:
                raise BuildError(f"audio index has unknown tags: {foreign}")

    def __contains__(self, tag: str) -> bool:
        return tag in self.clips and len(self.clips[tag]) > 0

    def get(self, tag: str) -> tuple[ClipRef, ...]:
        return self.clips.get(tag, ())

    # index file: tag, path, duration; tab-separated, one clip per line
    @classmethod
    def from_index_text(cls, text: str, table: ClassTable | None = None):
        clips: dict[str, list[ClipRef]] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise BuildError(
                    f"audio index line {lineno}: expected 3 tab-separated "
                    f"fields, got {len(parts)}"
                )
            tag, path, duration_text = parts
            try:
                duration = float(duration_text)
            except ValueError:
                raise BuildError(
                    f"audio index line {lineno}: bad duration "
                    f"{duration_text!r}"
                ) from None
            clips.setdefault(tag, []).append(ClipRef(path, duration))
        return cls(clips, table)

    def to_index_text(self) -> str:
        lines = []
        for tag in sorted(self.clips):
            for ref in self.clips[tag]:
                lines.append(f"{tag}\t{ref.path}\t{ref.duration}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SoundingInstance:
    instance_id: int
    class_id: int
    clip: str
    alpha: float
    gain_left: float
    gain_right: float


@dataclass
class ManifestEntry:
    image_id: int
    subset: str
    split: str  # 'train' | 'test' | '' before splitting
    sounding: tuple[SoundingInstance, ...]
    silent_instances: tuple[int, ...]
    mixed_audio: str

    def sounding_classes(self) -> tuple[int, ...]:
        return tuple(s.class_id for s in self.sounding)

    def to_json(self) -> str:
        doc = {
            "image_id": self.image_id,
            "subset": self.subset,
            "split": self.split,
            "sounding": [
                {
                    "instance_id": s.instance_id,
                    "class_id": s.class_id,
                    "clip": s.clip,
                    "alpha": s.alpha,
                    "gain_left": s.gain_left,
                    "gain_right": s.gain_right,
                }
                for s in self.sounding
            ],
            "silent_instances": list(self.silent_instances),
            "mixed_audio": self.mixed_audio,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        doc = json.loads(line)
        return cls(
            image_id=int(doc["image_id"]),
            subset=doc["subset"],
            split=doc["split"],
            sounding=tuple(
                SoundingInstance(
                    int(s["instance_id"]), int(s["class_id"]), s["clip"],
                    float(s["alpha"]), float(s["gain_left"]),
                    float(s["gain_right"]),
                )
                for s in doc["sounding"]
            ),
            silent_instances=tuple(int(i) for i in doc["silent_instances"]),
            mixed_audio=doc["mixed_audio"],
        )


# ---------------------------------------------------------------------------
# selection


def eligible(scene: SceneSample, mode: str) -> bool:
    _check_mode(mode)
    if not scene.instances:
        return False
    if mode == "ms":
        return not scene.has_duplicate_class
    if mode == "msmi":
        return scene.has_duplicate_class
    return True


def score_image(scene: SceneSample, mode: str) -> tuple:
    """Sort key: eligible first, higher class diversity first, then image id."""
    return (
        0 if eligible(scene, mode) else 1,
        -len(scene.distinct_classes),
        scene.image_id,
    )


def _check_mode(mode: str) -> None:
    if mode not in SUBSETS:
        raise BuildError(f"unknown subset mode {mode!r}, expected one of {SUBSETS}")


def item_rng(seed: int, image_id: int) -> np.random.Generator:
    """The per-image random stream; keyed so item order never matters."""
    return np.random.default_rng([seed, image_id])


def _pick_clip(
    rng: np.random.Generator, pool: AudioPool, table: ClassTable, class_id: int
) -> str:
    tags = table.audio_tags(class_id)
    candidates = [(tag, ref) for tag in tags for ref in pool.get(tag)]
    if not candidates:
        raise BuildError(
            f"no clips available for tags {list(tags)} "
            f"(class {table[class_id].visual_label})"
        )
    tag, ref = candidates[int(rng.integers(len(candidates)))]
    return ref.path


def assign_audio(
    scene: SceneSample,
    mode: str,
    rng: np.random.Generator,
    pool: AudioPool,
    table: ClassTable,
    max_sounding: int = MAX_SOUNDING,
) -> ManifestEntry:
    """Choose sounding instances and their clips for one image.

    ss picks exactly one instance uniformly among those with an audio-capable
    class; the other modes start with every instance sounding (capped at
    ``max_sounding``, uniform subset beyond). Each sounding instance draws a
    clip uniformly over all (tag, clip) pairs of its class, and its pan
    position comes from the mask's horizontal center of mass.
    """
    _check_mode(mode)
    if not eligible(scene, mode):
        raise BuildError(
            f"image {scene.image_id} is not eligible for mode {mode}"
        )
    capable = [m for m in scene.instances if m.class_id in table]
    if not capable:
        raise BuildError(
            f"image {scene.image_id}: no instance has an audio-capable class"
        )
    if mode == "ss":
        chosen = [capable[int(rng.integers(len(capable)))]]
    else:
        chosen = list(capable)
        if len(chosen) > max_sounding:
            keep = rng.choice(len(chosen), size=max_sounding, replace=False)
            chosen = [chosen[i] for i in sorted(keep.tolist())]
    sounding = []
    for m in chosen:
        clip = _pick_clip(rng, pool, table, m.class_id)
        mask = m.decode(scene.height, scene.width)
        _, col = center_of_mass(mask)
        alpha = audio_mod.pan_alpha(col, scene.width)
        sounding.append(
            SoundingInstance(
                m.instance_id, m.class_id, clip, alpha, 1.0 - alpha, alpha
            )
        )
    chosen_ids = {s.instance_id for s in sounding}
    silent = tuple(
        m.instance_id for m in scene.instances if m.instance_id not in chosen_ids
    )
    return ManifestEntry(
        image_id=scene.image_id,
        subset=mode,
        split="",
        sounding=tuple(sounding),
        silent_instances=silent,
        mixed_audio=f"audio/{scene.image_id}.wav",
    )


def drop_sounds(
    entry: ManifestEntry,
    rng: np.random.Generator,
    p_drop: float = DEFAULT_P_DROP,
    threshold: int = DEFAULT_DROP_THRESHOLD,
) -> ManifestEntry:
    """Randomly silence sounding instances when more than ``threshold`` sound.

    One uniformly chosen instance is guaranteed to survive; every other one
    is dropped independently with probability ``p_drop``. Dropped instances
    move to the silent list. At or below the threshold the entry is
    returned unchanged.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise BuildError(f"p_drop must lie in [0, 1], got {p_drop}")
    n = len(entry.sounding)
    if n <= threshold:
        return entry
    survivor = int(rng.integers(n))
    kept = []
    dropped = []
    for i, s in enumerate(entry.sounding):
        if i == survivor or rng.random() >= p_drop:
            kept.append(s)
        else:
            dropped.append(s.instance_id)
    return replace(
        entry,
        sounding=tuple(kept),
        silent_instances=tuple(sorted(entry.silent_instances + tuple(dropped))),
    )


# ---------------------------------------------------------------------------
# split and stats


def dominant_class(entry: ManifestEntry) -> int:
    """Most frequent sounding class; ties break toward the smaller id."""
    if not entry.sounding:
        raise BuildError(f"entry {entry.image_id} has no sounding instances")
    counts = Counter(entry.sounding_classes())
    return min(counts, key=lambda c: (-counts[c], c))


def split_entries(
    entries: Sequence[ManifestEntry], test_fraction: float, seed: int
) -> list[ManifestEntry]:
    """Deterministic train/test split, stratified by dominant class.

    The overall test count is round(fraction * n) exactly; per-class counts
    follow largest-remainder rounding of the per-class ideals.
    """
    if not 0.0 < test_fraction < 1.0:
        raise BuildError(
            f"test fraction must lie in (0, 1), got {test_fraction}"
        )
    entries = sorted(entries, key=lambda e: e.image_id)
    n = len(entries)
    if n == 0:
        return []
    target = int(round(test_fraction * n))
    groups: dict[int, list[ManifestEntry]] = {}
    for e in entries:
        groups.setdefault(dominant_class(e), []).append(e)
    keys = sorted(groups)
    floors = {c: int(math.floor(test_fraction * len(groups[c]))) for c in keys}
    remainder = target - sum(floors.values())
    by_frac = sorted(
        keys,
        key=lambda c: (-(test_fraction * len(groups[c]) - floors[c]), c),
    )
    for c in by_frac:
        if remainder <= 0:
            break
        if floors[c] < len(groups[c]):
            floors[c] += 1
            remainder -= 1
    rng = np.random.default_rng([seed, 2**31])  # split stream, distinct from items
    out = []
    for c in keys:
        group = groups[c]
        order = rng.permutation(len(group))
        test_ids = {group[i].image_id for i in order[: floors[c]]}
        for e in group:
            out.append(
                replace(e, split="test" if e.image_id in test_ids else "train")
            )
    return sorted(out, key=lambda e: e.image_id)


@dataclass
class DatasetStats:
    class_counts: dict[int, int]
    imbalance_ratio: float
    subset_counts: dict[str, int]
    split_counts: dict[str, int]

    def lines(self, table: ClassTable | None = None) -> list[str]:
        out = []
        for c in sorted(self.class_counts):
            label = table[c].visual_label if table is not None else f"class {c}"
            out.append(f"{label}: {self.class_counts[c]}")
        out.append(f"imbalance_ratio {self.imbalance_ratio:.6f}")
        for subset in sorted(self.subset_counts):
            out.append(f"subset {subset}: {self.subset_counts[subset]}")
        for split in sorted(self.split_counts):
            out.append(f"split {split}: {self.split_counts[split]}")
        return out


def dataset_stats(entries: Sequence[ManifestEntry]) -> DatasetStats:
    """Sounding-instance counts per class; imbalance is max/min over the
    classes that appear (1.0 when only one class appears)."""
    if not entries:
        raise BuildError("stats over an empty manifest")
    counts: Counter = Counter()
    subsets: Counter = Counter()
    splits: Counter = Counter()
    for e in entries:
        counts.update(e.sounding_classes())
        subsets[e.subset] += 1
        if e.split:
            splits[e.split] += 1
    if not counts:
        raise BuildError("manifest has no sounding instances")
    values = list(counts.values())
    return DatasetStats(
        dict(sorted(counts.items())),
        max(values) / min(values),
        dict(sorted(subsets.items())),
        dict(sorted(splits.items())),
    )


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderedSample:
    sounding_mask: np.ndarray  # bool, union of sounding instances
    label_raster: np.ndarray  # uint8 class indices, silent objects are 0
    audio: audio_mod.Waveform  # mixed stereo track
    audio_labels: frozenset[int]


def render_entry(
    entry: ManifestEntry,
    scenes_by_id: Mapping[int, SceneSample],
    audio_root,
    clip_seconds: float = audio_mod.CLIP_SECONDS,
) -> RenderedSample:
    """Materialize one entry: label raster from the sounding masks and the
    stereo mix of the panned clips. Silent instances render as background."""
    if entry.image_id not in scenes_by_id:
        raise BuildError(f"manifest references unknown image {entry.image_id}")
    scene = scenes_by_id[entry.image_id]
    by_instance = {m.instance_id: m for m in scene.instances}
    label = np.zeros((scene.height, scene.width), dtype=np.uint8)
    mask_union = np.zeros((scene.height, scene.width), dtype=bool)
    tracks = []
    audio_root = Path(audio_root)
    for s in entry.sounding:
        if s.instance_id not in by_instance:
            raise BuildError(
                f"image {entry.image_id}: sounding instance {s.instance_id} "
                f"not in annotations"
            )
        m = by_instance[s.instance_id]
        raster = m.decode(scene.height, scene.width)
        # painted in instance order; later instances overwrite overlaps
        label[raster] = s.class_id
        mask_union |= raster
        clip_path = audio_root / s.clip
        try:
            clip = audio_mod.load_wav(clip_path.read_bytes())
        except FileNotFoundError:
            raise BuildError(f"missing audio clip {clip_path}") from None
        mono = clip if clip.channels == 1 else audio_mod.Waveform(
            clip.data.mean(axis=0, keepdims=True)
        )
        panned = audio_mod.apply_pan(
            audio_mod.trim(mono, clip_seconds), s.alpha
        )
        tracks.append(panned)
    if not tracks:
        raise BuildError(f"image {entry.image_id}: no sounding instances")
    return RenderedSample(
        mask_union,
        label,
        audio_mod.mix(tracks),
        frozenset(entry.sounding_classes()),
    )


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class BuildConfig:
    p_drop: float = DEFAULT_P_DROP
    drop_threshold: int = DEFAULT_DROP_THRESHOLD
    max_sounding: int = MAX_SOUNDING
    test_fraction: float | None = None  # None -> per-subset default
    max_samples: int | None = None

    @classmethod
    def from_kv(cls, kv: Mapping[str, str]) -> "BuildConfig":
        cfg = cls()
        casts = {
            "p_drop": float,
            "drop_threshold": int,
            "max_sounding": int,
            "test_fraction": float,
            "max_samples": int,
        }
        for key, value in kv.items():
            if key not in casts:
                raise BuildError(f"unknown build config key {key!r}")
            setattr(cfg, key, casts[key](value))
        return cfg


def build_manifest(
    scenes: Sequence[SceneSample],
    pool: AudioPool,
    mode: str,
    seed: int,
    table: ClassTable,
    config: BuildConfig | None = None,
) -> list[ManifestEntry]:
    """Full pipeline to a split manifest, a pure function of its inputs."""
    _check_mode(mode)
    config = config or BuildConfig()
    chosen = sorted(
        (s for s in scenes if eligible(s, mode)),
        key=lambda s: score_image(s, mode),
    )
    if config.max_samples is not None:
        chosen = chosen[: config.max_samples]
    entries = []
    for scene in chosen:
        rng = item_rng(seed, scene.image_id)
        entry = assign_audio(scene, mode, rng, pool, table, config.max_sounding)
        if mode in ("ms", "msmi"):
            entry = drop_sounds(entry, rng, config.p_drop, config.drop_threshold)
        entries.append(entry)
    if not entries:
        return []
    fraction = (
        config.test_fraction
        if config.test_fraction is not None
        else DEFAULT_TEST_FRACTION[mode]
    )
    return split_entries(entries, fraction, seed)


def validate_manifest(
    entries: Sequence[ManifestEntry],
    mode: str | None = None,
    scenes_by_id: Mapping[int, SceneSample] | None = None,
) -> list[str]:
    """Return invariant violations (empty list means the manifest passes)."""
    problems = []
    seen = set()
    for e in entries:
        where = f"image {e.image_id}"
        if e.image_id in seen:
            problems.append(f"{where}: duplicate image id")
        seen.add(e.image_id)
        if mode is not None and e.subset != mode:
            problems.append(f"{where}: subset {e.subset!r} != {mode!r}")
        if e.subset not in SUBSETS:
            problems.append(f"{where}: unknown subset {e.subset!r}")
        if e.split not in ("train", "test"):
            problems.append(f"{where}: unassigned split {e.split!r}")
        n = len(e.sounding)
        if n < 1:
            problems.append(f"{where}: no sounding instances")
        if e.subset == "ss" and n != 1:
            problems.append(f"{where}: ss entry with {n} sounding instances")
        if e.subset in ("ms", "msmi") and n > MAX_SOUNDING:
            problems.append(
                f"{where}: {n} sounding instances exceeds {MAX_SOUNDING}"
            )
        classes = e.sounding_classes()
        if e.subset == "ms" and len(set(classes)) != len(classes):
            problems.append(f"{where}: ms entry repeats a class")
        sound_ids = [s.instance_id for s in e.sounding]
        if len(set(sound_ids)) != len(sound_ids):
            problems.append(f"{where}: repeated sounding instance id")
        overlap = set(sound_ids) & set(e.silent_instances)
        if overlap:
            problems.append(f"{where}: instances both sounding and silent: "
                            f"{sorted(overlap)}")
        for s in e.sounding:
            if not 0.0 <= s.alpha <= 1.0:
                problems.append(
                    f"{where}: instance {s.instance_id} alpha {s.alpha} "
                    f"outside [0, 1]"
                )
            if not (
                math.isclose(s.gain_left, 1.0 - s.alpha, abs_tol=1e-12)
                and math.isclose(s.gain_right, s.alpha, abs_tol=1e-12)
            ):
                problems.append(
                    f"{where}: instance {s.instance_id} gains do not match "
                    f"the linear pan law"
                )
        if scenes_by_id is not None:
            if e.image_id not in scenes_by_id:
                problems.append(f"{where}: not present in annotations")
            else:
                scene = scenes_by_id[e.image_id]
                known = {m.instance_id for m in scene.instances}
                for iid in (*sound_ids, *e.silent_instances):
                    if iid not in known:
                        problems.append(
                            f"{where}: instance {iid} not in annotations"
                        )
                scene_classes = scene.distinct_classes
                for s in e.sounding:
                    if s.class_id not in scene_classes:
                        problems.append(
                            f"{where}: sounding class {s.class_id} absent "
                            f"from the image"
                        )
    return problems


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    text = "".join(e.to_json() + "\n" for e in entries)
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            entries.append(ManifestEntry.from_json(line))
        except (KeyError, ValueError) as exc:
            raise BuildError(f"manifest line {lineno}: {exc}") from None
    return entries

#!/usr/bin/env python3
"""Generate a small self-contained demo corpus and build every subset.

Writes under --out:

  corpus/clips/*.wav    one synthetic clip per audio tag
  corpus/index.tsv      tag -> clip index for the builder
  corpus/scenes.json    COCO-style annotations with RLE rectangle masks
  ss/ ms/ msmi/         built benchmark subsets (manifest, audio, labels)

Everything is derived from --seed, so two runs with the same arguments
produce identical bytes.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from avsegkit.annotations import (
    InstanceMask,
    SceneSample,
    default_class_table,
    encode_rle,
    serialize_annotations,
)
from avsegkit.audio import SAMPLE_RATE, Waveform, write_wav
from avsegkit.builder import SUBSETS, AudioPool, ClipRef
from avsegkit.cli import main as cli_main


def write_clips(root: Path, table, class_ids, seconds: float) -> AudioPool:
    clip_dir = root / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    for cid in class_ids:
        for j, tag in enumerate(table.audio_tags(cid)):
            rng = np.random.default_rng([23, cid, j])
            # a class-keyed tone under mild noise, snapped to the PCM grid
            freq = 120.0 * cid + 40.0 * j
            raw = 0.35 * np.sin(2 * np.pi * freq * t)
            raw += 0.1 * rng.uniform(-1, 1, size=n)
            data = np.round(np.clip(raw, -1, 1) * 32767) / 32768.0
            slug = "".join(ch if ch.isalnum() else "_" for ch in tag)
            name = f"{cid:02d}_{slug}.wav"
            (clip_dir / name).write_bytes(write_wav(Waveform(data)))
            index.setdefault(tag, []).append(
                ClipRef(f"clips/{name}", seconds)
            )
    return AudioPool(index, table)


def rect(height, width, rows, cols):
    raster = np.zeros((height, width), dtype=bool)
    raster[rows[0]:rows[1], cols[0]:cols[1]] = True
    return raster


def random_scenes(rng, count, class_ids, height, width):
    scenes = []
    for image_id in range(1, count + 1):
        duplicate = rng.random() < 0.35
        if duplicate:
            cid = int(rng.choice(class_ids))
            chosen = [cid, cid]
            if rng.random() < 0.5:
                chosen.append(int(rng.choice(class_ids)))
        else:
            k = int(rng.integers(1, 4))
            chosen = rng.choice(class_ids, size=k, replace=False).tolist()
        instances = []
        for j, cid in enumerate(chosen):
            h = int(rng.integers(height // 4, height // 2 + 1))
            w = int(rng.integers(width // 4, width // 2 + 1))
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            instances.append(InstanceMask(
                j + 1, int(cid), "rle",
                encode_rle(rect(height, width, (top, top + h),
                                (left, left + w))),
            ))
        scenes.append(SceneSample(image_id, width, height, tuple(instances)))
    return scenes


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--images", type=int, default=40)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=16,
                        help="scene height and width in pixels")
    parser.add_argument("--clip-seconds", type=float, default=2.0)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    out = Path(args.out)
    corpus = out / "corpus"
    table = default_class_table()
    class_ids = [e.class_id for e in table.entries][:8]

    pool = write_clips(corpus, table, class_ids, args.clip_seconds)
    (corpus / "index.tsv").write_text(pool.to_index_text(), encoding="utf-8")

    rng = np.random.default_rng([args.seed, 1])
    scenes = random_scenes(rng, args.images, class_ids, args.size, args.size)
    (corpus / "scenes.json").write_bytes(serialize_annotations(scenes))
    print(f"wrote {len(scenes)} scenes and "
          f"{sum(len(v) for v in pool.clips.values())} clips under {corpus}")

    for mode in SUBSETS:
        argv = [
            "build",
            "--scenes", str(corpus / "scenes.json"),
            "--audio-index", str(corpus / "index.tsv"),
            "--mode", mode,
            "--seed", str(args.seed),
            "--out", str(out / mode),
        ]
        if args.force:
            argv.append("--force")
        rc = cli_main(argv)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())

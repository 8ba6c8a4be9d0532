"""Command-line front end.

Subcommands write data only under their declared output paths and log to
standard error. Every command that draws randomness takes an explicit
--seed (or reads one from its config file); there is no ambient entropy,
so a given invocation always produces identical bytes. Commands that
populate an output directory refuse to reuse a non-empty one without
--force.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import audio as audio_mod
from . import builder, contrast, metrics, toytrain
from .annotations import ClassTable, default_class_table, parse_annotations


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_table(path: str | None) -> ClassTable:
    if path is None:
        return default_class_table()
    return ClassTable.from_table_text(Path(path).read_text(encoding="utf-8"))


def _parse_kv_file(path) -> dict[str, str]:
    """Flat key-value config: one 'key value' (or 'key=value') pair per line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        else:
            key, _, value = line.partition(" ")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ValueError(f"config line {lineno}: cannot parse {raw!r}")
        out[key] = value
    return out


def _prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(
            f"output directory {path} is not empty; pass --force to reuse it"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# build


def _render_one(entry, scenes_by_id, audio_root, out_dir):
    rendered = builder.render_entry(entry, scenes_by_id, audio_root)
    wav_path = out_dir / entry.mixed_audio
    wav_path.write_bytes(audio_mod.write_wav(rendered.audio))
    png_path = out_dir / "labels" / f"{entry.image_id}.png"
    Image.fromarray(rendered.label_raster, mode="L").save(png_path, format="PNG")
    return entry.image_id


def cmd_build(args) -> int:
    table = _load_table(args.classes)
    scenes = parse_annotations(Path(args.scenes).read_bytes(), table)
    index_path = Path(args.audio_index)
    pool = builder.AudioPool.from_index_text(
        index_path.read_text(encoding="utf-8"), table
    )
    config = builder.BuildConfig.from_kv(
        _parse_kv_file(args.config) if args.config else {}
    )
    out_dir = _prepare_out(args.out, args.force)
    entries = builder.build_manifest(
        scenes, pool, args.mode, args.seed, table, config
    )
    manifest_path = out_dir / "manifest.jsonl"
    if not entries:
        _log(f"warning: no eligible images for mode {args.mode}; "
             f"writing an empty manifest")
        manifest_path.write_text("", encoding="utf-8")
        return 0
    problems = builder.validate_manifest(
        entries, args.mode, {s.image_id: s for s in scenes}
    )
    if problems:
        for p in problems:
            _log(f"invalid manifest: {p}")
        return 1
    builder.write_manifest(entries, manifest_path)
    (out_dir / "audio").mkdir(exist_ok=True)
    (out_dir / "labels").mkdir(exist_ok=True)
    scenes_by_id = {s.image_id: s for s in scenes}
    audio_root = index_path.parent
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool_exec:
            list(
                pool_exec.map(
                    lambda e: _render_one(e, scenes_by_id, audio_root, out_dir),
                    entries,
                )
            )
    else:
        for e in entries:
            _render_one(e, scenes_by_id, audio_root, out_dir)
    stats = builder.dataset_stats(entries)
    (out_dir / "stats.txt").write_text(
        "\n".join(stats.lines(table)) + "\n", encoding="utf-8"
    )
    _log(f"built {len(entries)} samples into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# mel / stereo


def cmd_mel(args) -> int:
    out_dir = _prepare_out(args.out, args.force)
    wav = audio_mod.load_wav(Path(args.wav).read_bytes())
    mel = audio_mod.log_mel(wav, args.window)
    stem = Path(args.wav).stem
    audio_mod.save_mel(out_dir / f"{stem}_mel.f32", mel)
    _log(f"wrote {mel.values.shape[0]}x{mel.values.shape[1]} mel for {stem}")
    return 0


def cmd_stereo(args) -> int:
    out_dir = _prepare_out(args.out, args.force)
    entries = builder.read_manifest(args.manifest)
    audio_root = Path(
        args.audio_root if args.audio_root else Path(args.manifest).parent
    )
    (out_dir / "audio").mkdir(exist_ok=True)
    for entry in entries:
        tracks = []
        for s in entry.sounding:
            clip_path = audio_root / s.clip
            try:
                clip = audio_mod.load_wav(clip_path.read_bytes())
            except FileNotFoundError:
                raise builder.BuildError(f"missing audio clip {clip_path}")
            mono = clip if clip.channels == 1 else audio_mod.Waveform(
                clip.data.mean(axis=0, keepdims=True)
            )
            tracks.append(
                audio_mod.apply_pan(audio_mod.trim(mono), s.alpha)
            )
        mixed = audio_mod.mix(tracks)
        (out_dir / entry.mixed_audio).parent.mkdir(parents=True, exist_ok=True)
        (out_dir / entry.mixed_audio).write_bytes(audio_mod.write_wav(mixed))
    _log(f"rendered {len(entries)} stereo mixes into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# mine


def cmd_mine(args) -> int:
    records = []
    for lineno, line in enumerate(
        Path(args.pool).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            records.append(
                (
                    (int(doc["item"]), int(doc["pixel"])),
                    frozenset(int(c) for c in doc["t"]),
                    int(doc["y"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"pool line {lineno}: {exc}") from None
    if not records:
        raise ValueError(f"record pool {args.pool} is empty")
    num_classes = 1 + max(
        max((max(t) for _, t, _ in records if t), default=0),
        max(y for _, _, y in records),
    )
    pool = contrast.RecordPool(
        np.zeros((len(records), 1)),
        [t for _, t, _ in records],
        np.array([y for _, _, y in records]),
        [o for o, _, _ in records],
        num_classes,
    )
    partition = contrast.partition_anchors(pool)
    anchors = np.nonzero(partition.fg_mask | partition.bg_mask)[0]
    sets = [contrast.mine_sets(pool, partition, int(a)) for a in anchors]
    lines = contrast.dump_sets(pool, partition, sets)
    Path(args.dump).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log(f"mined {len(sets)} anchors from {len(pool)} records")
    return 0


# ---------------------------------------------------------------------------
# eval / stats


def _load_raster(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def _collect_rasters(path: Path) -> dict[str, Path]:
    if path.is_dir():
        return {p.name: p for p in sorted(path.glob("*.png"))}
    return {path.name: path}


def cmd_eval(args) -> int:
    table = _load_table(args.classes)
    preds = _collect_rasters(Path(args.pred))
    gts = _collect_rasters(Path(args.gt))
    if sorted(preds) != sorted(gts):
        only_p = sorted(set(preds) - set(gts))
        only_g = sorted(set(gts) - set(preds))
        raise ValueError(
            f"prediction/ground-truth file sets differ "
            f"(only in pred: {only_p}, only in gt: {only_g})"
        )
    num_classes = table.num_classes_with_background
    tallies = metrics.tally_many(
        [_load_raster(preds[name]) for name in sorted(preds)],
        [_load_raster(gts[name]) for name in sorted(gts)],
        num_classes,
    )
    report = metrics.evaluate(tallies)
    names = {e.class_id: e.visual_label for e in table.entries}
    names[0] = "background"
    report_path = Path(args.report)
    report_path.write_text(
        "\n".join(report.lines(names)) + "\n", encoding="utf-8"
    )
    csv_lines = ["class_id,iou,f_beta,fdr"]
    for class_id, iou, f, rate in report.table_rows():
        csv_lines.append(f"{class_id},{iou!r},{f!r},{rate!r}")
    Path(str(report_path) + ".csv").write_text(
        "\n".join(csv_lines) + "\n", encoding="utf-8"
    )
    _log(f"evaluated {len(preds)} rasters over {num_classes} classes")
    return 0


def cmd_stats(args) -> int:
    entries = builder.read_manifest(args.manifest)
    stats = builder.dataset_stats(entries)
    text = "\n".join(stats.lines()) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# train-toy


def cmd_train_toy(args) -> int:
    kv = _parse_kv_file(args.config) if args.config else {}
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if "seed" not in kv:
        raise ValueError(
            "no seed: set one in the config file or pass --seed"
        )
    config = toytrain.TrainConfig.from_kv(kv)
    out_dir = _prepare_out(args.out, args.force)
    dataset = toytrain.make_dataset(config)
    result = toytrain.train(dataset, config, args.loss_mode)
    (out_dir / "trace.txt").write_text(
        "\n".join(toytrain.trace_lines(result.trace)) + "\n", encoding="utf-8"
    )
    summary = [f"loss_mode {args.loss_mode}", f"final_miou {result.final_miou!r}"]
    for key in sorted(result.counters):
        summary.append(f"{key} {result.counters[key]}")
    (out_dir / "result.txt").write_text(
        "\n".join(summary) + "\n", encoding="utf-8"
    )
    (out_dir / "config.txt").write_text(config.to_kv(), encoding="utf-8")
    _log(f"final miou {result.final_miou:.4f} ({args.loss_mode})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avsegkit",
        description="audio-visual segmentation benchmark tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="synthesize a benchmark subset")
    p.add_argument("--scenes", required=True, help="COCO-style annotation JSON")
    p.add_argument("--audio-index", required=True,
                   help="tab-separated tag/path/duration clip index")
    p.add_argument("--classes", help="class table file (default: built-in)")
    p.add_argument("--mode", required=True, choices=builder.SUBSETS)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key-value build config")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("mel", help="log-mel features for one wav file")
    p.add_argument("--wav", required=True)
    p.add_argument("--window", type=int, choices=(1, 3), default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_mel)

    p = sub.add_parser("stereo", help="re-render stereo mixes from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root",
                   help="clip path root (default: manifest directory)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_stereo)

    p = sub.add_parser("mine", help="partition and mine a record pool")
    p.add_argument("--pool", required=True,
                   help="jsonl records: {item, pixel, t, y}")
    p.add_argument("--dump", required=True, help="output dump file")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("eval", help="score predicted rasters against truth")
    p.add_argument("--pred", required=True, help="png file or directory")
    p.add_argument("--gt", required=True, help="png file or directory")
    p.add_argument("--classes", help="class table file (default: built-in)")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="train the synthetic-scene model")
    p.add_argument("--config", help="flat key-value training config")
    p.add_argument("--loss-mode", required=True, choices=toytrain.LOSS_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("stats", help="summarize a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean message, not a traceback
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

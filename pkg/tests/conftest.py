"""Shared helpers: finite-difference gradients, relative error, fixtures."""

import numpy as np

from avsegkit.annotations import InstanceMask, SceneSample, encode_rle
from avsegkit.audio import SAMPLE_RATE, Waveform, write_wav
from avsegkit.builder import AudioPool, ClipRef


def rect_mask(height, width, rows, cols):
    """Boolean rectangle raster; rows/cols are half-open (start, stop)."""
    raster = np.zeros((height, width), dtype=bool)
    raster[rows[0]:rows[1], cols[0]:cols[1]] = True
    return raster


def make_scene(image_id, instance_specs, height=8, width=8):
    """Scene from (instance_id, class_id, rows, cols) rectangle specs."""
    instances = tuple(
        InstanceMask(iid, cid, "rle",
                     encode_rle(rect_mask(height, width, rows, cols)))
        for iid, cid, rows, cols in instance_specs
    )
    return SceneSample(image_id, width, height, instances)


def write_clip_corpus(root, table, class_ids, clips_per_tag=1, seconds=2.0):
    """Write deterministic mono PCM16 clips for every tag of the given
    classes under root/clips and return the matching AudioPool."""
    clip_dir = root / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    n = int(seconds * SAMPLE_RATE)
    counter = 0
    for cid in class_ids:
        for tag in table.audio_tags(cid):
            refs = []
            for k in range(clips_per_tag):
                rng = np.random.default_rng([417, counter])
                counter += 1
                data = np.round(
                    rng.uniform(-0.5, 0.5, size=n) * 32768
                ) / 32768.0
                slug = "".join(ch if ch.isalnum() else "_" for ch in tag)
                name = f"c{cid}_{slug}_{k}.wav"
                (clip_dir / name).write_bytes(write_wav(Waveform(data)))
                refs.append(ClipRef(f"clips/{name}", seconds))
            index[tag] = refs
    return AudioPool(index, table)


def fd_grad(fn, x, eps=1e-5):
    """Central-difference gradient of scalar fn at x, elementwise, 64-bit."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi.flat[i] += eps
        lo.flat[i] -= eps
        flat[i] = (fn(hi) - fn(lo)) / (2.0 * eps)
    return grad


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-10)
    return float(np.abs(analytic - numeric).max()) / scale

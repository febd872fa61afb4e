"""Datasets: 10-frame sequence construction, manifests, and synthetic clips.

A manifest is a JSON file {labels: {name: id}, videos: [{frames_dir,
landmarks_csv, label, subject, database, windowing}]}. Videos are cut into
10-frame windows either by non-overlapping sliding windows or by taking the
last ten frames. Frames are PGM/PPM files; anything else should be
converted beforehand (see the CLI help).

The synthetic generator stands in for licensed video databases: each class
is a moving blob with a class-specific drift direction, each subject a
distinct appearance, and the landmark track rings the blob. "distractor"
mode confines the class signal to the landmark-tracked blob and adds
decoy blobs drifting along randomly chosen class directions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import ContractError, DataError
from .landmarks import (NUM_LANDMARK_POINTS, LandmarkFrame, read_landmarks_csv,
                        write_landmarks_csv)

SEQUENCE_FRAMES = 10
WINDOW_RULES = ("sliding", "last_ten")


@dataclass
class SequenceSample:
    """One 10-frame clip with per-frame landmarks and identity metadata."""

    clip: np.ndarray                 # [10, H, W, C] float32 in [0, 1]
    landmarks: list[LandmarkFrame]   # exactly 10
    label: int
    subject_id: str
    database_id: str

    def __post_init__(self):
        if self.clip.ndim != 4 or self.clip.shape[0] != SEQUENCE_FRAMES:
            raise ContractError(
                f"clip must be [{SEQUENCE_FRAMES}, H, W, C], got {self.clip.shape}")
        if len(self.landmarks) != SEQUENCE_FRAMES:
            raise ContractError(
                f"expected {SEQUENCE_FRAMES} landmark frames, got {len(self.landmarks)}")
        if not self.subject_id:
            raise ContractError("subject_id must be non-empty")


@dataclass
class VideoRecord:
    frames_dir: str
    landmarks_csv: str
    label: str
    subject: str
    database: str
    windowing: str = "sliding"


@dataclass
class DatasetManifest:
    labels: dict[str, int]
    videos: list[VideoRecord]

    def __post_init__(self):
        ids = sorted(self.labels.values())
        if ids != list(range(len(ids))):
            raise DataError(f"label ids must cover 0..{len(ids) - 1}, got {ids}")
        for v in self.videos:
            if v.label not in self.labels:
                raise DataError(f"video label {v.label!r} missing from label map")
            if v.windowing not in WINDOW_RULES:
                raise DataError(f"unknown windowing rule {v.windowing!r}")
            if not v.subject:
                raise DataError(f"video {v.frames_dir}: empty subject id")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        videos = [VideoRecord(**v) for v in raw["videos"]]
        manifest = DatasetManifest(labels=dict(raw["labels"]), videos=videos)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "labels": manifest.labels,
        "videos": [vars(v) for v in manifest.videos],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def window_video(frames, rule: str) -> list[tuple[int, int]]:
    """Cut a frame list into 10-frame index windows [start, stop).

    'sliding' yields consecutive non-overlapping windows and drops the final
    partial one; 'last_ten' yields the single trailing window.
    """
    if rule not in WINDOW_RULES:
        raise ContractError(f"unknown windowing rule {rule!r}")
    n = len(frames) if not isinstance(frames, int) else frames
    if n < SEQUENCE_FRAMES:
        raise DataError(f"need at least {SEQUENCE_FRAMES} frames, got {n}")
    if rule == "last_ten":
        return [(n - SEQUENCE_FRAMES, n)]
    return [(s, s + SEQUENCE_FRAMES)
            for s in range(0, n - SEQUENCE_FRAMES + 1, SEQUENCE_FRAMES)]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"(\d+)")


def _natural_key(name: str):
    return tuple(int(p) if p.isdigit() else p for p in _NUM_RE.split(name))


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of [H, W, C] to (H', W'); exact no-op at same size."""
    h, w = img.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return img
    ys = np.clip((np.arange(th) + 0.5) * (h / th) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * (w / tw) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _load_frame(path, channels_hint: int | None) -> np.ndarray:
    img = netpbm.read_image(path).astype(np.float32) / 255.0
    if img.ndim == 2:
        img = img[..., None]
    if channels_hint is not None and img.shape[2] != channels_hint:
        raise DataError(f"{path}: expected {channels_hint} channels, got {img.shape[2]}")
    return img


def load_video_frames(frames_dir, size: tuple[int, int]) -> np.ndarray:
    d = Path(frames_dir)
    if not d.is_dir():
        raise DataError(f"frames directory not found: {d}")
    names = sorted((p.name for p in d.iterdir()
                    if p.suffix.lower() in (".pgm", ".ppm")), key=_natural_key)
    if not names:
        raise DataError(f"{d}: no PGM/PPM frames")
    frames = []
    channels = None
    for name in names:
        img = _load_frame(d / name, channels)
        channels = img.shape[2]
        frames.append(resize_bilinear(img, size).astype(np.float32))
    return np.stack(frames)


def load_dataset(manifest: DatasetManifest | str | Path,
                 size: tuple[int, int]) -> list[SequenceSample]:
    """Decode, resize, and window every video in the manifest.

    Sample order follows manifest order; pixel values are scaled to [0, 1].
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    samples: list[SequenceSample] = []
    for video in manifest.videos:
        frames = load_video_frames(video.frames_dir, size)
        tracks = read_landmarks_csv(video.landmarks_csv)
        if len(tracks) != len(frames):
            raise DataError(
                f"{video.frames_dir}: {len(frames)} frames but "
                f"{len(tracks)} landmark rows in {video.landmarks_csv}")
        src_size = _source_size(video.frames_dir)
        for start, stop in window_video(len(frames), video.windowing):
            landmark_frames = [LandmarkFrame(points=tracks[i], source_size=src_size)
                               for i in range(start, stop)]
            samples.append(SequenceSample(
                clip=frames[start:stop],
                landmarks=landmark_frames,
                label=manifest.labels[video.label],
                subject_id=video.subject,
                database_id=video.database,
            ))
    return samples


def _source_size(frames_dir) -> tuple[int, int]:
    d = Path(frames_dir)
    first = sorted((p.name for p in d.iterdir()
                    if p.suffix.lower() in (".pgm", ".ppm")), key=_natural_key)[0]
    img = netpbm.read_image(d / first)
    return img.shape[0], img.shape[1]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_direction(k: int, num_classes: int) -> np.ndarray:
    angle = 2.0 * np.pi * k / num_classes
    return np.array([np.cos(angle), np.sin(angle)])


def _render_blob(h: int, w: int, center: np.ndarray, sigma: float,
                 amplitude: float) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    d2 = (ys - center[1]) ** 2 + (xs - center[0]) ** 2
    return amplitude * np.exp(-d2 / (2.0 * sigma * sigma))


def _landmark_ring(center: np.ndarray, sigma: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(NUM_LANDMARK_POINTS) / NUM_LANDMARK_POINTS
    ring = np.stack([center[0] + 1.6 * sigma * np.cos(angles),
                     center[1] + 1.2 * sigma * np.sin(angles)], axis=1)
    return ring


def synth_dataset(num_classes: int, per_class: int, size=(64, 64), seed=0,
                  channels: int = 1, num_subjects: int = 10,
                  mode: str = "plain", database_id: str = "synth",
                  ) -> tuple[list[SequenceSample], dict[str, int]]:
    """Deterministic synthetic clips: class = drift direction, subject = look.

    Returns (samples, label map). 'distractor' mode adds decoy blobs whose
    drift follows a random class direction while only the landmark-tracked
    blob carries the true class.
    """
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if mode not in ("plain", "distractor"):
        raise ContractError(f"unknown synth mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = size
    labels = {f"class{k}": k for k in range(num_classes)}
    speed = min(h, w) / 28.0
    samples: list[SequenceSample] = []
    video_index = 0
    for k in range(num_classes):
        direction = _class_direction(k, num_classes)
        for _ in range(per_class):
            subject = video_index % num_subjects
            srng = np.random.Generator(np.random.PCG64(10_000 + 7 * subject))
            sigma = min(h, w) * srng.uniform(0.07, 0.11)
            amplitude = srng.uniform(0.7, 1.0)
            base = np.array([w / 2, h / 2]) + srng.uniform(-0.08, 0.08) * min(h, w)

            start = base - direction * speed * (SEQUENCE_FRAMES - 1) / 2 \
                + rng.uniform(-1.5, 1.5, size=2)
            frames = np.zeros((SEQUENCE_FRAMES, h, w), dtype=np.float64)
            tracks = np.zeros((SEQUENCE_FRAMES, NUM_LANDMARK_POINTS, 2))
            decoys = []
            if mode == "distractor":
                for _ in range(2):
                    pos = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h])
                    while np.linalg.norm(pos - start) < 3.0 * sigma:
                        pos = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h])
                    decoy_dir = _class_direction(int(rng.integers(num_classes)),
                                                 num_classes)
                    decoys.append((pos, decoy_dir))
            for t in range(SEQUENCE_FRAMES):
                center = start + direction * speed * t
                frames[t] = _render_blob(h, w, center, sigma, amplitude)
                for pos, decoy_dir in decoys:
                    frames[t] += _render_blob(h, w, pos + decoy_dir * speed * t,
                                              sigma, amplitude)
                tracks[t] = _landmark_ring(center, sigma)
            noise_scale = 0.05 if mode == "distractor" else 0.02
            frames += rng.normal(0.0, noise_scale, size=frames.shape)
            frames = np.clip(frames, 0.0, 1.0)
            clip = np.repeat(frames[..., None], channels, axis=-1) \
                if channels > 1 else frames[..., None]
            landmark_frames = [LandmarkFrame(points=tracks[t], source_size=(h, w))
                               for t in range(SEQUENCE_FRAMES)]
            samples.append(SequenceSample(
                clip=clip.astype(np.float32),
                landmarks=landmark_frames,
                label=k,
                subject_id=f"subj{subject:02d}",
                database_id=database_id,
            ))
            video_index += 1
    return samples, labels


def write_synth_dataset(out_dir, num_classes: int, per_class: int, size=(64, 64),
                        seed=0, channels: int = 1, num_subjects: int = 10,
                        mode: str = "plain", database_id: str = "synth") -> Path:
    """Write a synthetic dataset to disk (frames + landmark CSVs + manifest)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, labels = synth_dataset(num_classes, per_class, size=size, seed=seed,
                                    channels=channels, num_subjects=num_subjects,
                                    mode=mode, database_id=database_id)
    videos = []
    for i, sample in enumerate(samples):
        vdir = out / f"video_{i:04d}"
        vdir.mkdir(exist_ok=True)
        ext = "ppm" if sample.clip.shape[-1] == 3 else "pgm"
        for t in range(SEQUENCE_FRAMES):
            img = np.clip(np.round(sample.clip[t] * 255.0), 0, 255).astype(np.uint8)
            img = img[..., 0] if ext == "pgm" else img
            netpbm.write_image(vdir / f"frame_{t:02d}.{ext}", img)
        csv_path = out / f"video_{i:04d}_landmarks.csv"
        write_landmarks_csv(csv_path, np.stack([f.points for f in sample.landmarks]))
        videos.append(VideoRecord(
            frames_dir=str(vdir), landmarks_csv=str(csv_path),
            label=f"class{sample.label}", subject=sample.subject_id,
            database=sample.database_id, windowing="sliding"))
    manifest = DatasetManifest(labels=labels, videos=videos)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path

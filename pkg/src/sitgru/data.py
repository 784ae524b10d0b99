"""Frame ingestion, preprocessing, cuboid construction and a synthetic video generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import derive_rng


class FrameFormatError(ValueError):
    """A frame file is malformed or does not match the rest of the sequence."""


@dataclass
class FrameSequence:
    frames: np.ndarray  # (L, H, W)
    fps: float | None = None
    split: str = "train"  # provenance tag: "train" or "test"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.size == 0:
            self.frames = self.frames.reshape(0, 0, 0)
        if self.frames.ndim != 3:
            raise FrameFormatError(f"frames must be (L, H, W), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class PreprocessStats:
    global_mean_image: np.ndarray
    mean: float
    std: float
    lo: float
    hi: float
    source: str = "train"

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "preprocess.mean_image": self.global_mean_image,
            "preprocess.scalars": np.array([self.mean, self.std, self.lo, self.hi]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PreprocessStats":
        mean, std, lo, hi = (float(v) for v in arrays["preprocess.scalars"])
        return cls(arrays["preprocess.mean_image"], mean, std, lo, hi)


def resize_bilinear(frame: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize: output corners sample input corners exactly."""
    frame = np.asarray(frame, dtype=np.float64)
    h_in, w_in = frame.shape
    h_out, w_out = size
    if (h_in, w_in) == (h_out, w_out):
        return frame.copy()

    def coords(n_in, n_out):
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h_in, h_out)
    c0, c1, fc = coords(w_in, w_out)
    top = frame[r0][:, c0] * (1 - fc) + frame[r0][:, c1] * fc
    bottom = frame[r1][:, c0] * (1 - fc) + frame[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def _resize_scale(seq: FrameSequence, target: tuple[int, int]) -> np.ndarray:
    return np.stack([resize_bilinear(f, target) for f in seq.frames]) / 255.0


def compute_stats(seq: FrameSequence, target: tuple[int, int]) -> PreprocessStats:
    if seq.split != "train":
        raise ValueError(f"preprocessing statistics must come from training frames, not {seq.split!r}")
    if len(seq) == 0:
        raise ValueError("cannot compute statistics of an empty sequence")
    scaled = _resize_scale(seq, target)
    mean_image = scaled.mean(axis=0)
    centred = scaled - mean_image
    mean = float(centred.mean())
    std = float(centred.std())
    if std == 0.0:
        std = 1.0
    z = (centred - mean) / std
    return PreprocessStats(mean_image, mean, std, float(z.min()), float(z.max()))


def preprocess(seq: FrameSequence, stats: PreprocessStats | None = None,
               target: tuple[int, int] = (32, 32)) -> tuple[FrameSequence, PreprocessStats]:
    """Resize, scale to [0, 1], subtract the mean image, standardize.

    Statistics are computed from ``seq`` when ``stats`` is None, which is
    only allowed for training sequences.
    """
    if len(seq) == 0:
        raise ValueError("cannot preprocess an empty frame sequence")
    if stats is None:
        stats = compute_stats(seq, target)
    if stats.global_mean_image.shape != tuple(target):
        raise FrameFormatError(
            f"statistics are for {stats.global_mean_image.shape} frames, target is {tuple(target)}")
    scaled = _resize_scale(seq, target)
    z = (scaled - stats.global_mean_image - stats.mean) / stats.std
    return FrameSequence(z, seq.fps, seq.split), stats


def to_unit_range(seq: FrameSequence, stats: PreprocessStats) -> FrameSequence:
    """Map standardized frames onto [0, 1] using the training min/max, clipping outliers."""
    span = stats.hi - stats.lo
    if span <= 0:
        return FrameSequence(np.zeros_like(seq.frames), seq.fps, seq.split)
    u = np.clip((seq.frames - stats.lo) / span, 0.0, 1.0)
    return FrameSequence(u, seq.fps, seq.split)


@dataclass
class Cuboid:
    frames: np.ndarray  # (T, H, W, 1)
    indices: list[int]
    stride: int

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def centre(self) -> float:
        return float(np.mean(self.indices))

    def as_matrix(self) -> np.ndarray:
        return self.frames.reshape(self.T, -1)


def build_cuboids(seq: FrameSequence, T: int, strides: Sequence[int] = (1, 2, 3)) -> list[Cuboid]:
    """Sliding-window cuboids of T frames for every stride, ``L - (T-1)s`` per stride."""
    if T < 1 or not strides or min(strides) < 1:
        raise ValueError("T and every stride must be positive")
    need = (T - 1) * max(strides) + 1
    if len(seq) < need:
        raise ValueError(f"sequence of {len(seq)} frames is too short; need at least {need}")
    out = []
    for s in strides:
        for i in range(len(seq) - (T - 1) * s):
            idx = list(range(i, i + (T - 1) * s + 1, s))
            out.append(Cuboid(seq.frames[idx][..., None], idx, s))
    return out


class AnomalyType(Enum):
    SPEED = "speed"
    EXTRA_OBJECT = "extra_object"


@dataclass
class SyntheticConfig:
    height: int = 32
    width: int = 32
    length: int = 60
    object_size: int = 6
    speed: float = 2.0
    anomaly: AnomalyType = AnomalyType.SPEED
    speed_factor: float = 3.0
    window: tuple[int, int] = (20, 40)
    seed: int = 0
    background: float = 20.0
    brightness: float = 230.0
    noise: float = 2.0
    exposure_samples: int = 8

    def __post_init__(self):
        start, end = self.window
        if not 0 <= start <= end <= self.length:
            raise ValueError(f"anomaly window {self.window} outside sequence of length {self.length}")
        if self.speed < 1 or self.speed_factor < 1:
            raise ValueError("speeds must be at least 1 pixel per frame")
        if self.object_size >= min(self.height, self.width) // 2:
            raise ValueError("object must fit twice into the frame")


def _lane_profile(start: np.ndarray, size: int, width: int) -> np.ndarray:
    """Per-column coverage of a square swept through every ``start``; saturates at 1."""
    cols = np.arange(width)
    left = np.clip(start[:, None], cols, cols + 1)
    right = np.clip(start[:, None] + size, cols, cols + 1)
    return (right - left).max(axis=0)


def _bounce(distance: np.ndarray, span: float) -> np.ndarray:
    phase = np.mod(distance, 2 * span)
    return np.where(phase <= span, phase, 2 * span - phase)


def synth_generate(cfg: SyntheticConfig) -> tuple[FrameSequence, np.ndarray]:
    """Render a bright square bouncing along a horizontal lane on a dark background.

    The square is drawn with saturating exposure blur: every pixel it crosses
    during a frame is lit, so faster motion shows up as a longer streak.  Frames
    inside ``cfg.window`` carry the configured anomaly and label 1.
    """
    rng = derive_rng(cfg.seed, "synth")
    H, W, s = cfg.height, cfg.width, cfg.object_size
    span = float(W - s)
    start = rng.uniform(0, 2 * span)
    labels = np.zeros(cfg.length, dtype=int)
    labels[cfg.window[0]:cfg.window[1]] = 1
    anomalous = labels.astype(bool)
    speeds = np.full(cfg.length, float(cfg.speed))
    if cfg.anomaly is AnomalyType.SPEED:
        speeds[anomalous] *= cfg.speed_factor
    travelled = start + np.concatenate([[0.0], np.cumsum(speeds)[:-1]])
    sub = np.arange(cfg.exposure_samples) / cfg.exposure_samples

    lane = (H - s) // 2
    extra_lane = max(0, lane - 2 * s) if lane >= 2 * s else min(H - s, lane + 2 * s)
    frames = np.full((cfg.length, H, W), cfg.background)
    for t in range(cfg.length):
        cover = _lane_profile(_bounce(travelled[t] + speeds[t] * sub, span), s, W)
        frames[t, lane:lane + s, :] += (cfg.brightness - cfg.background) * cover
        if cfg.anomaly is AnomalyType.EXTRA_OBJECT and anomalous[t]:
            pos = _bounce(2 * span - travelled[t] + cfg.speed * sub, span)
            frames[t, extra_lane:extra_lane + s, :] = np.maximum(
                frames[t, extra_lane:extra_lane + s, :],
                cfg.background + (cfg.brightness - cfg.background) * _lane_profile(pos, s, W))
    frames += rng.normal(0.0, cfg.noise, size=frames.shape)
    frames = np.clip(np.round(frames), 0, 255)
    return FrameSequence(frames), labels


def read_pgm(path) -> np.ndarray:
    """Parse a binary (P5) PGM with maxval <= 255."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read frame {path}: {exc.strerror or exc}") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FrameFormatError(f"{path}: truncated PGM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FrameFormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FrameFormatError(f"{path}: bad PGM header") from exc
    if not 0 < maxval <= 255:
        raise FrameFormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise FrameFormatError(f"{path}: expected {width * height} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64)


def write_pgm(path, frame: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(frame, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


@dataclass
class DatasetManifest:
    entries: list[dict] = field(default_factory=list)  # {"path": str, "label": 0|1}
    root: Path = Path(".")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise OSError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
        entries = []
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FrameFormatError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
            if "path" not in entry or entry.get("label") not in (0, 1):
                raise FrameFormatError(f"{path}:{n}: entries need a path and a 0/1 label")
            entries.append(entry)
        return cls(entries, path.parent)

    def write(self, path) -> None:
        with Path(path).open("w") as fh:
            for e in self.entries:
                fh.write(json.dumps({"path": e["path"], "label": int(e["label"])}) + "\n")


def load_frames(manifest: DatasetManifest, split: str = "test") -> tuple[FrameSequence, np.ndarray]:
    frames = []
    for e in manifest.entries:
        frame = read_pgm(manifest.root / e["path"])
        if frames and frame.shape != frames[0].shape:
            raise FrameFormatError(
                f"{manifest.root / e['path']}: size {frame.shape} differs from {frames[0].shape}")
        frames.append(frame)
    labels = np.array([int(e["label"]) for e in manifest.entries], dtype=int)
    return FrameSequence(np.array(frames) if frames else np.zeros((0, 0, 0)), split=split), labels


def write_dataset(directory, seq: FrameSequence, labels: Iterable[int], prefix: str = "frame") -> Path:
    """Write frames as PGM files plus ``manifest.jsonl``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for t, (frame, label) in enumerate(zip(seq.frames, labels)):
        name = f"{prefix}_{t:05d}.pgm"
        write_pgm(directory / name, frame)
        entries.append({"path": name, "label": int(label)})
    manifest_path = directory / "manifest.jsonl"
    DatasetManifest(entries, directory).write(manifest_path)
    return manifest_path

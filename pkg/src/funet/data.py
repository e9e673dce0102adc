"""Dataset ingestion, clip sampling, resizing, and synthetic video generation.

On-disk layout: ``root/<sequence_id>/frames/*.png`` plus a parallel
``masks/`` directory (single-channel, 255 = foreground). Lexicographic
filename order is temporal order. Splits are assigned per sequence so no
sequence straddles train/val/test.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .tensor import Tensor

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.65, 0.175, 0.175)


@dataclass
class ClipBatch:
    """A (B,T,C,H,W) stack of consecutive frames with optional binary masks."""

    frames: np.ndarray
    masks: Optional[np.ndarray] = None

    def validate(self) -> "ClipBatch":
        if self.frames.ndim != 5:
            raise ValueError(f"frames must be rank 5 (B,T,C,H,W), got {self.frames.shape}")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame values must lie in [0,1]")
        if self.masks is not None:
            b, t, _, h, w = self.frames.shape
            if self.masks.shape != (b, t, 1, h, w):
                raise ValueError(f"masks shape {self.masks.shape} != ({b},{t},1,{h},{w})")
            vals = np.unique(self.masks)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ValueError("mask values must be exactly binary")
        return self

    def frames_tensor(self, dtype=np.float32) -> Tensor:
        return Tensor(self.frames, dtype=dtype)

    def masks_tensor(self, dtype=np.float32) -> Tensor:
        if self.masks is None:
            raise ValueError("clip batch has no masks")
        return Tensor(self.masks, dtype=dtype)


@dataclass
class SequenceEntry:
    sequence_id: str
    frames: list[str]
    masks: Optional[list[str]]
    split: str


@dataclass
class DatasetManifest:
    sequences: list[SequenceEntry]
    seed: int
    ratios: tuple[float, float, float]
    foreground_only: bool = False

    def split_sequences(self, split: str) -> list[SequenceEntry]:
        if split == "val+test":
            return [s for s in self.sequences if s.split in ("val", "test")]
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.sequences if s.split == split]

    def to_dict(self) -> dict:
        return {
            "sequences": [
                {"id": s.sequence_id, "frames": s.frames, "masks": s.masks, "split": s.split}
                for s in self.sequences
            ],
            "seed": self.seed,
            "ratios": list(self.ratios),
            "foreground_only": self.foreground_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            sequences=[
                SequenceEntry(e["id"], list(e["frames"]), list(e["masks"]) if e["masks"] else None, e["split"])
                for e in d["sequences"]
            ],
            seed=int(d["seed"]),
            ratios=tuple(d["ratios"]),
            foreground_only=bool(d.get("foreground_only", False)),
        )

    def save(self, path) -> Path:
        """Serialize with paths relative to the manifest location, so the
        dataset directory can be moved wholesale."""
        path = Path(path)
        doc = self.to_dict()
        base = path.parent.resolve()

        def rel(p):
            try:
                return os.path.relpath(Path(p).resolve(), base)
            except ValueError:
                return str(p)

        for entry in doc["sequences"]:
            entry["frames"] = [rel(p) for p in entry["frames"]]
            if entry["masks"]:
                entry["masks"] = [rel(p) for p in entry["masks"]]
        path.write_text(json.dumps(doc, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        base = path.parent.resolve()

        def absolute(p):
            p = Path(p)
            return str(p if p.is_absolute() else (base / p).resolve())

        for entry in doc["sequences"]:
            entry["frames"] = [absolute(p) for p in entry["frames"]]
            if entry["masks"]:
                entry["masks"] = [absolute(p) for p in entry["masks"]]
        return cls.from_dict(doc)


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of n sequences across the splits;
    remainder ties go to the later split (so 20 at 65/17.5/17.5 -> 13/3/4)."""
    quotas = [n * r / sum(ratios) for r in ratios]
    counts = [int(q) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (quotas[i] - counts[i], i), reverse=True)
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def load_manifest(root_dir, split_ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetManifest:
    """Scan root/<seq>/frames + masks, then split sequences by ratio with a
    seeded shuffle."""
    root = Path(root_dir).resolve()
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    entries = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames_dir = seq_dir / "frames"
        if not frames_dir.is_dir():
            continue
        frames = sorted(str(p) for p in frames_dir.glob("*.png"))
        if not frames:
            raise ValueError(f"sequence {seq_dir.name} has no frames")
        masks_dir = seq_dir / "masks"
        masks = None
        if masks_dir.is_dir():
            masks = sorted(str(p) for p in masks_dir.glob("*.png"))
            if len(masks) != len(frames):
                raise ValueError(
                    f"sequence {seq_dir.name}: {len(frames)} frames but {len(masks)} masks"
                )
        entries.append(SequenceEntry(seq_dir.name, frames, masks, split="train"))
    if not entries:
        raise ValueError(f"no sequences found under {root}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries))
    counts = split_counts(len(entries), split_ratios)
    cursor = 0
    for split, count in zip(SPLITS, counts):
        for idx in order[cursor : cursor + count]:
            entries[idx].split = split
        cursor += count
    for e in entries:
        if e.split == "train" and e.masks is None:
            raise ValueError(f"training sequence {e.sequence_id} has no masks")
    return DatasetManifest(sequences=entries, seed=seed, ratios=tuple(split_ratios))


def clip_windows(n_frames: int, t: int, stride: int, tail: bool = True) -> list[int]:
    """Start indices of T-frame windows. With `tail`, the final window is
    snapped to the sequence end so every frame is covered."""
    if n_frames < t:
        raise ValueError(f"sequence of {n_frames} frames is shorter than T={t}")
    starts = list(range(0, n_frames - t + 1, stride))
    if tail and starts[-1] + t < n_frames:
        starts.append(n_frames - t)
    return starts


def sample_clips(manifest: DatasetManifest, split: str, t: int, stride: Optional[int] = None) -> list[tuple[str, int]]:
    """(sequence_id, start) windows for a split. Train default: stride 1
    (dense); eval default: stride T, non-overlapping, tail-aligned."""
    training = split == "train"
    if stride is None:
        stride = 1 if training else t
    windows = []
    for seq in manifest.split_sequences(split):
        for start in clip_windows(len(seq.frames), t, stride, tail=not training):
            windows.append((seq.sequence_id, start))
    return windows


# ---------------------------------------------------------------------------
# image I/O and resizing


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.clip(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), 0, n_in - 1)


def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor resize over the trailing two axes; value-preserving."""
    iy = _nearest_index(img.shape[-2], h)
    ix = _nearest_index(img.shape[-1], w)
    return np.ascontiguousarray(img[..., iy[:, None], ix[None, :]])


def resize_bilinear_array(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) float arrays (same interpolation as the
    differentiable op, applied outside the tape)."""
    from .tensor import _interp_rows

    my = _interp_rows(img.shape[-2], h).astype(img.dtype)
    mx = _interp_rows(img.shape[-1], w).astype(img.dtype)
    return np.matmul(np.matmul(my, img), mx.T)


def resize_pair(frame: np.ndarray, mask: Optional[np.ndarray], h: int, w: int):
    """Resize a (C,H,W) frame bilinearly and its (1,H,W) mask with nearest
    neighbor (masks stay exactly binary)."""
    if h < 1 or w < 1:
        raise ValueError(f"target size {h}x{w} must be positive")
    if frame.shape[-2:] == (h, w):
        out_frame = frame
    else:
        out_frame = np.clip(resize_bilinear_array(frame.astype(np.float32), h, w), 0.0, 1.0)
    out_mask = None
    if mask is not None:
        out_mask = mask if mask.shape[-2:] == (h, w) else resize_nearest(mask, h, w)
    return out_frame, out_mask


def load_frame(path) -> np.ndarray:
    """PNG -> (3,H,W) float32 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    """PNG -> (1,H,W) float32 in {0,1}; any nonzero pixel is foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float32)[None]


class ClipDataset:
    """Window-level view of one split, loading and resizing frames on demand
    (decoded sequences are cached, which is fine at desk scale)."""

    def __init__(self, manifest: DatasetManifest, split: str, t: int, size: tuple[int, int], stride: Optional[int] = None):
        self.manifest = manifest
        self.split = split
        self.t = t
        self.h, self.w = size
        self.windows = sample_clips(manifest, split, t, stride)
        self._sequences = {}
        for seq in manifest.split_sequences(split):
            self._sequences[seq.sequence_id] = seq
        self._cache: dict[str, tuple[np.ndarray, Optional[np.ndarray]]] = {}
        if split == "train" and manifest.foreground_only:
            self.windows = [wi for wi in self.windows if self._window_has_foreground(wi)]

    def _load_sequence(self, seq_id: str):
        if seq_id not in self._cache:
            seq = self._sequences[seq_id]
            frames = []
            masks = [] if seq.masks else None
            for i, fp in enumerate(seq.frames):
                frame = load_frame(fp)
                mask = load_mask(seq.masks[i]) if seq.masks else None
                frame, mask = resize_pair(frame, mask, self.h, self.w)
                frames.append(frame)
                if masks is not None:
                    masks.append(mask)
            self._cache[seq_id] = (
                np.stack(frames),
                np.stack(masks) if masks is not None else None,
            )
        return self._cache[seq_id]

    def _window_has_foreground(self, window) -> bool:
        seq_id, start = window
        _, masks = self._load_sequence(seq_id)
        return masks is not None and masks[start : start + self.t].any()

    def __len__(self):
        return len(self.windows)

    def clip(self, index: int) -> ClipBatch:
        seq_id, start = self.windows[index]
        frames, masks = self._load_sequence(seq_id)
        sel = slice(start, start + self.t)
        return ClipBatch(
            frames=frames[sel][None].copy(),
            masks=masks[sel][None].copy() if masks is not None else None,
        )

    def frame_keys(self) -> list[tuple[str, int]]:
        """All (sequence, frame index) pairs reachable through the windows."""
        seen = []
        have = set()
        for seq_id, start in self.windows:
            for i in range(start, start + self.t):
                if (seq_id, i) not in have:
                    have.add((seq_id, i))
                    seen.append((seq_id, i))
        return seen

    def mask_for(self, seq_id: str, frame_idx: int) -> np.ndarray:
        _, masks = self._load_sequence(seq_id)
        if masks is None:
            raise ValueError(f"sequence {seq_id} has no masks")
        return masks[frame_idx, 0]


# ---------------------------------------------------------------------------
# synthetic videos


@dataclass
class SyntheticVideoSpec:
    """Drifting bright ellipses over a noisy dark background, with exact
    rasterized masks. Motion is slow (a few px/frame) so consecutive frames
    share most of their content, and per-frame noise levels vary within a
    sequence so some frames are markedly cleaner than others."""

    n_sequences: int = 40
    frames_per_sequence: int = 10
    height: int = 64
    width: int = 112
    ellipse_count: int = 1
    radius_range: tuple[float, float] = (0.12, 0.22)  # fraction of min(h, w)
    drift_range: tuple[float, float] = (0.5, 2.5)  # px/frame
    deform_amplitude: float = 0.1
    noise_sigma: float = 0.12
    noise_jitter: float = 0.5  # per-frame sigma varies by up to this fraction
    seed: int = 0

    def validate(self) -> "SyntheticVideoSpec":
        if self.n_sequences < 1 or self.frames_per_sequence < 1:
            raise ValueError("need at least one sequence and one frame")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"image size {self.height}x{self.width} too small")
        if not (0 < self.radius_range[0] <= self.radius_range[1] < 0.5):
            raise ValueError("radius_range must satisfy 0 < lo <= hi < 0.5")
        return self


def _rasterize_ellipses(params, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for cx, cy, rx, ry in params:
        mask |= ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return mask


def _synth_sequence(spec: SyntheticVideoSpec, seq_index: int):
    rng = np.random.default_rng([spec.seed, seq_index])
    h, w = spec.height, spec.width
    scale = min(h, w)
    n = spec.ellipse_count
    radii = rng.uniform(spec.radius_range[0] * scale, spec.radius_range[1] * scale, size=(n, 2))
    max_r = radii.max(axis=1)
    cx = rng.uniform(max_r + 2, w - max_r - 2)
    cy = rng.uniform(max_r + 2, h - max_r - 2)
    speed = rng.uniform(*spec.drift_range, size=n)
    angle = rng.uniform(0, 2 * np.pi, size=n)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    frame_sigma = spec.noise_sigma * (1.0 + spec.noise_jitter * rng.uniform(-1, 1, size=spec.frames_per_sequence))

    frames, masks = [], []
    for t in range(spec.frames_per_sequence):
        params = []
        for e in range(n):
            wobble = 1.0 + spec.deform_amplitude * np.sin(2 * np.pi * t / max(spec.frames_per_sequence, 2) + phase[e])
            rx = radii[e, 0] * wobble
            ry = radii[e, 1] / wobble
            params.append((cx[e], cy[e], rx, ry))
        mask = _rasterize_ellipses(params, h, w)
        img = np.where(mask, 0.78, 0.28) + frame_sigma[t] * rng.standard_normal((h, w))
        frames.append(np.clip(img, 0.0, 1.0))
        masks.append(mask)
        # drift, bouncing so every ellipse stays >= 1 px inside the border
        for e in range(n):
            r = max_r[e]
            nx, ny = cx[e] + vx[e], cy[e] + vy[e]
            if nx - r < 1 or nx + r > w - 2:
                vx[e] = -vx[e]
                nx = cx[e] + vx[e]
            if ny - r < 1 or ny + r > h - 2:
                vy[e] = -vy[e]
                ny = cy[e] + vy[e]
            cx[e], cy[e] = nx, ny
    return frames, masks


def synth_generate(spec: SyntheticVideoSpec, out_dir, split_ratios=DEFAULT_RATIOS) -> DatasetManifest:
    """Write PNG frames/masks for every sequence and return the manifest
    (also saved as manifest.json). Output is fully determined by the seed."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in range(spec.n_sequences):
        seq_dir = out / f"seq{s:04d}"
        (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
        (seq_dir / "masks").mkdir(parents=True, exist_ok=True)
        frames, masks = _synth_sequence(spec, s)
        for t, (frame, mask) in enumerate(zip(frames, masks)):
            gray = np.round(frame * 255).astype(np.uint8)
            rgb = np.stack([gray] * 3, axis=-1)
            Image.fromarray(rgb).save(seq_dir / "frames" / f"{t:04d}.png")
            Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(seq_dir / "masks" / f"{t:04d}.png")
    manifest = load_manifest(out, split_ratios=split_ratios, seed=spec.seed)
    manifest.save(out / "manifest.json")
    return manifest

"""On-disk subject datasets: ``<root>/subject_<id>/manifest.json`` plus PNG images."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError
from .renderer import Camera
from .skeleton import Pose, Skeleton

MANIFEST = "manifest.json"
FLOAT_IMAGE_HEADER = "GNVIMG v1"


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    pose: Pose
    images: Dict[int, str] = field(default_factory=dict)  # camera index -> relative path


@dataclass
class SubjectDataset:
    subject_id: str
    skeleton: Skeleton
    cameras: List[Camera]
    frames: List[FrameRecord]
    train: List[Tuple[int, int]]  # (frame index, camera index)
    eval: List[Tuple[int, int]]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root: Optional[Path] = None
    extra: dict = field(default_factory=dict)
    _images: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)

    def image(self, frame: int, camera: int) -> np.ndarray:
        key = (frame, camera)
        if key not in self._images:
            if self.root is None:
                raise KeyError(f"no image for frame {frame}, camera {camera}")
            path = self.root / self.frames[frame].images[camera]
            self._images[key] = read_png(path)
        return self._images[key]

    def set_image(self, frame: int, camera: int, img: np.ndarray) -> None:
        self._images[(frame, camera)] = img


def write_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_float_image(path, img: np.ndarray) -> None:
    """Lossless dump: ASCII line ``GNVIMG v1 <width> <height>`` then float32 LE RGB, row-major."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{FLOAT_IMAGE_HEADER} {w} {h}\n".encode("ascii"))
        fh.write(img.astype("<f4").tobytes())


def read_float_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    parts = raw[:nl].decode("ascii").split()
    if " ".join(parts[:2]) != FLOAT_IMAGE_HEADER:
        raise ConfigError(f"{path}: not a float image dump")
    w, h = int(parts[2]), int(parts[3])
    return np.frombuffer(raw, "<f4", offset=nl + 1).reshape(h, w, 3).astype(np.float64)


def save_manifest(ds: SubjectDataset, directory: Path) -> Path:
    directory = Path(directory)
    doc = {
        "subject_id": ds.subject_id,
        "skeleton": ds.skeleton.to_dict(),
        "cameras": [c.to_dict() for c in ds.cameras],
        "background": [float(v) for v in ds.background],
        "frames": [
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "pose": {"omega": f.pose.omega.tolist(), "root_translation": f.pose.root_translation.tolist()},
                "images": {str(k): v for k, v in f.images.items()},
            }
            for f in ds.frames
        ],
        "splits": {"train": [list(p) for p in ds.train], "eval": [list(p) for p in ds.eval]},
        "extra": ds.extra,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_subject(directory) -> SubjectDataset:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    doc = json.loads(path.read_text())
    frames = [
        FrameRecord(
            int(f["index"]),
            float(f["timestamp"]),
            Pose(f["pose"]["omega"], f["pose"]["root_translation"]),
            {int(k): v for k, v in f["images"].items()},
        )
        for f in doc["frames"]
    ]
    if not frames:
        raise ConfigError(f"subject {doc['subject_id']!r} has no frames")
    return SubjectDataset(
        subject_id=str(doc["subject_id"]),
        skeleton=Skeleton.from_dict(doc["skeleton"]),
        cameras=[Camera.from_dict(c) for c in doc["cameras"]],
        frames=frames,
        train=[tuple(p) for p in doc["splits"]["train"]],
        eval=[tuple(p) for p in doc["splits"]["eval"]],
        background=np.asarray(doc.get("background", [0, 0, 0]), dtype=np.float64),
        root=directory,
        extra=doc.get("extra", {}),
    )


def load_collection(root) -> List[SubjectDataset]:
    """All ``subject_*`` directories under ``root``, sorted by name."""
    root = Path(root)
    dirs = sorted(p for p in root.glob("subject_*") if (p / MANIFEST).exists())
    if not dirs:
        raise FileNotFoundError(f"no subject datasets under {root}")
    return [load_subject(d) for d in dirs]

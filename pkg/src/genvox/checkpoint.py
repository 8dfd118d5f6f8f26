"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GNVX"                 magic
    u32                     format version
    u32 + bytes             UTF-8 JSON metadata
    repeated sections:
        u32 + bytes         section name (UTF-8)
        u8                  dtype tag, 0 = float32, 1 = float64
        u32                 rank
        u32 * rank          dims
        payload             product(dims) values

The metadata lists every section's name, dtype and shape, plus the model
config, skeletons, iteration counter, Adam step counts and the generator
state.  Anything after the last declared section is rejected.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import AdamState, ParameterStore
from .dataset import SubjectDataset
from .errors import (BadMagicError, CheckpointError, ShapeMismatchError, TrailingDataError,
                     TruncatedCheckpointError, UnsupportedVersionError)
from .model import ModelConfig, SharedState, SubjectState
from .skeleton import Skeleton

MAGIC = b"GNVX"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _encode_sections(sections: Sequence[Tuple[str, np.ndarray]]) -> List[bytes]:
    out = []
    for name, arr in sections:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"section {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out.append(head + np.ascontiguousarray(arr, dtype=dt).tobytes())
    return out


def write_checkpoint(path, metadata: dict, sections: Sequence[Tuple[str, np.ndarray]]) -> Path:
    names = [n for n, _ in sections]
    if len(set(names)) != len(names):
        raise CheckpointError("section names must be unique")
    meta = dict(metadata)
    meta["sections"] = [{"name": n, "dtype": str(np.asarray(a).dtype), "shape": list(np.shape(a))}
                        for n, a in sections]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        for chunk in _encode_sections(sections):
            fh.write(chunk)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse a checkpoint into (metadata, sections), validating every section
    against the descriptors in the metadata."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} in {path}; not a genvox checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    n = r.u32("metadata length")
    try:
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    sections: Dict[str, np.ndarray] = {}
    for desc in meta.get("sections", []):
        want = desc["name"]
        name = r.take(r.u32("section name length"), "section name").decode("utf-8", errors="replace")
        if name != want:
            raise CheckpointError(f"expected section {want!r}, found {name!r}")
        tag = r.take(1, f"section {name!r} dtype")[0]
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"section {name!r}: unknown dtype tag {tag}")
        rank = r.u32(f"section {name!r} rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"section {name!r} dims"))
        dt = TAG_DTYPES[tag]
        if list(dims) != list(desc["shape"]) or dt != np.dtype(desc["dtype"]).newbyteorder("<"):
            raise ShapeMismatchError(f"section {name!r}: header says {dt} {list(dims)}, metadata says "
                                     f"{desc['dtype']} {desc['shape']}")
        count = int(np.prod(dims, dtype=np.int64))
        payload = r.take(count * dt.itemsize, f"section {name!r} payload")
        sections[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise TrailingDataError(f"{len(r.buf) - r.pos} unexpected trailing bytes after the last section")
    return meta, sections


# --------------------------------------------------------------------------
# model states


@dataclass
class Checkpoint:
    model: ModelConfig
    shared: SharedState
    subjects: List[SubjectState]
    iteration: int = 0
    adam_shared: Optional[AdamState] = None
    adam_subjects: List[Optional[AdamState]] = field(default_factory=list)
    rng_state: Optional[dict] = None
    train_config: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        bg = getattr(np.random, self.rng_state["bit_generator"])()
        bg.state = self.rng_state
        return np.random.Generator(bg)


def _adam_meta(a: Optional[AdamState]):
    if a is None:
        return None
    return {"step": a.step, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}


def _adam_sections(prefix: str, a: Optional[AdamState]):
    if a is None:
        return []
    return [(f"{prefix}/m/{k}", a.m[k]) for k in sorted(a.m)] + [(f"{prefix}/v/{k}", a.v[k]) for k in sorted(a.v)]


def save_checkpoint(path, shared: SharedState, subjects: Sequence[SubjectState] = (), iteration: int = 0,
                    adam_shared: Optional[AdamState] = None, adam_subjects: Sequence[Optional[AdamState]] = (),
                    rng: Optional[np.random.Generator] = None, train_config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> Path:
    adam_subjects = list(adam_subjects) or [None] * len(subjects)
    meta = {
        "model": shared.config.to_dict(),
        "subjects": [{"id": s.subject_id, "skeleton": s.skeleton.to_dict()} for s in subjects],
        "iteration": int(iteration),
        "adam": {"shared": _adam_meta(adam_shared), "subjects": [_adam_meta(a) for a in adam_subjects]},
        "rng": rng.bit_generator.state if rng is not None else None,
        "train_config": train_config,
        "extra": extra or {},
    }
    sections = [("shared/" + k, v) for k, v in shared.store.items()]
    for i, s in enumerate(subjects):
        sections += [(f"subject/{i}/{k}", v) for k, v in s.store.items()]
    sections += _adam_sections("adam/shared", adam_shared)
    for i, a in enumerate(adam_subjects):
        sections += _adam_sections(f"adam/subject/{i}", a)
    return write_checkpoint(path, meta, sections)


def _check_against(prefix: str, template: ParameterStore, sections: Dict[str, np.ndarray]) -> None:
    for name, want in template.items():
        key = prefix + name
        if key not in sections:
            raise ShapeMismatchError(f"section {key!r} missing from checkpoint")
        got = sections[key]
        if got.shape != want.shape:
            raise ShapeMismatchError(f"section {key!r}: checkpoint shape {got.shape}, config expects {want.shape}")
        if got.dtype != want.dtype:
            raise ShapeMismatchError(f"section {key!r}: checkpoint dtype {got.dtype}, config expects {want.dtype}")
    have = {k[len(prefix):] for k in sections if k.startswith(prefix) and "/" not in k[len(prefix):]}
    extra = sorted(have - set(template.params))
    if extra:
        raise ShapeMismatchError(f"unexpected sections under {prefix!r}: {extra}")


def _restore_adam(prefix: str, meta: Optional[dict], sections) -> Optional[AdamState]:
    if meta is None:
        return None
    a = AdamState(meta["beta1"], meta["beta2"], meta["eps"], int(meta["step"]))
    for kind, target in (("m", a.m), ("v", a.v)):
        p = f"{prefix}/{kind}/"
        for k, v in sections.items():
            if k.startswith(p):
                target[k[len(p):]] = v
    return a


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` every parameter section is checked
    against the shapes that config builds, and a mismatch names the section."""
    meta, sections = read_checkpoint(path)
    model = ModelConfig.from_dict(meta["model"])
    check = expected if expected is not None else model
    shared_t = SharedState.create(check, 0)
    _check_against("shared/", shared_t.store, sections)
    shared = SharedState(model, ParameterStore({k: sections["shared/" + k] for k in shared_t.store.params}))
    subjects = []
    for i, sd in enumerate(meta["subjects"]):
        skel = Skeleton.from_dict(sd["skeleton"])
        store = ParameterStore({k[len(f"subject/{i}/"):]: v for k, v in sections.items()
                                if k.startswith(f"subject/{i}/")})
        template = ParameterStore({"individual_voxels": shared_t.store["general_voxels"],
                                   "embedding": np.zeros(check.embed_dim, check.np_dtype)})
        _check_against(f"subject/{i}/", template, sections)
        subjects.append(SubjectState(model, store, skel, sd["id"]))
    adam = meta.get("adam") or {}
    subj_adam = [_restore_adam(f"adam/subject/{i}", m, sections) for i, m in enumerate(adam.get("subjects", []))]
    return Checkpoint(model, shared, subjects, int(meta.get("iteration", 0)),
                      _restore_adam("adam/shared", adam.get("shared"), sections), subj_adam,
                      meta.get("rng"), meta.get("train_config"), meta.get("extra", {}))


def save_run(run, path, extra: Optional[dict] = None) -> Path:
    """Persist everything a :class:`~genvox.trainer.TrainingRun` step mutates."""
    return save_checkpoint(path, run.shared, run.subjects, run.iteration, run.adam_shared, run.adam_subjects,
                           run.rng, run.config.to_dict(), extra)


def resume_run(path, datasets: Sequence[SubjectDataset], config=None):
    """Rebuild a training run from :func:`save_run` output; the next step is
    identical to the one the original run would have taken."""
    from .trainer import TrainConfig, TrainingRun

    ck = load_checkpoint(path)
    if len(datasets) != len(ck.subjects):
        raise CheckpointError(f"checkpoint has {len(ck.subjects)} subjects, got {len(datasets)} datasets")
    if config is None:
        if ck.train_config is None:
            raise CheckpointError("checkpoint has no training config; pass one explicitly")
        config = TrainConfig.from_dict(ck.train_config)
    return TrainingRun(ck.shared, ck.subjects, datasets, config, rng=ck.rng(), adam_shared=ck.adam_shared,
                       adam_subjects=[a or AdamState() for a in ck.adam_subjects] or None, iteration=ck.iteration)

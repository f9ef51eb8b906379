"""Tracklet/camera data model, feature-tensor files, and synthetic datasets.

On-disk formats:

* Manifest: a single JSON document::

      {"version": 1,
       "feature_dims": {"h": 8, "w": 4, "c": 16},
       "cameras": [0, 1],
       "tracklets": [{"id": 0, "camera": 0, "person_id": 3,
                      "frames": [{"image_id": "...", "feature_path": "..."}]}]}

  ``person_id`` is optional ground truth for evaluation only; training code
  operates on a view that does not carry it.

* Feature file: magic bytes ``UPMF``, then little-endian u32 version (=1),
  u32 h, u32 w, u32 c, then ``h*w*c`` little-endian IEEE-754 float32 values,
  height-major (h outer, w middle, c innermost, row-major).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    InvalidSpec,
    MissingFile,
    NonFiniteValue,
    ParseError,
    TruncatedFile,
    ValidationError,
)

MAGIC = b"UPMF"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

_HEADER = struct.Struct("<4sIIII")  # magic, version, h, w, c


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    feature_path: str  # absolute once loaded; relative inside the JSON document


@dataclass(frozen=True)
class Tracklet:
    tracklet_id: int
    camera: int
    frames: tuple[ImageRecord, ...]
    person_id: int | None = None


@dataclass(frozen=True)
class TrainTracklet:
    """Label-free tracklet: deliberately has no person_id attribute."""

    tracklet_id: int
    camera: int
    frames: tuple[ImageRecord, ...]


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    feature_dims: tuple[int, int, int]
    cameras: tuple[int, ...]
    tracklets: tuple[Tracklet, ...]
    root: str = "."

    def training_view(self) -> "TrainingView":
        return TrainingView(
            feature_dims=self.feature_dims,
            cameras=self.cameras,
            tracklets=tuple(
                TrainTracklet(t.tracklet_id, t.camera, t.frames) for t in self.tracklets
            ),
        )


@dataclass(frozen=True)
class TrainingView:
    """What the trainer is allowed to see: no ground-truth identities."""

    feature_dims: tuple[int, int, int]
    cameras: tuple[int, ...]
    tracklets: tuple[TrainTracklet, ...]

    def num_images(self) -> int:
        return sum(len(t.frames) for t in self.tracklets)


@dataclass(frozen=True)
class SynthSpec:
    num_identities: int
    num_cameras: int
    frames_per_tracklet: int
    dims: tuple[int, int, int]
    signature_strength: float = 1.0
    camera_shift: float = 0.0
    occlusion_prob: float = 0.0
    noise_strength: float = 0.0
    seed: int = 0


def write_feature_map(data: np.ndarray, path) -> None:
    """Store a (h, w, c) float tensor in the binary feature-file format."""
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise DimMismatch(f"expected a rank-3 tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"refusing to write non-finite values to {path}")
    h, w, c = arr.shape
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, c))
        f.write(arr.tobytes())


def read_feature_map(record, dims: tuple[int, int, int]) -> np.ndarray:
    """Read one stored feature tensor and check it against the declared dims.

    ``record`` is an ImageRecord or anything with a ``feature_path``
    attribute; a bare path works too.
    """
    path = Path(getattr(record, "feature_path", record))
    if not path.is_file():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header incomplete")
    magic, version, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise BadMagic(f"{path}: not a version-{FORMAT_VERSION} {MAGIC.decode()} file")
    if (h, w, c) != tuple(dims):
        raise DimMismatch(f"{path}: header dims {(h, w, c)} != declared {tuple(dims)}")
    n = h * w * c
    body = raw[_HEADER.size :]
    if len(body) < 4 * n:
        raise TruncatedFile(f"{path}: expected {4 * n} payload bytes, got {len(body)}")
    arr = np.frombuffer(body[: 4 * n], dtype="<f4").reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{path}: tensor contains non-finite values")
    return arr.copy()


def _manifest_from_json(doc: dict, root: Path) -> DatasetManifest:
    try:
        dims = doc["feature_dims"]
        feature_dims = (int(dims["h"]), int(dims["w"]), int(dims["c"]))
        cameras = tuple(int(c) for c in doc["cameras"])
        tracklets = []
        for t in doc["tracklets"]:
            frames = tuple(
                ImageRecord(str(fr["image_id"]), str(root / fr["feature_path"]))
                for fr in t["frames"]
            )
            pid = t.get("person_id")
            tracklets.append(
                Tracklet(
                    tracklet_id=int(t["id"]),
                    camera=int(t["camera"]),
                    frames=frames,
                    person_id=None if pid is None else int(pid),
                )
            )
        return DatasetManifest(
            version=int(doc["version"]),
            feature_dims=feature_dims,
            cameras=cameras,
            tracklets=tuple(tracklets),
            root=str(root),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed manifest: {exc}") from exc


class EngineFileError(Exception):
    """Internal: header problems reported during eager manifest validation."""


def _validate_manifest(m: DatasetManifest, check_files: bool = True) -> None:
    if m.version != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {m.version}")
    h, w, c = m.feature_dims
    if min(h, w, c) < 1:
        raise ValidationError(f"feature dims must be positive, got {m.feature_dims}")
    if sorted(m.cameras) != list(range(len(m.cameras))):
        raise ValidationError(f"cameras must be dense 0..n-1, got {list(m.cameras)}")
    cam_set = set(m.cameras)
    seen_tracklets: set[tuple[int, int]] = set()
    seen_images: set[str] = set()
    for t in m.tracklets:
        if t.camera not in cam_set:
            raise ValidationError(
                f"tracklet {t.tracklet_id} references undeclared camera {t.camera}"
            )
        key = (t.camera, t.tracklet_id)
        if key in seen_tracklets:
            raise ValidationError(f"duplicate tracklet id {t.tracklet_id} in camera {t.camera}")
        seen_tracklets.add(key)
        if not t.frames:
            raise ValidationError(f"tracklet {t.tracklet_id} has no frames")
        for fr in t.frames:
            if fr.image_id in seen_images:
                raise ValidationError(f"duplicate image_id {fr.image_id!r}")
            seen_images.add(fr.image_id)
            if check_files:
                try:
                    _check_feature_header(Path(fr.feature_path), m.feature_dims)
                except EngineFileError as exc:
                    raise ValidationError(str(exc)) from exc


def _check_feature_header(path: Path, dims: tuple[int, int, int]) -> None:
    if not path.is_file():
        raise EngineFileError(f"feature file missing: {path}")
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise EngineFileError(f"{path}: header incomplete")
    magic, version, h, w, c = _HEADER.unpack(head)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise EngineFileError(f"{path}: bad magic/version")
    if (h, w, c) != tuple(dims):
        raise EngineFileError(f"{path}: dims {(h, w, c)} != manifest dims {tuple(dims)}")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest.

    ``check_files=True`` additionally verifies that every referenced feature
    file exists and carries a matching header.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    manifest = _manifest_from_json(doc, path.parent.resolve())
    _validate_manifest(manifest, check_files=check_files)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest document with feature paths relative to its directory."""
    path = Path(path)
    root = path.parent.resolve()
    doc = {
        "version": manifest.version,
        "feature_dims": {
            "h": manifest.feature_dims[0],
            "w": manifest.feature_dims[1],
            "c": manifest.feature_dims[2],
        },
        "cameras": list(manifest.cameras),
        "tracklets": [
            {
                "id": t.tracklet_id,
                "camera": t.camera,
                **({"person_id": t.person_id} if t.person_id is not None else {}),
                "frames": [
                    {
                        "image_id": fr.image_id,
                        "feature_path": _relativize(fr.feature_path, root),
                    }
                    for fr in t.frames
                ],
            }
            for t in manifest.tracklets
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _relativize(feature_path: str, root: Path) -> str:
    p = Path(feature_path)
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


def _validate_spec(spec: SynthSpec) -> None:
    if min(spec.num_identities, spec.num_cameras, spec.frames_per_tracklet) < 1:
        raise InvalidSpec("identity/camera/frame counts must all be >= 1")
    if len(spec.dims) != 3 or min(spec.dims) < 1:
        raise InvalidSpec(f"dims must be three positive integers, got {spec.dims}")
    if spec.signature_strength < 0 or spec.camera_shift < 0 or spec.noise_strength < 0:
        raise InvalidSpec("strengths must be >= 0")
    if not 0.0 <= spec.occlusion_prob <= 1.0:
        raise InvalidSpec("occlusion_prob must lie in [0, 1]")


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Generate a synthetic dataset with planted identities.

    Every identity appears once per camera as one tracklet. Each frame is
    built as: a per-identity base pattern (constant over rows), plus a
    per-row identity signature scaled by ``signature_strength`` (so every
    horizontal band carries identity information), passed through a
    camera-specific channel-wise affine shift, plus per-frame Gaussian noise.
    With probability ``occlusion_prob`` one random row is replaced by shared
    clutter. Output is a pure function of the spec (including the seed).
    """
    _validate_spec(spec)
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    h, w, c = spec.dims
    rng = np.random.default_rng(spec.seed)
    base = rng.normal(size=(spec.num_identities, 1, w, c))
    signature = rng.normal(size=(spec.num_identities, h, 1, c))
    cam_gain = 1.0 + spec.camera_shift * rng.normal(size=(spec.num_cameras, c))
    cam_offset = spec.camera_shift * rng.normal(size=(spec.num_cameras, c))
    clutter = rng.normal(size=(h, w, c))

    tracklets = []
    for cam in range(spec.num_cameras):
        for ident in range(spec.num_identities):
            core = base[ident] + spec.signature_strength * signature[ident]
            shifted = core * cam_gain[cam] + cam_offset[cam]
            frames = []
            for j in range(spec.frames_per_tracklet):
                frame = shifted + spec.noise_strength * rng.normal(size=(h, w, c))
                if rng.uniform() < spec.occlusion_prob:
                    row = int(rng.integers(h))
                    frame = frame.copy()
                    frame[row] = clutter[row]
                image_id = f"c{cam}_t{ident}_f{j}"
                rel = f"features/{image_id}.upmf"
                write_feature_map(frame.astype(np.float32), out / rel)
                frames.append(ImageRecord(image_id, rel))
            tracklets.append(
                Tracklet(tracklet_id=ident, camera=cam, frames=tuple(frames), person_id=ident)
            )

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        feature_dims=(h, w, c),
        cameras=tuple(range(spec.num_cameras)),
        tracklets=tuple(tracklets),
        root=str(out.resolve()),
    )
    save_manifest(manifest, out / "manifest.json")
    return load_manifest(out / "manifest.json")


def save_synth_spec(spec: SynthSpec, path) -> None:
    doc = {
        "num_identities": spec.num_identities,
        "num_cameras": spec.num_cameras,
        "frames_per_tracklet": spec.frames_per_tracklet,
        "dims": {"h": spec.dims[0], "w": spec.dims[1], "c": spec.dims[2]},
        "signature_strength": spec.signature_strength,
        "camera_shift": spec.camera_shift,
        "occlusion_prob": spec.occlusion_prob,
        "noise_strength": spec.noise_strength,
        "seed": spec.seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_synth_spec(path) -> SynthSpec:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text())
        dims = doc.pop("dims")
        spec = SynthSpec(dims=(int(dims["h"]), int(dims["w"]), int(dims["c"])), **doc)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    _validate_spec(spec)
    return spec


__all__ = [
    "DatasetManifest",
    "ImageRecord",
    "SynthSpec",
    "Tracklet",
    "TrainTracklet",
    "TrainingView",
    "generate_synthetic",
    "load_manifest",
    "load_synth_spec",
    "read_feature_map",
    "save_manifest",
    "save_synth_spec",
    "write_feature_map",
]

"""Walk an image dataset and emit the engine's manifest + feature files.

Expected source layout: one directory per camera, one subdirectory per
tracklet, image files inside. Tracklet directory names identify the person,
so the same name under two cameras becomes the same person_id (PRID-style):

    source/
      cam_a/person_0001/0001.png ...
      cam_b/person_0001/0001.png ...

Output formats are the engine's external interfaces: a ``manifest.json``
document and one "UPMF" tensor file per frame (magic "UPMF", u32 version=1,
u32 h, u32 w, u32 c little-endian, then h*w*c little-endian float32 values).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import get_backbone
from .errors import LayoutError

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
_HEADER = struct.Struct("<4sIIII")

# the published experimental protocol keeps only tracklets longer than 27
# frames on PRID-style data
PRID_MIN_FRAMES = 28


@dataclass
class ExportSpec:
    source: Path
    out: Path
    backbone: str = "stub"
    profile: str = "resnet50"
    dims: tuple[int, int, int] | None = None  # required for the toy profile
    input_size: tuple[int, int] = (256, 128)
    min_frames: int = 1
    weights: str = "pretrained"


@dataclass
class ExportResult:
    manifest_path: Path
    num_tracklets: int
    num_frames: int
    dropped_tracklets: int
    dims: tuple[int, int, int] = field(default=(0, 0, 0))


def _write_tensor(arr: np.ndarray, path: Path) -> None:
    h, w, c = arr.shape
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(b"UPMF", 1, h, w, c))
        f.write(data.tobytes())


def scan_layout(source: Path):
    """Camera and tracklet directories in deterministic name order."""
    cam_dirs = sorted(p for p in source.iterdir() if p.is_dir())
    if not cam_dirs:
        raise LayoutError(f"{source}: no camera directories found")
    layout = []
    for cam_dir in cam_dirs:
        tracklets = []
        for t_dir in sorted(p for p in cam_dir.iterdir() if p.is_dir()):
            frames = sorted(
                p for p in t_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
            )
            tracklets.append((t_dir.name, frames))
        if not tracklets:
            raise LayoutError(f"{cam_dir}: no tracklet directories found")
        layout.append((cam_dir.name, tracklets))
    return layout


def export(spec: ExportSpec) -> ExportResult:
    """Run the backbone over every kept frame and write manifest + tensors."""
    backbone = get_backbone(
        spec.backbone, spec.profile, dims=spec.dims,
        input_size=spec.input_size, weights=spec.weights,
    )
    h, w, c = backbone.dims
    layout = scan_layout(Path(spec.source))

    person_index = {
        name: i
        for i, name in enumerate(sorted({t_name for _, ts in layout for t_name, _ in ts}))
    }

    out = Path(spec.out)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    tracklets_doc = []
    num_frames = dropped = 0
    for cam_id, (_cam_name, tracklets) in enumerate(layout):
        next_tid = 0
        for t_name, frames in tracklets:
            if len(frames) < spec.min_frames:
                dropped += 1
                continue
            frame_docs = []
            for j, frame_path in enumerate(frames):
                fmap = backbone.extract(frame_path)
                image_id = f"c{cam_id}_{t_name}_f{j}"
                rel = f"features/{image_id}.upmf"
                _write_tensor(fmap, out / rel)
                frame_docs.append({"image_id": image_id, "feature_path": rel})
                num_frames += 1
            tracklets_doc.append(
                {
                    "id": next_tid,
                    "camera": cam_id,
                    "person_id": person_index[t_name],
                    "frames": frame_docs,
                }
            )
            next_tid += 1

    manifest = {
        "version": 1,
        "feature_dims": {"h": h, "w": w, "c": c},
        "cameras": list(range(len(layout))),
        "tracklets": tracklets_doc,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExportResult(
        manifest_path=manifest_path,
        num_tracklets=len(tracklets_doc),
        num_frames=num_frames,
        dropped_tracklets=dropped,
        dims=(h, w, c),
    )

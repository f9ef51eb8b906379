import numpy as np
import pytest

from stripereid.dataset import (
    ImageRecord,
    DatasetManifest,
    SynthSpec,
    Tracklet,
    generate_synthetic,
    write_feature_map,
)

EASY_SPEC = SynthSpec(
    num_identities=12,
    num_cameras=2,
    frames_per_tracklet=6,
    dims=(8, 4, 16),
    signature_strength=3.0,
    camera_shift=0.3,
    occlusion_prob=0.0,
    noise_strength=0.1,
    seed=13,
)


@pytest.fixture(scope="session")
def easy_dataset(tmp_path_factory):
    """Small planted-identity dataset shared by the training-path tests."""
    root = tmp_path_factory.mktemp("easy")
    return generate_synthetic(EASY_SPEC, root)


def make_manifest(tmp_path, dims=(4, 2, 3), cameras=(0, 1), tracklets=None, fill=0.0):
    """Hand-written manifest with real feature files on disk."""
    if tracklets is None:
        tracklets = [(0, 0, 2, 0), (1, 0, 2, 1), (0, 1, 2, 0), (1, 1, 2, 1)]
    feat_dir = tmp_path / "features"
    feat_dir.mkdir(exist_ok=True)
    entries = []
    for tid, cam, n_frames, pid in tracklets:
        frames = []
        for j in range(n_frames):
            name = f"c{cam}_t{tid}_f{j}"
            write_feature_map(np.full(dims, fill, dtype=np.float32), feat_dir / f"{name}.upmf")
            frames.append(ImageRecord(name, str(feat_dir / f"{name}.upmf")))
        entries.append(Tracklet(tid, cam, tuple(frames), person_id=pid))
    manifest = DatasetManifest(
        version=1,
        feature_dims=dims,
        cameras=tuple(cameras),
        tracklets=tuple(entries),
        root=str(tmp_path),
    )
    return manifest

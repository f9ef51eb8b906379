import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stripereid.dataset import (
    ImageRecord,
    SynthSpec,
    generate_synthetic,
    load_manifest,
    read_feature_map,
    save_manifest,
    write_feature_map,
)
from stripereid.errors import (
    BadMagic,
    DimMismatch,
    InvalidSpec,
    MissingFile,
    NonFiniteValue,
    ParseError,
    TruncatedFile,
    ValidationError,
)

from conftest import make_manifest


def _write_manifest_doc(tmp_path, mutate=None):
    manifest = make_manifest(tmp_path)
    path = tmp_path / "manifest.json"
    save_manifest(manifest, path)
    if mutate is not None:
        doc = json.loads(path.read_text())
        mutate(doc)
        path.write_text(json.dumps(doc))
    return path


class TestFeatureFile:
    def test_zero_tensor_round_trip(self, tmp_path):
        path = tmp_path / "z.upmf"
        write_feature_map(np.zeros((8, 4, 16), dtype=np.float32), path)
        got = read_feature_map(ImageRecord("z", str(path)), (8, 4, 16))
        assert got.shape == (8, 4, 16)
        assert not got.any()

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(
            dtype=np.float32,
            shape=hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=4),
            elements=st.floats(width=32, allow_nan=False, allow_infinity=False),
        )
    )
    def test_round_trip_is_identity(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("rt") / "t.upmf"
        write_feature_map(arr, path)
        got = read_feature_map(ImageRecord("t", str(path)), arr.shape)
        assert got.tobytes() == arr.astype("<f4").tobytes()

    def test_header_dim_mismatch(self, tmp_path):
        path = tmp_path / "t.upmf"
        write_feature_map(np.zeros((8, 4, 16), dtype=np.float32), path)
        with pytest.raises(DimMismatch):
            read_feature_map(ImageRecord("t", str(path)), (8, 4, 32))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.upmf"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagic):
            read_feature_map(ImageRecord("t", str(path)), (1, 1, 1))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.upmf"
        write_feature_map(np.zeros((2, 2, 2), dtype=np.float32), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedFile):
            read_feature_map(ImageRecord("t", str(path)), (2, 2, 2))

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "t.upmf"
        body = struct.pack("<f", float("inf")) * 2
        path.write_bytes(struct.pack("<4sIIII", b"UPMF", 1, 1, 1, 2) + body)
        with pytest.raises(NonFiniteValue):
            read_feature_map(ImageRecord("t", str(path)), (1, 1, 2))

    def test_writer_refuses_non_finite(self, tmp_path):
        with pytest.raises(NonFiniteValue):
            write_feature_map(np.full((1, 1, 1), np.nan), tmp_path / "bad.upmf")

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            read_feature_map(ImageRecord("t", str(tmp_path / "absent.upmf")), (1, 1, 1))


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = make_manifest(tmp_path, dims=(8, 4, 16))
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        m = load_manifest(path)
        assert len(m.tracklets) == 4
        assert m.feature_dims == (8, 4, 16)
        assert m.cameras == (0, 1)

    def test_dangling_camera_rejected(self, tmp_path):
        def mutate(doc):
            doc["tracklets"][0]["camera"] = 3

        path = _write_manifest_doc(tmp_path, mutate)
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_duplicate_image_id_rejected(self, tmp_path):
        def mutate(doc):
            doc["tracklets"][0]["frames"][1]["image_id"] = doc["tracklets"][0]["frames"][0][
                "image_id"
            ]

        path = _write_manifest_doc(tmp_path, mutate)
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_duplicate_tracklet_rejected(self, tmp_path):
        def mutate(doc):
            doc["tracklets"][1]["id"] = doc["tracklets"][0]["id"]
            doc["tracklets"][1]["camera"] = doc["tracklets"][0]["camera"]

        path = _write_manifest_doc(tmp_path, mutate)
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_sparse_cameras_rejected(self, tmp_path):
        def mutate(doc):
            doc["cameras"] = [0, 2]

        path = _write_manifest_doc(tmp_path, mutate)
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_empty_tracklet_rejected(self, tmp_path):
        def mutate(doc):
            doc["tracklets"][0]["frames"] = []

        path = _write_manifest_doc(tmp_path, mutate)
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_missing_feature_file_rejected(self, tmp_path):
        path = _write_manifest_doc(tmp_path)
        victim = next((tmp_path / "features").iterdir())
        victim.unlink()
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            load_manifest(tmp_path / "nope.json")

    def test_garbage_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_prid_style_dims_accepted(self, tmp_path):
        manifest = make_manifest(tmp_path, dims=(8, 4, 2048), tracklets=[(0, 0, 1, 0), (0, 1, 1, 0)])
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        m = load_manifest(path)
        assert m.feature_dims == (8, 4, 2048)

    def test_training_view_has_no_person_id(self, tmp_path):
        path = _write_manifest_doc(tmp_path)
        view = load_manifest(path).training_view()
        for t in view.tracklets:
            assert not hasattr(t, "person_id")


class TestSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(3, 2, 4, (8, 4, 8), 2.0, 0.2, 0.3, 0.1, seed=7)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
        files_a = sorted((tmp_path / "a/features").iterdir())
        files_b = sorted((tmp_path / "b/features").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(files_a, files_b))

    def test_noiseless_tracklet_frames_identical(self, tmp_path):
        spec = SynthSpec(2, 2, 3, (4, 2, 4), 1.0, 0.2, occlusion_prob=0.0, noise_strength=0.0, seed=3)
        m = generate_synthetic(spec, tmp_path)
        for t in m.tracklets:
            frames = [read_feature_map(fr, m.feature_dims) for fr in t.frames]
            for f in frames[1:]:
                assert np.array_equal(frames[0], f)

    def test_cross_camera_nearest_mean_recovers_identity(self, tmp_path):
        spec = SynthSpec(12, 2, 6, (8, 4, 16), 3.0, 0.3, 0.0, 0.1, seed=13)
        m = generate_synthetic(spec, tmp_path)
        means = {
            (t.camera, t.tracklet_id): np.stack(
                [read_feature_map(fr, m.feature_dims) for fr in t.frames]
            ).mean(axis=0).ravel()
            for t in m.tracklets
        }
        hits = 0
        for t in m.tracklets:
            me = means[(t.camera, t.tracklet_id)]
            best = min(
                (o for o in m.tracklets if o.camera != t.camera),
                key=lambda o: float(np.linalg.norm(me - means[(o.camera, o.tracklet_id)])),
            )
            hits += best.person_id == t.person_id
        assert hits / len(m.tracklets) >= 0.95

    def test_invalid_specs(self, tmp_path):
        with pytest.raises(InvalidSpec):
            generate_synthetic(SynthSpec(0, 2, 1, (2, 2, 2)), tmp_path)
        with pytest.raises(InvalidSpec):
            generate_synthetic(SynthSpec(1, 1, 1, (2, 2, 2), occlusion_prob=1.5), tmp_path)
        with pytest.raises(InvalidSpec):
            generate_synthetic(SynthSpec(1, 1, 1, (2, 2, 2), signature_strength=-1.0), tmp_path)

    def test_generated_manifest_validates(self, tmp_path):
        spec = SynthSpec(2, 2, 2, (4, 2, 4), seed=1)
        m = generate_synthetic(spec, tmp_path)
        assert load_manifest(tmp_path / "manifest.json").feature_dims == m.feature_dims

"""Test-time fusion, tracklet aggregation, retrieval metrics, and reports.

Retrieval uses Euclidean distance between unit-norm vectors; galleries are
ranked ascending with ties broken by gallery index. CMC@r is the fraction of
probes whose first correct match appears within the top r; mAP averages, over
probes, the average precision of each probe's relevant gallery items.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, Tracklet
from .errors import (
    EmptyTracklet,
    InsufficientCrossCameraIdentities,
    MissingGroundTruth,
    PartCountMismatch,
)
from .features import normalize

AGGREGATIONS = ("max", "mean")


def assemble_parts(parts: np.ndarray) -> np.ndarray:
    """Normalize each part vector, concatenate them, and normalize again."""
    parts = np.asarray(parts)
    flat = np.concatenate([normalize(p) for p in parts])
    return normalize(flat)


def fuse_features(local_parts: np.ndarray, global_parts: np.ndarray) -> np.ndarray:
    """Per-part concat of local and global features, normalized twice.

    ``local_parts`` is (k, c) and ``global_parts`` is (k, cp); the result has
    length k * (c + cp).
    """
    local_parts = np.asarray(local_parts)
    global_parts = np.asarray(global_parts)
    if local_parts.shape[0] != global_parts.shape[0]:
        raise PartCountMismatch(
            f"local has {local_parts.shape[0]} parts, global has {global_parts.shape[0]}"
        )
    pairs = [
        np.concatenate([local_parts[i], global_parts[i]])
        for i in range(local_parts.shape[0])
    ]
    return normalize(np.concatenate([normalize(p) for p in pairs]))


def tracklet_feature(frame_feats: np.ndarray, mode: str = "max") -> np.ndarray:
    """Aggregate per-frame vectors into one unit-norm tracklet vector."""
    frame_feats = np.asarray(frame_feats)
    if frame_feats.ndim != 2 or frame_feats.shape[0] < 1:
        raise EmptyTracklet(f"expected (N, d) with N >= 1, got {frame_feats.shape}")
    if mode == "max":
        agg = frame_feats.max(axis=0)
    elif mode == "mean":
        agg = frame_feats.mean(axis=0)
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    return normalize(agg)


@dataclass
class EvalResult:
    cmc: np.ndarray  # full curve, index r-1 holds CMC@r
    mean_ap: float
    order: np.ndarray  # (P, G) ranked gallery indices per probe


def cmc_at(curve: np.ndarray, rank: int) -> float:
    return float(curve[min(rank, len(curve)) - 1])


def evaluate(
    probe_feats: np.ndarray,
    probe_ids,
    gallery_feats: np.ndarray,
    gallery_ids,
) -> EvalResult:
    """Score a probe set against a gallery."""
    if probe_ids is None or gallery_ids is None:
        raise MissingGroundTruth("person ids are required for evaluation")
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if None in probe_ids.tolist() or None in gallery_ids.tolist():
        raise MissingGroundTruth("person ids are required for evaluation")
    probe_feats = np.asarray(probe_feats)
    gallery_feats = np.asarray(gallery_feats)
    P, G = probe_feats.shape[0], gallery_feats.shape[0]

    diffs = probe_feats[:, None, :] - gallery_feats[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    order = np.argsort(dist, axis=1, kind="stable")  # ties fall to lower index

    cmc_counts = np.zeros(G)
    aps = np.zeros(P)
    for p in range(P):
        matches = gallery_ids[order[p]] == probe_ids[p]
        if matches.any():
            first = int(np.argmax(matches))
            cmc_counts[first:] += 1
            hits = np.flatnonzero(matches)
            precisions = np.arange(1, hits.size + 1) / (hits + 1)
            aps[p] = precisions.mean()
    return EvalResult(cmc=cmc_counts / P, mean_ap=float(aps.mean()), order=order)


@dataclass
class SplitResult:
    train_ids: list[int]
    probe: list[Tracklet]
    gallery: list[Tracklet]


def split_protocol(manifest: DatasetManifest, trial_seed: int) -> SplitResult:
    """Halve the cross-camera identities into train and test by seeded shuffle.

    Test tracklets of the lowest camera id form the probe set; test tracklets
    of every other camera form the gallery.
    """
    cams_of: dict[int, set[int]] = {}
    for t in manifest.tracklets:
        if t.person_id is None:
            raise MissingGroundTruth(f"tracklet {t.tracklet_id} has no person_id")
        cams_of.setdefault(t.person_id, set()).add(t.camera)
    eligible = sorted(pid for pid, cams in cams_of.items() if len(cams) >= 2)
    if len(eligible) < 2:
        raise InsufficientCrossCameraIdentities(
            f"need >= 2 identities seen by >= 2 cameras, have {len(eligible)}"
        )
    perm = np.random.default_rng(trial_seed).permutation(eligible)
    n_train = len(eligible) // 2
    train_ids = sorted(int(p) for p in perm[:n_train])
    test_ids = {int(p) for p in perm[n_train:]}

    probe_cam = min(manifest.cameras)
    probe = [t for t in manifest.tracklets if t.person_id in test_ids and t.camera == probe_cam]
    gallery = [t for t in manifest.tracklets if t.person_id in test_ids and t.camera != probe_cam]
    return SplitResult(train_ids=train_ids, probe=probe, gallery=gallery)


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    rank20: float
    mean_ap: float
    trials: int
    per_trial: list[dict]
    config: dict
    cmc_curve: np.ndarray
    orders: list[np.ndarray] = field(default_factory=list, repr=False)
    timing_s: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank20": self.rank20,
            "mAP": self.mean_ap,
            "trials": self.trials,
            "per_trial": self.per_trial,
            "config": self.config,
        }


def _score_tracklets(probe, gallery, feats: dict[tuple[int, int], np.ndarray]) -> EvalResult:
    probe_feats = np.stack([feats[(t.camera, t.tracklet_id)] for t in probe])
    gallery_feats = np.stack([feats[(t.camera, t.tracklet_id)] for t in gallery])
    probe_ids = [t.person_id for t in probe]
    gallery_ids = [t.person_id for t in gallery]
    return evaluate(probe_feats, probe_ids, gallery_feats, gallery_ids)


def _result_row(res: EvalResult) -> dict:
    return {
        "rank1": cmc_at(res.cmc, 1),
        "rank5": cmc_at(res.cmc, 5),
        "rank20": cmc_at(res.cmc, 20),
        "mAP": res.mean_ap,
    }


def evaluate_dataset(
    manifest: DatasetManifest,
    feats: dict[tuple[int, int], np.ndarray],
    trials: int = 0,
    base_seed: int = 0,
    config: dict | None = None,
) -> EvalReport:
    """Full evaluation driver.

    ``trials=0`` scores every identity with the lowest camera as probe set;
    ``trials=n`` runs the halved-identity protocol n times with seeds
    ``base_seed + i`` and averages the reports.
    """
    start = time.perf_counter()
    results: list[EvalResult] = []
    if trials < 1:
        probe_cam = min(manifest.cameras)
        probe = [t for t in manifest.tracklets if t.camera == probe_cam]
        gallery = [t for t in manifest.tracklets if t.camera != probe_cam]
        if not probe or not gallery:
            raise InsufficientCrossCameraIdentities("need tracklets in >= 2 cameras")
        results.append(_score_tracklets(probe, gallery, feats))
    else:
        for i in range(trials):
            split = split_protocol(manifest, base_seed + i)
            results.append(_score_tracklets(split.probe, split.gallery, feats))

    per_trial = [_result_row(r) for r in results]
    longest = max(len(r.cmc) for r in results)
    padded = np.stack([
        np.concatenate([r.cmc, np.full(longest - len(r.cmc), r.cmc[-1])]) for r in results
    ])
    curve = padded.mean(axis=0)
    return EvalReport(
        rank1=float(np.mean([row["rank1"] for row in per_trial])),
        rank5=float(np.mean([row["rank5"] for row in per_trial])),
        rank20=float(np.mean([row["rank20"] for row in per_trial])),
        mean_ap=float(np.mean([row["mAP"] for row in per_trial])),
        trials=len(results),
        per_trial=per_trial,
        config=config or {},
        cmc_curve=curve,
        orders=[r.order for r in results],
        timing_s=time.perf_counter() - start,
    )


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    """Write the report JSON and the full CMC curve as ``rank,cmc`` rows."""
    json_path = Path(json_path)
    json_path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = Path(csv_path) if csv_path is not None else json_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "cmc"])
        for r, value in enumerate(report.cmc_curve, start=1):
            writer.writerow([r, f"{value:.10f}"])

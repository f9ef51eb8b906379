"""Per-part anchor banks, EMA updates, cross-camera pairing, and losses.

Each tracklet owns one intra-camera anchor per part (its running feature
center) and one cross-camera anchor per part (the fused center of mutually
nearest anchors across cameras). Losses are top-push hinges that compare an
item's distance to its source anchors against batch-adaptive thresholds; the
thresholds and all anchors are treated as constants when differentiating, so
gradients flow only into the batch features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyTracklet, SingleCamera, UnknownSource, UnknownTracklet
from .features import normalize


def ema_step(anchor: np.ndarray, x: np.ndarray, eta: float) -> np.ndarray:
    """One exponential-moving-average move of an anchor toward x."""
    return anchor - eta * (anchor - x)


@dataclass
class AnchorBank:
    """Intra- and cross-camera anchors indexed by (camera, tracklet row, part).

    ``intra[cam]`` and ``cross[cam]`` are (T_cam, k, d) arrays; ``index``
    maps tracklet ids to rows. Anchors are renormalized to unit norm after
    every update unless ``renormalize`` is disabled.
    """

    intra: dict[int, np.ndarray]
    cross: dict[int, np.ndarray]
    index: dict[int, dict[int, int]]
    eta: float
    t: int = 0
    renormalize: bool = True

    @property
    def k(self) -> int:
        return next(iter(self.intra.values())).shape[1]

    @property
    def dim(self) -> int:
        return next(iter(self.intra.values())).shape[2]

    def cameras(self) -> list[int]:
        return sorted(self.intra)

    def row(self, camera: int, tracklet_id: int) -> int:
        try:
            return self.index[camera][tracklet_id]
        except KeyError:
            raise UnknownTracklet(f"tracklet {tracklet_id} of camera {camera} not in bank") from None

    def snapshot_intra(self) -> dict[int, np.ndarray]:
        return {cam: arr.copy() for cam, arr in self.intra.items()}

    def ema_update(self, camera: int, tracklet_id: int, part: int, x: np.ndarray) -> np.ndarray:
        """Move one intra anchor toward x (Exponential Moving Average)."""
        row = self.row(camera, tracklet_id)
        moved = ema_step(self.intra[camera][row, part], x, self.eta)
        if self.renormalize:
            moved = normalize(moved)
        self.intra[camera][row, part] = moved
        return moved

    def ema_update_item(self, camera: int, tracklet_id: int, feats: np.ndarray) -> None:
        """Apply the EMA update for every part of one batch item (k, d)."""
        for part in range(feats.shape[0]):
            self.ema_update(camera, tracklet_id, part, feats[part])


def init_anchors(view, encode_frames, eta: float, renormalize: bool = True) -> AnchorBank:
    """Build a bank from one inference pass over the training view.

    ``encode_frames(records)`` must return the (N, k, d) aware features of a
    tracklet's frames. Each intra anchor starts as the normalized mean of its
    tracklet's part features; cross anchors start as copies.
    """
    per_cam: dict[int, list[np.ndarray]] = {}
    index: dict[int, dict[int, int]] = {}
    for t in view.tracklets:
        if not t.frames:
            raise EmptyTracklet(f"tracklet {t.tracklet_id} of camera {t.camera} has no frames")
        feats = np.asarray(encode_frames(t.frames))  # (N, k, d)
        mean = feats.mean(axis=0)
        if renormalize:
            mean = np.stack([normalize(mean[i]) for i in range(mean.shape[0])])
        rows = per_cam.setdefault(t.camera, [])
        index.setdefault(t.camera, {})[t.tracklet_id] = len(rows)
        rows.append(mean)
    intra = {cam: np.stack(rows) for cam, rows in per_cam.items()}
    cross = {cam: arr.copy() for cam, arr in intra.items()}
    return AnchorBank(intra=intra, cross=cross, index=index, eta=eta, renormalize=renormalize)


def compute_crc_pairs(bank: AnchorBank, part: int) -> set[tuple[tuple[int, int], tuple[int, int]]]:
    """Mutual nearest neighbors between intra anchors of different cameras.

    A pair {A, B} is returned iff B is A's nearest anchor among all anchors
    of other cameras and vice versa. Distance ties are broken toward the
    lower (camera, tracklet) index. Pairs are canonically ordered tuples of
    (camera, tracklet_id).
    """
    cams = bank.cameras()
    if len(cams) < 2:
        warnings.warn("cross-camera pairing needs >= 2 cameras", SingleCamera, stacklevel=2)
        return set()

    keys: list[tuple[int, int]] = []
    vecs: list[np.ndarray] = []
    cam_of: list[int] = []
    # flat list ordered by (camera, tracklet id) so argmin tie-breaks correctly
    for cam in cams:
        for tid in sorted(bank.index[cam]):
            keys.append((cam, tid))
            vecs.append(bank.intra[cam][bank.index[cam][tid], part])
            cam_of.append(cam)
    mat = np.stack(vecs)  # (T, d)
    cam_arr = np.asarray(cam_of)
    d2 = ((mat[:, None, :] - mat[None, :, :]) ** 2).sum(axis=2)
    d2[cam_arr[:, None] == cam_arr[None, :]] = np.inf
    nn = d2.argmin(axis=1)  # first minimum = lowest (camera, tracklet) index

    pairs = set()
    for a in range(len(keys)):
        b = int(nn[a])
        if a < b and int(nn[b]) == a:
            pairs.add((keys[a], keys[b]))
    return pairs


def update_cross_anchors(
    bank: AnchorBank,
    part: int,
    crc_pairs: set[tuple[tuple[int, int], tuple[int, int]]],
    warmup_active: bool,
    intra_before: dict[int, np.ndarray] | None = None,
) -> None:
    """Refresh every cross anchor of one part.

    During warmup the cross anchors are pinned to the intra anchors. After
    warmup, paired anchors take the (renormalized) average of their own
    updated intra anchor and the partner's pre-update value from
    ``intra_before``; unpaired anchors fall back to their intra anchor.
    """
    for cam in bank.cameras():
        bank.cross[cam][:, part] = bank.intra[cam][:, part]
    if warmup_active:
        return
    before = intra_before if intra_before is not None else bank.intra
    for (cam_a, tid_a), (cam_b, tid_b) in crc_pairs:
        row_a = bank.row(cam_a, tid_a)
        row_b = bank.row(cam_b, tid_b)
        fused_a = 0.5 * (bank.intra[cam_a][row_a, part] + before[cam_b][row_b, part])
        fused_b = 0.5 * (bank.intra[cam_b][row_b, part] + before[cam_a][row_a, part])
        if bank.renormalize:
            fused_a = normalize(fused_a)
            fused_b = normalize(fused_b)
        bank.cross[cam_a][row_a, part] = fused_a
        bank.cross[cam_b][row_b, part] = fused_b


@dataclass
class BatchDistances:
    """Distance statistics of one mini-batch against the bank.

    All arrays are (B, k) except the source anchor copies, which are
    (B, k, d) and deliberately detached from the bank.
    """

    d_min: np.ndarray
    d_src: np.ndarray
    d_cross: np.ndarray
    nn_row: np.ndarray  # argmin row within the item's own camera
    dbar_item: np.ndarray  # each item's per-camera mean of d_min, (B, k)
    dbar: dict[int, np.ndarray]  # camera -> (k,)
    src_intra: np.ndarray
    src_cross: np.ndarray


def compute_distances(
    feats: np.ndarray, sources: list[tuple[int, int]], bank: AnchorBank
) -> BatchDistances:
    """Euclidean distances of batch features to their own-camera anchors.

    ``feats`` is (B, k, d); ``sources`` lists each item's (camera,
    tracklet_id). Per item and part: distance to every intra anchor of the
    item's camera (minimum and the row attaining it), distance to the source
    intra anchor, and distance to the source cross anchor. ``dbar`` averages
    the minima over the batch items of each camera.
    """
    feats = np.asarray(feats)
    B, k, d = feats.shape
    d_min = np.empty((B, k), dtype=feats.dtype)
    d_src = np.empty((B, k), dtype=feats.dtype)
    d_cross = np.empty((B, k), dtype=feats.dtype)
    nn_row = np.empty((B, k), dtype=np.int64)
    src_intra = np.empty((B, k, d), dtype=feats.dtype)
    src_cross = np.empty((B, k, d), dtype=feats.dtype)

    for b, (cam, tid) in enumerate(sources):
        if cam not in bank.intra or tid not in bank.index[cam]:
            raise UnknownSource(f"batch item {b}: tracklet {tid} of camera {cam} not in bank")
        row = bank.index[cam][tid]
        anchors = bank.intra[cam]  # (T, k, d)
        dists = np.linalg.norm(anchors - feats[b][None, :, :], axis=2)  # (T, k)
        nn_row[b] = dists.argmin(axis=0)
        d_min[b] = dists.min(axis=0)
        d_src[b] = dists[row]
        d_cross[b] = np.linalg.norm(bank.cross[cam][row] - feats[b], axis=1)
        src_intra[b] = anchors[row]
        src_cross[b] = bank.cross[cam][row]

    cams = np.asarray([cam for cam, _ in sources])
    dbar: dict[int, np.ndarray] = {}
    dbar_item = np.empty((B, k), dtype=feats.dtype)
    for cam in np.unique(cams):
        mask = cams == cam
        dbar[int(cam)] = d_min[mask].mean(axis=0)
        dbar_item[mask] = dbar[int(cam)]

    return BatchDistances(
        d_min=d_min, d_src=d_src, d_cross=d_cross, nn_row=nn_row,
        dbar_item=dbar_item, dbar=dbar, src_intra=src_intra, src_cross=src_cross,
    )


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    lam: float = 1.0


def association_loss(
    feats: np.ndarray, dist: BatchDistances, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Top-push association loss and its gradient w.r.t. the batch features.

    Per item and part, with D_src the distance to the source intra anchor:
    when the source anchor is not the nearest one, both hinges push against
    the smallest distance; when it is, they push against the camera's batch
    mean of smallest distances. The intra and cross hinges share the branch
    condition. The returned scalar averages over items and parts; anchors
    and both thresholds are constants of the differentiation, the hinge
    subgradient at zero is zero, and the distance gradient at zero distance
    is zero.
    """
    feats = np.asarray(feats)
    B, k, _ = feats.shape
    tie = dist.d_src == dist.d_min
    threshold = np.where(tie, dist.dbar_item, dist.d_min)

    arg_intra = dist.d_src - threshold + cfg.margin
    arg_cross = dist.d_cross - threshold + cfg.margin
    loss_intra = np.maximum(arg_intra, 0.0)
    loss_cross = np.maximum(arg_cross, 0.0)
    per_item = loss_intra + cfg.lam * loss_cross
    loss = float(per_item.mean())

    def unit_toward(anchors: np.ndarray, dists: np.ndarray) -> np.ndarray:
        positive = dists[..., None] > 0
        safe = np.where(positive, dists[..., None], 1.0)
        return np.where(positive, (feats - anchors) / safe, 0.0)

    grads = (arg_intra > 0)[..., None] * unit_toward(dist.src_intra, dist.d_src)
    grads = grads + cfg.lam * (arg_cross > 0)[..., None] * unit_toward(dist.src_cross, dist.d_cross)
    grads *= 1.0 / (B * k)
    return loss, grads

"""Finite-difference verification of the analytic gradients.

The engine's loss treats anchors, the nearest-anchor distance, and the batch
mean distance as constant thresholds, so the check differentiates the same
surrogate: distances to the source anchors are recomputed from the perturbed
features or parameters while the thresholds and the branch pattern stay
frozen at their base values. Cases are resampled until every hinge argument,
every pre-activation, and every distance sits safely away from a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .association import AnchorBank, LossConfig, association_loss, compute_distances
from .aware import GlobalAwareParams, global_aware_backward, global_aware_forward, init_params

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-5
KINK_MARGIN = 2e-2  # hinge arguments and distances
RELU_MARGIN = 5e-3  # pre-activations; still 500x the finite-difference step


def numerical_grad(f, arrays: list[np.ndarray], step: float = DEFAULT_STEP) -> list[np.ndarray]:
    """Central-difference gradients of scalar f() w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


@dataclass
class GradcheckCase:
    params: GlobalAwareParams
    x0: np.ndarray
    parts: np.ndarray
    bank: AnchorBank
    sources: list[tuple[int, int]]
    loss_cfg: LossConfig
    threshold: np.ndarray  # frozen per (item, part)


def _random_bank(rng: np.random.Generator, k: int, d: int, per_cam: int) -> AnchorBank:
    intra = {}
    index = {}
    for cam in range(2):
        arr = rng.normal(size=(per_cam, k, d))
        arr /= np.linalg.norm(arr, axis=2, keepdims=True)
        intra[cam] = arr
        index[cam] = {tid: tid for tid in range(per_cam)}
    cross = {cam: a.copy() for cam, a in intra.items()}
    return AnchorBank(intra=intra, cross=cross, index=index, eta=0.5)


def _build_case(seed_parts: list[int], c: int, cp: int, k: int, batch: int) -> GradcheckCase | None:
    rng = np.random.default_rng(seed_parts)
    params = init_params(c, cp, k, seed=int(rng.integers(2**31))).astype(np.float64)
    params.gamma[...] = rng.uniform(0.5, 1.5, size=params.gamma.shape)
    params.beta[...] = 0.1 * rng.normal(size=params.beta.shape)

    x0 = rng.normal(size=(batch, c))
    x0 /= np.linalg.norm(x0, axis=1, keepdims=True)
    parts = rng.normal(size=(batch, k, c))
    parts /= np.linalg.norm(parts, axis=2, keepdims=True)

    per_cam = int(rng.integers(3, 6))
    bank = _random_bank(rng, k, cp, per_cam)
    sources = [(int(b % 2), int(rng.integers(per_cam))) for b in range(batch)]

    out = global_aware_forward(x0, parts, params, train=True)
    feats = out.features
    dist = compute_distances(feats, sources, bank)
    loss_cfg = LossConfig(margin=0.5, lam=1.0)
    tie = dist.d_src == dist.d_min
    threshold = np.where(tie, dist.dbar_item, dist.d_min)

    arg_intra = dist.d_src - threshold + loss_cfg.margin
    arg_cross = dist.d_cross - threshold + loss_cfg.margin
    conditioned = (
        np.abs(out.cache.pre_relu).min() > RELU_MARGIN
        and dist.d_src.min() > 5 * KINK_MARGIN
        and dist.d_cross.min() > 5 * KINK_MARGIN
        and np.abs(arg_intra).min() > KINK_MARGIN
        and np.abs(arg_cross).min() > KINK_MARGIN
    )
    if not conditioned:
        return None
    return GradcheckCase(params, x0, parts, bank, sources, loss_cfg, threshold)


def _surrogate_loss(feats: np.ndarray, case: GradcheckCase) -> float:
    """Loss with anchors, thresholds, and branch pattern frozen at the base."""
    B = feats.shape[0]
    d_src = np.empty(case.threshold.shape)
    d_cross = np.empty(case.threshold.shape)
    for b, (cam, tid) in enumerate(case.sources):
        row = case.bank.index[cam][tid]
        d_src[b] = np.linalg.norm(case.bank.intra[cam][row] - feats[b], axis=1)
        d_cross[b] = np.linalg.norm(case.bank.cross[cam][row] - feats[b], axis=1)
    li = np.maximum(d_src - case.threshold + case.loss_cfg.margin, 0.0)
    lc = np.maximum(d_cross - case.threshold + case.loss_cfg.margin, 0.0)
    return float((li + case.loss_cfg.lam * lc).mean())


def _case_errors(case: GradcheckCase, step: float) -> float:
    params = case.params
    out = global_aware_forward(case.x0, case.parts, params, train=True)
    dist = compute_distances(out.features, case.sources, case.bank)
    _, d_feats = association_loss(out.features, dist, case.loss_cfg)
    param_grads, _, _ = global_aware_backward(d_feats, params, out.cache)

    # loss gradient w.r.t. the aware-output features
    feats_base = out.features.copy()
    numeric_feat = numerical_grad(lambda: _surrogate_loss(feats_base, case), [feats_base], step)[0]
    worst = max_relative_error(d_feats, numeric_feat)

    # parameter gradients through the full aware + loss chain
    def loss_from_params() -> float:
        fwd = global_aware_forward(case.x0, case.parts, params, train=True)
        return _surrogate_loss(fwd.features, case)

    for name, tensor in params.trainable().items():
        numeric = numerical_grad(loss_from_params, [tensor], step)[0]
        worst = max(worst, max_relative_error(param_grads[name], numeric))
    return worst


@dataclass
class GradcheckReport:
    max_rel_err: float
    tolerance: float
    configs: list[dict]
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def run_gradcheck(
    seed: int,
    n_configs: int = 25,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOL,
) -> GradcheckReport:
    """Check analytic gradients on random configurations.

    Shapes are drawn from c in {8, 16}, cp in {4, 8}, k in {1, 2, 4} and
    batch in {4, 8}; badly conditioned draws (near a ReLU/hinge kink or a
    distance tie) are rejected and redrawn.
    """
    start = time.perf_counter()
    top_rng = np.random.default_rng(seed)
    configs = []
    worst = 0.0
    for idx in range(n_configs):
        c = int(top_rng.choice([8, 16]))
        cp = int(top_rng.choice([4, 8]))
        k = int(top_rng.choice([1, 2, 4]))
        batch = int(top_rng.choice([4, 8]))
        case = None
        for attempt in range(200):
            case = _build_case([seed, idx, attempt], c, cp, k, batch)
            if case is not None:
                break
        if case is None:
            raise RuntimeError(f"could not condition gradcheck case {idx}")
        err = _case_errors(case, step)
        worst = max(worst, err)
        configs.append({"c": c, "cp": cp, "k": k, "batch": batch, "max_rel_err": err})
    return GradcheckReport(
        max_rel_err=worst,
        tolerance=tolerance,
        configs=configs,
        elapsed_s=time.perf_counter() - start,
    )

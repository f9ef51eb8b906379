"""Local- and global-aware feature modules with exact analytic gradients.

The local module is the identity on the part vectors. The global module,
independently per part, projects the part vector and the global vector down
to ``cp`` channels, concatenates them, passes the pair through a linear map,
batch-statistics normalization and ReLU, and adds the projected global vector
back as a shortcut. All math is plain numpy so the backward pass can be
checked entry-by-entry against finite differences.

Shapes used throughout: ``x0`` is (B, c), ``parts`` is (B, k, c), outputs are
(B, k, cp). Parameter arrays follow the dtype they were created with; the
forward/backward preserve the dtype of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, MissingCache, NormDegenerate

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class GlobalAwareParams:
    """Trainable state of the k per-part modules plus the shared global branch.

    ``global_proj``/``global_bias`` are shared across parts by default; with
    ``independent_global_proj`` they carry a leading k axis and each part owns
    its projection of the global vector.
    """

    part_proj: np.ndarray  # (k, c, cp)
    part_bias: np.ndarray  # (k, cp)
    global_proj: np.ndarray  # (c, cp) or (k, c, cp)
    global_bias: np.ndarray  # (cp,) or (k, cp)
    mix_weight: np.ndarray  # (k, 2*cp, cp)
    mix_bias: np.ndarray  # (k, cp)
    gamma: np.ndarray  # (k, cp)
    beta: np.ndarray  # (k, cp)
    running_mean: np.ndarray  # (k, cp)
    running_var: np.ndarray  # (k, cp)
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    independent_global_proj: bool = False

    @property
    def k(self) -> int:
        return self.part_proj.shape[0]

    @property
    def c(self) -> int:
        return self.part_proj.shape[1]

    @property
    def cp(self) -> int:
        return self.part_proj.shape[2]

    def trainable(self) -> dict[str, np.ndarray]:
        return {
            "part_proj": self.part_proj,
            "part_bias": self.part_bias,
            "global_proj": self.global_proj,
            "global_bias": self.global_bias,
            "mix_weight": self.mix_weight,
            "mix_bias": self.mix_bias,
            "gamma": self.gamma,
            "beta": self.beta,
        }

    def state(self) -> dict[str, np.ndarray]:
        return {**self.trainable(), "running_mean": self.running_mean, "running_var": self.running_var}

    def astype(self, dtype) -> "GlobalAwareParams":
        return GlobalAwareParams(
            part_proj=self.part_proj.astype(dtype),
            part_bias=self.part_bias.astype(dtype),
            global_proj=self.global_proj.astype(dtype),
            global_bias=self.global_bias.astype(dtype),
            mix_weight=self.mix_weight.astype(dtype),
            mix_bias=self.mix_bias.astype(dtype),
            gamma=self.gamma.astype(dtype),
            beta=self.beta.astype(dtype),
            running_mean=self.running_mean.astype(dtype),
            running_var=self.running_var.astype(dtype),
            momentum=self.momentum,
            eps=self.eps,
            independent_global_proj=self.independent_global_proj,
        )


def init_params(
    c: int,
    cp: int,
    k: int,
    seed: int,
    independent_global_proj: bool = False,
    dtype=np.float32,
) -> GlobalAwareParams:
    """Uniform(-a, a) projections with a = sqrt(6 / (fan_in + fan_out))."""
    if min(c, cp, k) < 1:
        raise DimMismatch(f"c={c}, cp={cp}, k={k} must all be >= 1")
    rng = np.random.default_rng(seed)
    a_proj = np.sqrt(6.0 / (c + cp))
    a_mix = np.sqrt(6.0 / (2 * cp + cp))
    g_shape = (k, c, cp) if independent_global_proj else (c, cp)
    gb_shape = (k, cp) if independent_global_proj else (cp,)
    return GlobalAwareParams(
        part_proj=rng.uniform(-a_proj, a_proj, size=(k, c, cp)).astype(dtype),
        part_bias=np.zeros((k, cp), dtype=dtype),
        global_proj=rng.uniform(-a_proj, a_proj, size=g_shape).astype(dtype),
        global_bias=np.zeros(gb_shape, dtype=dtype),
        mix_weight=rng.uniform(-a_mix, a_mix, size=(k, 2 * cp, cp)).astype(dtype),
        mix_bias=np.zeros((k, cp), dtype=dtype),
        gamma=np.ones((k, cp), dtype=dtype),
        beta=np.zeros((k, cp), dtype=dtype),
        running_mean=np.zeros((k, cp), dtype=dtype),
        running_var=np.ones((k, cp), dtype=dtype),
        independent_global_proj=independent_global_proj,
    )


def local_aware_forward(parts: np.ndarray) -> np.ndarray:
    """Identity map: the part vectors pass through unchanged."""
    return parts


@dataclass
class GlobalAwareCache:
    x0: np.ndarray
    parts: np.ndarray
    x0_hat: np.ndarray  # (B, k, cp), already per-part when projection independent
    z: np.ndarray  # (B, k, 2*cp)
    u: np.ndarray  # (B, k, cp) pre-normalization
    mean: np.ndarray  # (k, cp) statistics actually used
    inv_std: np.ndarray  # (k, cp)
    u_norm: np.ndarray  # (B, k, cp)
    pre_relu: np.ndarray  # (B, k, cp)
    train: bool = True


@dataclass
class AwareOutput:
    features: np.ndarray  # (B, k, d)
    cache: GlobalAwareCache | None = field(default=None, repr=False)


def global_aware_forward(
    x0: np.ndarray,
    parts: np.ndarray,
    params: GlobalAwareParams,
    train: bool = True,
) -> AwareOutput:
    """Run the k global-aware modules over a batch.

    In train mode normalization uses current-batch statistics and the running
    statistics are updated in place with the configured momentum; in infer
    mode the stored running statistics are used.
    """
    x0 = np.asarray(x0)
    parts = np.asarray(parts)
    k, c, cp = params.k, params.c, params.cp
    if x0.ndim != 2 or parts.ndim != 3:
        raise DimMismatch(f"expected x0 (B, c) and parts (B, k, c), got {x0.shape}, {parts.shape}")
    B = x0.shape[0]
    if x0.shape[1] != c or parts.shape[1] != k or parts.shape[2] != c or parts.shape[0] != B:
        raise DimMismatch(
            f"shapes {x0.shape}/{parts.shape} do not match params (k={k}, c={c})"
        )
    if train and B < 2:
        raise NormDegenerate("batch statistics need at least 2 items in train mode")

    if params.independent_global_proj:
        # (B, c) x (k, c, cp) -> (B, k, cp)
        x0_hat = np.einsum("bc,kcp->bkp", x0, params.global_proj) + params.global_bias
    else:
        x0_hat = (x0 @ params.global_proj + params.global_bias)[:, None, :]
        x0_hat = np.broadcast_to(x0_hat, (B, k, cp)).copy()
    parts_hat = np.einsum("bkc,kcp->bkp", parts, params.part_proj) + params.part_bias
    z = np.concatenate([parts_hat, x0_hat], axis=2)  # (B, k, 2cp)
    u = np.einsum("bkz,kzp->bkp", z, params.mix_weight) + params.mix_bias

    if train:
        mean = u.mean(axis=0)  # (k, cp)
        var = u.var(axis=0)  # biased, as used for normalization
        inv_std = 1.0 / np.sqrt(var + params.eps)
        # running stats keep the unbiased variance estimate
        unbiased = var * (B / (B - 1))
        params.running_mean[...] = params.momentum * params.running_mean + (1 - params.momentum) * mean
        params.running_var[...] = params.momentum * params.running_var + (1 - params.momentum) * unbiased
    else:
        mean = params.running_mean
        inv_std = 1.0 / np.sqrt(params.running_var + params.eps)

    u_norm = (u - mean) * inv_std
    pre_relu = params.gamma * u_norm + params.beta
    residual = np.maximum(pre_relu, 0.0)
    feats = residual + x0_hat

    cache = GlobalAwareCache(
        x0=x0, parts=parts, x0_hat=x0_hat, z=z, u=u,
        mean=mean, inv_std=inv_std, u_norm=u_norm, pre_relu=pre_relu, train=train,
    )
    return AwareOutput(features=feats, cache=cache)


def global_aware_backward(
    grad_out: np.ndarray,
    params: GlobalAwareParams,
    cache: GlobalAwareCache | None,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Exact gradients of the forward map.

    Returns ``(param_grads, d_x0, d_parts)`` for an upstream gradient of
    shape (B, k, cp). Train-mode caches yield the full batch-statistics
    chain rule; infer-mode caches treat the running statistics as constants.
    """
    if cache is None:
        raise MissingCache("backward called without a forward cache")
    grad_out = np.asarray(grad_out)
    B, k, cp = cache.u.shape
    if grad_out.shape != (B, k, cp):
        raise DimMismatch(f"upstream gradient shape {grad_out.shape} != {(B, k, cp)}")

    relu_mask = cache.pre_relu > 0
    d_pre = grad_out * relu_mask
    d_gamma = (d_pre * cache.u_norm).sum(axis=0)
    d_beta = d_pre.sum(axis=0)
    d_norm = d_pre * params.gamma

    if cache.train:
        # batch-statistics normalization backward
        sum_dn = d_norm.sum(axis=0)
        sum_dn_un = (d_norm * cache.u_norm).sum(axis=0)
        d_u = (cache.inv_std / B) * (B * d_norm - sum_dn - cache.u_norm * sum_dn_un)
    else:
        d_u = d_norm * cache.inv_std

    d_mix = np.einsum("bkz,bkp->kzp", cache.z, d_u)
    d_mix_bias = d_u.sum(axis=0)
    d_z = np.einsum("bkp,kzp->bkz", d_u, params.mix_weight)

    d_parts_hat = d_z[:, :, :cp]
    d_x0_hat = d_z[:, :, cp:] + grad_out  # shortcut connection

    d_part_proj = np.einsum("bkc,bkp->kcp", cache.parts, d_parts_hat)
    d_part_bias = d_parts_hat.sum(axis=0)
    d_parts = np.einsum("bkp,kcp->bkc", d_parts_hat, params.part_proj)

    if params.independent_global_proj:
        d_global_proj = np.einsum("bc,bkp->kcp", cache.x0, d_x0_hat)
        d_global_bias = d_x0_hat.sum(axis=0)
        d_x0 = np.einsum("bkp,kcp->bc", d_x0_hat, params.global_proj)
    else:
        pooled = d_x0_hat.sum(axis=1)  # shared projection feeds every part
        d_global_proj = cache.x0.T @ pooled
        d_global_bias = pooled.sum(axis=0)
        d_x0 = pooled @ params.global_proj.T

    grads = {
        "part_proj": d_part_proj,
        "part_bias": d_part_bias,
        "global_proj": d_global_proj,
        "global_bias": d_global_bias,
        "mix_weight": d_mix,
        "mix_bias": d_mix_bias,
        "gamma": d_gamma,
        "beta": d_beta,
    }
    return grads, d_x0, d_parts


@dataclass
class LocalAdapterParams:
    """Optional per-part linear adapter giving the local path trainable state."""

    weight: np.ndarray  # (k, c, c), identity-initialized
    bias: np.ndarray  # (k, c)

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    state = trainable


def init_local_adapter(c: int, k: int, dtype=np.float32) -> LocalAdapterParams:
    weight = np.broadcast_to(np.eye(c, dtype=dtype), (k, c, c)).copy()
    return LocalAdapterParams(weight=weight, bias=np.zeros((k, c), dtype=dtype))


def local_adapter_forward(parts: np.ndarray, params: LocalAdapterParams):
    out = np.einsum("bkc,kcd->bkd", parts, params.weight) + params.bias
    return out, parts


def local_adapter_backward(grad_out: np.ndarray, params: LocalAdapterParams, cache_parts):
    if cache_parts is None:
        raise MissingCache("backward called without a forward cache")
    d_weight = np.einsum("bkc,bkd->kcd", cache_parts, grad_out)
    d_bias = grad_out.sum(axis=0)
    d_parts = np.einsum("bkd,kcd->bkc", grad_out, params.weight)
    return {"weight": d_weight, "bias": d_bias}, d_parts

"""Mini-batch sampling, optimizers, the training driver, and checkpoints.

Training is fully deterministic: one seeded generator drives parameter
initialization and batch sampling, all mutable state (module parameters,
anchors, optimizer slots) is float32, and checkpoints store that state in the
same binary tensor format used for dataset features, so a reloaded run
continues bit-for-bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aware
from .association import (
    AnchorBank,
    LossConfig,
    association_loss,
    compute_crc_pairs,
    compute_distances,
    init_anchors,
    update_cross_anchors,
)
from .dataset import DatasetManifest, TrainingView, read_feature_map, write_feature_map
from .errors import (
    DatasetTooSmall,
    MissingCache,
    MissingFile,
    ParseError,
    ShapeMismatch,
    ValidationError,
)
from .features import POOLING_MODES, compact_features

OPTIMIZERS = ("sgd", "rmsprop")
AWARE_KINDS = ("local", "global")


@dataclass
class TrainConfig:
    k: int = 8
    pooling: str = "gap"
    aware: str = "global"
    batch_size: int = 64
    total_iterations: int = 1000
    warmup_epochs: int = 2
    optimizer: str = "rmsprop"
    learning_rate: float = 0.045
    momentum: float = 0.9
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-8
    eta: float = 0.5
    margin: float = 0.5
    lam: float = 1.0
    c_prime: int = 256
    seed: int = 0
    log_interval: int = 50
    local_adapter: bool = False
    independent_global_proj: bool = False

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.total_iterations < 1:
            raise ValidationError("total_iterations must be >= 1")
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be >= 0")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValidationError(f"pooling must be one of {POOLING_MODES}")
        if self.aware not in AWARE_KINDS:
            raise ValidationError(f"aware must be one of {AWARE_KINDS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 < self.eta <= 1.0:
            raise ValidationError("eta must lie in (0, 1]")
        if self.margin < 0 or self.lam < 0:
            raise ValidationError("margin and lam must be >= 0")
        if self.c_prime < 1:
            raise ValidationError("c_prime must be >= 1")
        if self.log_interval < 1:
            raise ValidationError("log_interval must be >= 1")


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return train_config_from_dict(doc)


def train_config_from_dict(doc: dict) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig(**doc)
    cfg.validate()
    return cfg


class FeatureStore:
    """Read-through cache of decoded feature maps keyed by file path."""

    def __init__(self, dims: tuple[int, int, int]):
        self.dims = dims
        self._cache: dict[str, np.ndarray] = {}

    def get(self, record) -> np.ndarray:
        arr = self._cache.get(record.feature_path)
        if arr is None:
            arr = read_feature_map(record, self.dims)
            self._cache[record.feature_path] = arr
        return arr

    def batch(self, records) -> np.ndarray:
        return np.stack([self.get(r) for r in records])


class LocalModel:
    """Part features pass through unchanged (optional trainable adapter)."""

    kind = "local"

    def __init__(self, k: int, c: int, pooling: str, adapter: aware.LocalAdapterParams | None = None):
        self.k = k
        self.c = c
        self.pooling = pooling
        self.adapter = adapter
        self._cache = None

    @property
    def feature_dim(self) -> int:
        return self.c

    def forward(self, fmaps: np.ndarray, train: bool = True) -> np.ndarray:
        _, parts = _compact_batch(fmaps, self.k, self.pooling)
        if self.adapter is None:
            return aware.local_aware_forward(parts)
        feats, cache = aware.local_adapter_forward(parts, self.adapter)
        self._cache = cache if train else None
        return feats

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        if self.adapter is None:
            return {}
        if self._cache is None:
            raise MissingCache("backward called before a train-mode forward")
        grads, _ = aware.local_adapter_backward(grad_out, self.adapter, self._cache)
        return grads

    def trainable(self) -> dict[str, np.ndarray]:
        return self.adapter.trainable() if self.adapter is not None else {}

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.trainable())

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "c": self.c,
            "pooling": self.pooling,
            "adapter": self.adapter is not None,
        }


class GlobalModel:
    """The k independent global-aware modules over pooled part features."""

    kind = "global"

    def __init__(self, params: aware.GlobalAwareParams, pooling: str):
        self.params = params
        self.pooling = pooling
        self._cache = None

    @property
    def k(self) -> int:
        return self.params.k

    @property
    def feature_dim(self) -> int:
        return self.params.cp

    def forward(self, fmaps: np.ndarray, train: bool = True) -> np.ndarray:
        x0, parts = _compact_batch(fmaps, self.params.k, self.pooling)
        out = aware.global_aware_forward(x0, parts, self.params, train=train)
        self._cache = out.cache if train else None
        return out.features

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise MissingCache("backward called before a train-mode forward")
        grads, _, _ = aware.global_aware_backward(grad_out, self.params, self._cache)
        return grads

    def trainable(self) -> dict[str, np.ndarray]:
        return self.params.trainable()

    def state(self) -> dict[str, np.ndarray]:
        return self.params.state()

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.params.k,
            "c": self.params.c,
            "cp": self.params.cp,
            "pooling": self.pooling,
            "independent_global_proj": self.params.independent_global_proj,
        }


def _compact_batch(fmaps: np.ndarray, k: int, pooling: str) -> tuple[np.ndarray, np.ndarray]:
    xs, ps = [], []
    for fmap in fmaps:
        x0, parts = compact_features(fmap, k, pooling)
        xs.append(x0)
        ps.append(parts)
    return np.stack(xs), np.stack(ps)


def build_model(cfg: TrainConfig, feature_dims: tuple[int, int, int], param_seed: int):
    c = feature_dims[2]
    if cfg.aware == "local":
        adapter = aware.init_local_adapter(c, cfg.k) if cfg.local_adapter else None
        return LocalModel(cfg.k, c, cfg.pooling, adapter)
    params = aware.init_params(
        c, cfg.c_prime, cfg.k, seed=param_seed,
        independent_global_proj=cfg.independent_global_proj,
    )
    return GlobalModel(params, cfg.pooling)


@dataclass
class BatchItem:
    record: object
    camera: int
    tracklet_id: int


def image_list(view: TrainingView) -> list[BatchItem]:
    return [
        BatchItem(record=fr, camera=t.camera, tracklet_id=t.tracklet_id)
        for t in view.tracklets
        for fr in t.frames
    ]


def sample_batch(images: list[BatchItem], m: int, rng: np.random.Generator) -> list[BatchItem]:
    """Draw m images uniformly without replacement, covering >= 2 cameras."""
    cameras = {it.camera for it in images}
    if len(images) < m or len(cameras) < 2:
        raise DatasetTooSmall(
            f"need >= {m} images over >= 2 cameras, have {len(images)} over {len(cameras)}"
        )
    for _ in range(10000):
        idx = rng.choice(len(images), size=m, replace=False)
        batch = [images[i] for i in idx]
        if len({it.camera for it in batch}) >= 2:
            return batch
    raise DatasetTooSmall("could not draw a batch covering >= 2 cameras")


@dataclass
class OptimizerState:
    slots: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(slots={name: np.zeros_like(p) for name, p in params.items()})


def optimizer_apply(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
) -> None:
    """One optimizer step, updating parameters and slots in place."""
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        slot = state.slots[name]
        if cfg.optimizer == "sgd":
            slot[...] = cfg.momentum * slot + g
            p[...] = p - cfg.learning_rate * slot
        else:  # rmsprop
            slot[...] = cfg.rms_decay * slot + (1.0 - cfg.rms_decay) * g * g
            p[...] = p - cfg.learning_rate * g / (np.sqrt(slot) + cfg.rms_epsilon)


def train_step(
    batch: list[BatchItem],
    model,
    bank: AnchorBank,
    cfg: TrainConfig,
    opt_state: OptimizerState,
    store: FeatureStore,
    warmup_active: bool,
) -> float:
    fmaps = store.batch([it.record for it in batch])
    feats = model.forward(fmaps, train=True)
    sources = [(it.camera, it.tracklet_id) for it in batch]
    dist = compute_distances(feats, sources, bank)
    loss, d_feats = association_loss(feats, dist, LossConfig(cfg.margin, cfg.lam))

    trainable = model.trainable()
    if trainable:
        grads = model.backward(d_feats)
        optimizer_apply(trainable, grads, opt_state, cfg)

    snapshot = bank.snapshot_intra()
    for it, f in zip(batch, feats):
        bank.ema_update_item(it.camera, it.tracklet_id, f)
    bank.t += 1
    for part in range(bank.k):
        pairs = set() if warmup_active else compute_crc_pairs(bank, part)
        update_cross_anchors(bank, part, pairs, warmup_active, snapshot)
    return loss


def epoch_length(num_images: int, batch_size: int) -> int:
    return math.ceil(num_images / batch_size)


@dataclass
class TrainResult:
    path: Path
    iteration: int
    config: TrainConfig
    losses: list[float]


def train(
    dataset: DatasetManifest | TrainingView,
    cfg: TrainConfig,
    out_dir,
    resume=None,
    log=print,
) -> TrainResult:
    """Run the training loop and write a checkpoint directory.

    An epoch is ceil(num_train_images / batch_size) iterations; cross-camera
    anchors stay pinned to the intra-camera anchors for the first
    ``warmup_epochs`` epochs. ``resume`` continues from a saved checkpoint
    and reproduces the uninterrupted run exactly.
    """
    cfg.validate()
    view = dataset.training_view() if isinstance(dataset, DatasetManifest) else dataset
    store = FeatureStore(view.feature_dims)
    images = image_list(view)
    if not images:
        raise DatasetTooSmall("training view has no images")
    epoch = epoch_length(len(images), cfg.batch_size)
    warmup_until = cfg.warmup_epochs * epoch

    if resume is not None:
        loaded = load_checkpoint(resume)
        want, have = asdict(cfg), asdict(loaded.config)
        mismatch = {
            key for key in want if key != "total_iterations" and want[key] != have[key]
        }
        if mismatch:
            raise ValidationError(f"resume config differs on {sorted(mismatch)}")
        if loaded.iteration > cfg.total_iterations:
            raise ValidationError(
                f"checkpoint is at iteration {loaded.iteration}, past total_iterations"
            )
        model, bank, opt_state = loaded.model, loaded.bank, loaded.opt_state
        batch_rng = np.random.default_rng()
        batch_rng.bit_generator.state = loaded.rng_state
        start = loaded.iteration
    else:
        root = np.random.default_rng(cfg.seed)
        param_seed = int(root.integers(2**31))
        batch_seed = int(root.integers(2**31))
        model = build_model(cfg, view.feature_dims, param_seed)
        batch_rng = np.random.default_rng(batch_seed)
        bank = init_anchors(
            view,
            lambda records: model.forward(store.batch(records), train=False),
            eta=cfg.eta,
        )
        opt_state = init_optimizer(model.trainable())
        start = 0

    losses: list[float] = []
    for t in range(start, cfg.total_iterations):
        warmup_active = t < warmup_until
        batch = sample_batch(images, cfg.batch_size, batch_rng)
        loss = train_step(batch, model, bank, cfg, opt_state, store, warmup_active)
        losses.append(loss)
        step = t + 1
        if step % cfg.log_interval == 0 or step == cfg.total_iterations:
            log(f"iter={step} loss={loss:.6f} lr={cfg.learning_rate:g} warmup={int(warmup_active)}")

    out = Path(out_dir)
    save_checkpoint(out, model, bank, opt_state, cfg, cfg.total_iterations, batch_rng)
    return TrainResult(path=out, iteration=cfg.total_iterations, config=cfg, losses=losses)


# --- checkpoint container -------------------------------------------------

_CKPT_FORMAT = 1


def _to3d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        return arr
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 1:
        return arr[None, None]
    raise ShapeMismatch(f"cannot store rank-{arr.ndim} tensor")


def save_checkpoint(
    out_dir,
    model,
    bank: AnchorBank,
    opt_state: OptimizerState,
    cfg: TrainConfig,
    iteration: int,
    rng: np.random.Generator,
) -> Path:
    out = Path(out_dir)
    tensor_dir = out / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)

    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.state().items():
        tensors[f"model/{name}"] = arr
    for cam in bank.cameras():
        tensors[f"anchors/intra/cam{cam}"] = bank.intra[cam]
        tensors[f"anchors/cross/cam{cam}"] = bank.cross[cam]
    for name, arr in opt_state.slots.items():
        tensors[f"opt/{name}"] = arr

    index = {}
    for name, arr in tensors.items():
        fname = name.replace("/", "__") + ".upmf"
        write_feature_map(_to3d(np.asarray(arr, dtype=np.float32)), tensor_dir / fname)
        index[name] = {"shape": list(arr.shape), "file": f"tensors/{fname}"}

    header = {
        "format": _CKPT_FORMAT,
        "iteration": iteration,
        "config": asdict(cfg),
        "model": model.meta(),
        "anchors": {
            "eta": bank.eta,
            "t": bank.t,
            "renormalize": bank.renormalize,
            "cameras": [
                {
                    "camera": cam,
                    "tracklet_ids": sorted(bank.index[cam], key=lambda tid: bank.index[cam][tid]),
                }
                for cam in bank.cameras()
            ],
        },
        "rng_state": rng.bit_generator.state,
        "tensors": index,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class LoadedCheckpoint:
    path: Path
    model: object
    bank: AnchorBank
    opt_state: OptimizerState
    config: TrainConfig
    iteration: int
    rng_state: dict


def _read_tensor(root: Path, entry: dict) -> np.ndarray:
    stored = read_feature_map(root / entry["file"], _stored_dims(entry["shape"]))
    return stored.reshape(entry["shape"])


def _stored_dims(shape: list[int]) -> tuple[int, int, int]:
    padded = [1] * (3 - len(shape)) + list(shape)
    return tuple(padded)


def load_checkpoint(path) -> LoadedCheckpoint:
    root = Path(path)
    header_path = root / "header.json"
    if not header_path.is_file():
        raise MissingFile(str(header_path))
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{header_path}: {exc}") from exc
    if header.get("format") != _CKPT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {header.get('format')}")

    cfg = train_config_from_dict(header["config"])
    index = header["tensors"]
    meta = header["model"]

    def tensor(name: str) -> np.ndarray:
        return _read_tensor(root, index[name])

    if meta["kind"] == "global":
        params = aware.GlobalAwareParams(
            part_proj=tensor("model/part_proj"),
            part_bias=tensor("model/part_bias"),
            global_proj=tensor("model/global_proj"),
            global_bias=tensor("model/global_bias"),
            mix_weight=tensor("model/mix_weight"),
            mix_bias=tensor("model/mix_bias"),
            gamma=tensor("model/gamma"),
            beta=tensor("model/beta"),
            running_mean=tensor("model/running_mean"),
            running_var=tensor("model/running_var"),
            independent_global_proj=bool(meta["independent_global_proj"]),
        )
        model = GlobalModel(params, meta["pooling"])
    else:
        adapter = None
        if meta["adapter"]:
            adapter = aware.LocalAdapterParams(
                weight=tensor("model/weight"), bias=tensor("model/bias")
            )
        model = LocalModel(meta["k"], meta["c"], meta["pooling"], adapter)

    anchors_meta = header["anchors"]
    intra, cross, bank_index = {}, {}, {}
    for cam_meta in anchors_meta["cameras"]:
        cam = int(cam_meta["camera"])
        intra[cam] = tensor(f"anchors/intra/cam{cam}")
        cross[cam] = tensor(f"anchors/cross/cam{cam}")
        bank_index[cam] = {int(tid): row for row, tid in enumerate(cam_meta["tracklet_ids"])}
    bank = AnchorBank(
        intra=intra,
        cross=cross,
        index=bank_index,
        eta=float(anchors_meta["eta"]),
        t=int(anchors_meta["t"]),
        renormalize=bool(anchors_meta["renormalize"]),
    )

    opt_state = OptimizerState(
        slots={
            name[len("opt/") :]: _read_tensor(root, entry)
            for name, entry in index.items()
            if name.startswith("opt/")
        }
    )
    return LoadedCheckpoint(
        path=root,
        model=model,
        bank=bank,
        opt_state=opt_state,
        config=cfg,
        iteration=int(header["iteration"]),
        rng_state=header["rng_state"],
    )

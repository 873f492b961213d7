"""Training loop, geometric augmentation, and checkpoint serialization.

Training is deterministic given (settings, seed): the sampler, the augment
stream, and weight init each get their own generator, so the same call
produces bit-identical checkpoints. Validation after every epoch selects the
snapshot with the best buffered F1 for that head; with no validation split
the final epoch is kept.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .metrics import ConfusionCounts, dmg_confusion, harmonic_mean_defined, loc_confusion
from .model import (
    AdamWState,
    FusionMode,
    InputMode,
    OptimizerConfig,
    ReferenceClassifier,
    TaskMode,
    TwoStepModel,
    adamw_step,
    biased_sampler,
    ensemble_predict,
    loss_and_gradients,
    lr_at,
    training_target,
)
from .util import atomic_write_bytes, crc32

log = logging.getLogger(__name__)

AnyModel = Union[ReferenceClassifier, TwoStepModel]


@dataclass
class Sample:
    """One normalized training patch: channel-first stacks plus the label map."""

    pre: np.ndarray
    post: np.ndarray
    label: np.ndarray
    patch_id: str = ""


@dataclass(frozen=True)
class TrainSettings:
    fusion: FusionMode = FusionMode.LATE
    task: TaskMode = TaskMode.TWO_STEP
    inputs: InputMode = InputMode.PRE_AND_POST
    widths: tuple[int, int] = (16, 32)
    batch_size: int = 8
    train_buffer: int = 3
    eval_buffer: int = 3
    tau_loc: float = 0.5
    tau_dmg: float = 0.5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.train_buffer < 0 or self.eval_buffer < 0:
            raise ConfigError("buffer radii must be >= 0")
        for tau in (self.tau_loc, self.tau_dmg):
            if not (0.0 <= tau <= 1.0):
                raise ConfigError(f"threshold {tau} outside [0, 1]")
        object.__setattr__(self, "fusion", FusionMode(self.fusion))
        object.__setattr__(self, "task", TaskMode(self.task))
        object.__setattr__(self, "inputs", InputMode(self.inputs))
        np.dtype(self.dtype)


# ---------------------------------------------------------------------------
# Augmentation: the 8-element dihedral group of the square


def apply_dihedral(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Optional horizontal flip, then k CCW quarter-turns, on the last two axes."""
    if flip:
        arr = arr[..., ::-1]
    if k % 4:
        arr = np.rot90(arr, k % 4, axes=(-2, -1))
    return arr


def random_dihedral(rng: np.random.Generator) -> tuple[int, bool]:
    return int(rng.integers(4)), bool(rng.integers(2))


# ---------------------------------------------------------------------------
# The loop


def _check_samples(samples: Sequence[Sample], what: str) -> None:
    for s in samples:
        if s.pre.ndim != 3 or s.post.shape != s.pre.shape:
            raise DataError(f"{what}: bad stack shapes in patch {s.patch_id!r}")
        if s.label.shape != s.pre.shape[1:]:
            raise DataError(f"{what}: label/stack mismatch in patch {s.patch_id!r}")


def _batch(samples, indices, aug_rng, dtype):
    pres, posts, labels = [], [], []
    for i in indices:
        s = samples[i]
        pre, post, label = s.pre, s.post, s.label
        if aug_rng is not None:
            k, flip = random_dihedral(aug_rng)
            pre = apply_dihedral(pre, k, flip)
            post = apply_dihedral(post, k, flip)
            label = apply_dihedral(label, k, flip)
        pres.append(pre)
        posts.append(post)
        labels.append(label)
    return (
        np.ascontiguousarray(np.stack(pres), dtype=dtype),
        np.ascontiguousarray(np.stack(posts), dtype=dtype),
        np.ascontiguousarray(np.stack(labels)),
    )


def _head_predictions(model: ReferenceClassifier, samples, batch_size):
    """Per-patch argmax class maps, in sample order."""
    out = []
    dtype = model.dtype
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        pre = np.stack([s.pre for s in chunk]).astype(dtype)
        post = np.stack([s.post for s in chunk]).astype(dtype)
        logits = model.forward(pre, post)
        out.extend(np.argmax(logits, axis=1).astype(np.uint8))
    return out


def _val_score(model, head, val, settings) -> Optional[float]:
    """Pooled selection metric on the validation split; None when undefined.

    loc head: buffered F1_loc. dmg head: harmonic mean of the per-class F1s
    over true building pixels. joint: 0.3 loc + 0.7 dmg on the same maps.
    """
    preds = _head_predictions(model, val, settings.batch_size)
    if head == "loc":
        counts = ConfusionCounts()
        for p, s in zip(preds, val):
            counts = counts + loc_confusion(p, s.label, settings.eval_buffer)[0]
        return counts.f1()
    if head == "dmg":
        # binary damage head: class 1 means damaged; score as intact/damaged maps
        intact = None
        damaged = None
        for p, s in zip(preds, val):
            cm = np.where(p == 1, 2, 1).astype(np.uint8)
            i, d, _ = dmg_confusion(cm, s.label)
            intact = i if intact is None else intact + i
            damaged = d if damaged is None else damaged + d
        return harmonic_mean_defined([intact.f1(), damaged.f1()])
    # joint
    loc_counts = intact = damaged = None
    for p, s in zip(preds, val):
        lc, _, _ = loc_confusion(p, s.label, settings.eval_buffer)
        ic, dc, _ = dmg_confusion(p, s.label)
        loc_counts = lc if loc_counts is None else loc_counts + lc
        intact = ic if intact is None else intact + ic
        damaged = dc if damaged is None else damaged + dc
    f1l = loc_counts.f1()
    f1d = harmonic_mean_defined([intact.f1(), damaged.f1()])
    if f1l is None or f1d is None:
        return f1l if f1d is None else f1d
    return 0.3 * f1l + 0.7 * f1d


def train_head(
    head: str,
    train: Sequence[Sample],
    val: Sequence[Sample],
    settings: TrainSettings,
    seed: int,
) -> tuple[ReferenceClassifier, dict]:
    """Train one classifier head; returns the selected model and its history."""
    if not train:
        raise ConfigError("training split is empty")
    _check_samples(train, "train")
    _check_samples(val, "val")
    in_channels = train[0].pre.shape[0]
    n_classes = 3 if head == "joint" else 2

    model = ReferenceClassifier(
        in_channels=in_channels,
        n_classes=n_classes,
        fusion=settings.fusion,
        inputs=settings.inputs,
        widths=settings.widths,
        seed=seed,
        dtype=np.dtype(settings.dtype),
    )
    sampler = biased_sampler([s.label for s in train], seed=[seed, 0])
    aug_rng = np.random.default_rng([seed, 1]) if settings.augment else None

    opt = settings.optimizer
    steps_per_epoch = math.ceil(len(train) / settings.batch_size)
    total_steps = opt.epochs * steps_per_epoch
    state = AdamWState(model.params)

    history = {"epoch_loss": [], "val_score": [], "head": head,
               "steps_per_epoch": steps_per_epoch}
    best_score, best_params, best_epoch = -math.inf, None, None
    step = 0
    for epoch in range(opt.epochs):
        losses = []
        for _ in range(steps_per_epoch):
            idx = [next(sampler) for _ in range(settings.batch_size)]
            pre, post, labels = _batch(train, idx, aug_rng, model.dtype)
            target, valid = training_target(labels, head, settings.train_buffer)
            loss, grads, n_valid = loss_and_gradients(model, pre, post, target, valid)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {step} ({head} head)"
                )
            if n_valid > 0:
                adamw_step(model.params, grads, state,
                           lr=lr_at(step, total_steps, opt), config=opt)
                losses.append(loss)
            step += 1
        history["epoch_loss"].append(float(np.mean(losses)) if losses else None)

        if val:
            score = _val_score(model, head, val, settings)
            history["val_score"].append(score)
            if score is not None and score > best_score:
                best_score = score
                best_params = copy.deepcopy(model.params)
                best_epoch = epoch
        else:
            history["val_score"].append(None)

    if best_params is not None:
        model.params = best_params
        history["selected_epoch"] = best_epoch
        history["selected_score"] = best_score
    else:
        history["selected_epoch"] = opt.epochs - 1
        history["selected_score"] = None
    return model, history


def train_model(
    train: Sequence[Sample],
    val: Sequence[Sample],
    settings: TrainSettings,
    seed: int,
) -> tuple[AnyModel, dict]:
    """Train per the task mode. Two-step trains localization with `seed` and
    damage with `seed + 1`, fully independently."""
    if settings.task is TaskMode.JOINT:
        model, hist = train_head("joint", train, val, settings, seed)
        return model, {"model": hist}
    loc, hist_loc = train_head("loc", train, val, settings, seed)
    dmg, hist_dmg = train_head("dmg", train, val, settings, seed + 1)
    model = TwoStepModel(loc=loc, dmg=dmg,
                         tau_loc=settings.tau_loc, tau_dmg=settings.tau_dmg)
    return model, {"loc": hist_loc, "dmg": hist_dmg}


def predict_map(models, sample: Sample) -> np.ndarray:
    """(H, W) uint8 prediction for one patch from a model or a model list."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    return ensemble_predict(models, sample.pre, sample.post)


# ---------------------------------------------------------------------------
# Checkpoint format
#
# 64-byte header: magic "DMGCKPT1", u32 version, zero padding. Then a
# metadata section and one parameter section per model, each framed as
# u64 payload length + u32 CRC32 + payload. Parameters are raw little-endian
# arrays concatenated in the order listed in the metadata. The file must end
# exactly after the last section.

CKPT_MAGIC = b"DMGCKPT1"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sI52x")
_SECTION = struct.Struct("<QI")


def _pack_section(payload: bytes) -> bytes:
    return _SECTION.pack(len(payload), crc32(payload)) + payload


def _model_entry(name: str, model: ReferenceClassifier) -> dict:
    return {
        "name": name,
        "arch": model.arch_config(),
        "params": [{"name": k, "shape": list(v.shape)}
                   for k, v in model.params.items()],
    }


def _model_payload(model: ReferenceClassifier) -> bytes:
    le = np.dtype(model.dtype).newbyteorder("<")
    return b"".join(np.ascontiguousarray(v, dtype=le).tobytes()
                    for v in model.params.values())


def write_checkpoint(path, model: AnyModel, training_meta: Optional[dict] = None) -> None:
    if isinstance(model, TwoStepModel):
        meta = {
            "schema_version": 1,
            "task": TaskMode.TWO_STEP.value,
            "tau_loc": model.tau_loc,
            "tau_dmg": model.tau_dmg,
            "models": [_model_entry("loc", model.loc), _model_entry("dmg", model.dmg)],
        }
        payloads = [_model_payload(model.loc), _model_payload(model.dmg)]
    else:
        meta = {
            "schema_version": 1,
            "task": TaskMode.JOINT.value,
            "models": [_model_entry("model", model)],
        }
        payloads = [_model_payload(model)]
    if training_meta:
        meta["training"] = training_meta
    blob = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION)
    blob += _pack_section(json.dumps(meta, sort_keys=True,
                                     separators=(",", ":")).encode("utf-8"))
    for p in payloads:
        blob += _pack_section(p)
    atomic_write_bytes(path, blob)


def _read_section(blob: bytes, off: int, path, what: str) -> tuple[bytes, int]:
    if off + _SECTION.size > len(blob):
        raise DataError(f"{path}: truncated before {what} section")
    length, crc = _SECTION.unpack_from(blob, off)
    off += _SECTION.size
    if off + length > len(blob):
        raise DataError(f"{path}: truncated inside {what} section")
    payload = blob[off:off + length]
    if crc32(payload) != crc:
        raise DataError(f"{path}: CRC mismatch in {what} section")
    return payload, off + length


def _rebuild_model(entry: dict, payload: bytes, path) -> ReferenceClassifier:
    arch = entry["arch"]
    model = ReferenceClassifier(
        in_channels=arch["in_channels"],
        n_classes=arch["n_classes"],
        fusion=FusionMode(arch["fusion"]),
        inputs=InputMode(arch["inputs"]),
        widths=tuple(arch["widths"]),
        seed=0,
        dtype=np.dtype(arch["dtype"]),
    )
    le = np.dtype(model.dtype).newbyteorder("<")
    off = 0
    for spec in entry["params"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in model.params or model.params[name].shape != shape:
            raise DataError(f"{path}: parameter {name!r} {shape} does not fit "
                            f"the declared architecture")
        nbytes = int(np.prod(shape)) * le.itemsize
        if off + nbytes > len(payload):
            raise DataError(f"{path}: parameter payload too short at {name!r}")
        arr = np.frombuffer(payload, dtype=le, count=int(np.prod(shape)),
                            offset=off).reshape(shape)
        model.params[name] = arr.astype(model.dtype)
        off += nbytes
    if off != len(payload):
        raise DataError(f"{path}: {len(payload) - off} stray bytes after parameters")
    return model


def read_checkpoint(path) -> tuple[AnyModel, dict]:
    """Load a checkpoint; every framing, CRC, and shape violation is a DataError."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: shorter than the checkpoint header")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if any(blob[12:_HEADER.size]):
        raise DataError(f"{path}: nonzero header padding")

    meta_raw, off = _read_section(blob, _HEADER.size, path, "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: metadata is not valid JSON: {e}") from e
    if meta.get("schema_version") != 1:
        raise DataError(f"{path}: unsupported metadata schema")

    models = {}
    for entry in meta.get("models", []):
        payload, off = _read_section(blob, off, path, f"params[{entry['name']}]")
        models[entry["name"]] = _rebuild_model(entry, payload, path)
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")

    task = meta.get("task")
    if task == TaskMode.TWO_STEP.value:
        if set(models) != {"loc", "dmg"}:
            raise DataError(f"{path}: two-step checkpoint needs loc and dmg models")
        return (TwoStepModel(loc=models["loc"], dmg=models["dmg"],
                             tau_loc=float(meta["tau_loc"]),
                             tau_dmg=float(meta["tau_dmg"])), meta)
    if task == TaskMode.JOINT.value:
        if set(models) != {"model"}:
            raise DataError(f"{path}: joint checkpoint needs exactly one model")
        return models["model"], meta
    raise DataError(f"{path}: unknown task {task!r}")

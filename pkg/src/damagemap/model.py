"""The reference per-pixel classifier and its training mathematics.

A deliberately small fully-convolutional net, written in plain numpy so every
gradient is explicit: two 3x3 conv+ReLU layers and a 1x1 classification head.
Bi-temporal input enters either by channel concatenation before the encoder
(early fusion) or by running a shared-weight encoder on both dates and
concatenating the features (late fusion). The damage task can be solved
jointly (3 classes) or as two binary models whose outputs are combined.

Array conventions: public interfaces are channel-first (N, C, H, W) for
inputs and (N, K, H, W) for logits, matching the rest of the package;
internally activations are channel-last because im2col then feeds BLAS
without extra copies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .raster import CLASS_DAMAGED, CLASS_INTACT, CLASS_INVALID, dilate_mask

log = logging.getLogger(__name__)


class FusionMode(str, Enum):
    EARLY = "early"
    LATE = "late"


class TaskMode(str, Enum):
    JOINT = "joint"
    TWO_STEP = "two_step"


class InputMode(str, Enum):
    PRE_AND_POST = "pre_and_post"
    PRE_ONLY = "pre_only"


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW + warmup-cosine settings; defaults are the reference operating point."""

    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 40
    warmup_epochs: int = 3
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}"
            )
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")


def lr_at(step: int, total_steps: int, config: OptimizerConfig) -> float:
    """Learning rate at optimizer step `step` of `total_steps`.

    Linear warmup from 0 over the first warmup_epochs/epochs fraction of
    training, then a cosine decay back to 0 at t = 1.
    """
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    t = step / total_steps
    if not (0.0 <= t <= 1.0):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    w = config.warmup_epochs / config.epochs
    if t < w:
        return config.learning_rate * (t / w)
    if w == 1.0:
        return 0.0
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (t - w) / (1.0 - w)))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, k*k*C) patches under same zero padding.

    Columns are grouped by tap in (ky, kx, c) order. The windowed gather
    beats a tap-by-tap slice fill here: the copy streams its writes and
    takes the strided accesses on the read side.
    """
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (N, H, W, C, k, k) -> (N, H, W, k, k, C)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _col2im(dcol: np.ndarray, shape: tuple[int, int, int], c: int, k: int,
            dtype) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (N*H*W, k*k*C) back to (N, H, W, C)."""
    n, h, w = shape
    p = k // 2
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype)
    dcol = dcol.reshape(n, h, w, k * k * c)
    for t in range(k * k):
        ky, kx = divmod(t, k)
        dxp[:, ky:ky + h, kx:kx + w, :] += dcol[..., t * c:(t + 1) * c]
    return dxp[:, p:p + h, p:p + w, :]


class ReferenceClassifier:
    """Two conv3x3+ReLU layers and a 1x1 head, with hand-written backprop."""

    KERNEL = 3

    def __init__(
        self,
        in_channels: int = 14,
        n_classes: int = 3,
        fusion: FusionMode = FusionMode.LATE,
        inputs: InputMode = InputMode.PRE_AND_POST,
        widths: tuple[int, int] = (16, 32),
        seed: int = 0,
        dtype=np.float32,
    ):
        self.in_channels = int(in_channels)
        self.n_classes = int(n_classes)
        self.fusion = FusionMode(fusion)
        self.inputs = InputMode(inputs)
        self.widths = (int(widths[0]), int(widths[1]))
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        if self.in_channels < 1 or self.n_classes < 2:
            raise ConfigError("need in_channels >= 1 and n_classes >= 2")
        if min(self.widths) < 1:
            raise ConfigError(f"bad encoder widths {widths}")

        k2 = self.KERNEL * self.KERNEL
        if self.inputs is InputMode.PRE_ONLY:
            enc_in, self.branches = self.in_channels, 1
        elif self.fusion is FusionMode.EARLY:
            enc_in, self.branches = 2 * self.in_channels, 1
        else:
            enc_in, self.branches = self.in_channels, 2
        self.feat_dim = self.widths[1] * self.branches

        rng = np.random.default_rng(self.seed)

        def he(fan_in, shape):
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(self.dtype)

        self.params: dict[str, np.ndarray] = {
            "enc1_w": he(k2 * enc_in, (k2 * enc_in, self.widths[0])),
            "enc1_b": np.zeros(self.widths[0], self.dtype),
            "enc2_w": he(k2 * self.widths[0], (k2 * self.widths[0], self.widths[1])),
            "enc2_b": np.zeros(self.widths[1], self.dtype),
            "head_w": (rng.standard_normal((self.feat_dim, self.n_classes))
                       * math.sqrt(1.0 / self.feat_dim)).astype(self.dtype),
            "head_b": np.zeros(self.n_classes, self.dtype),
        }

    def arch_config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "fusion": self.fusion.value,
            "inputs": self.inputs.value,
            "widths": list(self.widths),
            "dtype": self.dtype.name,
        }

    def same_architecture(self, other: "ReferenceClassifier") -> bool:
        return self.arch_config() == other.arch_config()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward / backward ------------------------------------------------

    def _check_inputs(self, pre, post):
        pre = np.asarray(pre, dtype=self.dtype)
        if pre.ndim != 4 or pre.shape[1] != self.in_channels:
            raise DataError(
                f"expected pre (N, {self.in_channels}, H, W), got {pre.shape}"
            )
        if self.inputs is InputMode.PRE_ONLY:
            return pre, None
        if post is None:
            raise DataError("this model needs both pre and post inputs")
        post = np.asarray(post, dtype=self.dtype)
        if post.shape != pre.shape:
            raise DataError(f"pre {pre.shape} and post {post.shape} mismatch")
        return pre, post

    def _encode(self, x: np.ndarray, cache: Optional[list]) -> np.ndarray:
        """x (N, H, W, C_in) -> features (N, H, W, widths[1])."""
        n, h, w, _ = x.shape
        col1 = _im2col(x, self.KERNEL)
        z1 = col1 @ self.params["enc1_w"] + self.params["enc1_b"]
        a1 = np.maximum(z1, 0.0).reshape(n, h, w, self.widths[0])
        col2 = _im2col(a1, self.KERNEL)
        z2 = col2 @ self.params["enc2_w"] + self.params["enc2_b"]
        a2 = np.maximum(z2, 0.0).reshape(n, h, w, self.widths[1])
        if cache is not None:
            cache.append({"col1": col1, "z1": z1, "col2": col2, "z2": z2,
                          "shape": (n, h, w)})
        return a2

    def forward(self, pre, post=None, want_cache: bool = False):
        """Logits (N, K, H, W) from channel-first inputs; optionally a backprop cache."""
        pre, post = self._check_inputs(pre, post)
        n, _, h, w = pre.shape
        pre_l = pre.transpose(0, 2, 3, 1)
        branches: list[np.ndarray] = []
        if self.inputs is InputMode.PRE_ONLY:
            branches = [pre_l]
        elif self.fusion is FusionMode.EARLY:
            branches = [np.concatenate([pre_l, post.transpose(0, 2, 3, 1)], axis=3)]
        else:
            branches = [pre_l, post.transpose(0, 2, 3, 1)]

        cache: Optional[dict] = {"branches": []} if want_cache else None
        feats = [
            self._encode(b, cache["branches"] if want_cache else None)
            for b in branches
        ]
        f = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=3)
        logits = (f.reshape(n * h * w, self.feat_dim) @ self.params["head_w"]
                  + self.params["head_b"]).reshape(n, h, w, self.n_classes)
        out = logits.transpose(0, 3, 1, 2)
        if not want_cache:
            return out
        cache["feat"] = f
        return out, cache

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(logits) (N, K, H, W).

        The input gradient of the first conv is never needed, so it is not
        computed. Late-fusion branches share weights; their gradients sum.
        """
        dl = np.ascontiguousarray(dlogits.transpose(0, 2, 3, 1), dtype=self.dtype)
        n, h, w, k = dl.shape
        flat_dl = dl.reshape(n * h * w, k)
        f = cache["feat"]
        grads = {
            "head_w": f.reshape(n * h * w, self.feat_dim).T @ flat_dl,
            "head_b": flat_dl.sum(axis=0),
        }
        dfeat = (flat_dl @ self.params["head_w"].T).reshape(n, h, w, self.feat_dim)

        for key in ("enc1_w", "enc1_b", "enc2_w", "enc2_b"):
            grads[key] = np.zeros_like(self.params[key])
        w2 = self.widths[1]
        for bi, bc in enumerate(cache["branches"]):
            da2 = dfeat[..., bi * w2:(bi + 1) * w2]
            nb, hb, wb = bc["shape"]
            dz2 = da2.reshape(-1, w2) * (bc["z2"] > 0)
            grads["enc2_w"] += bc["col2"].T @ dz2
            grads["enc2_b"] += dz2.sum(axis=0)
            da1 = self._conv_input_grad(dz2.reshape(nb, hb, wb, w2), "enc2_w",
                                        self.widths[0])
            dz1 = da1.reshape(-1, self.widths[0]) * (bc["z1"] > 0)
            grads["enc1_w"] += bc["col1"].T @ dz1
            grads["enc1_b"] += dz1.sum(axis=0)
        return grads

    def _conv_input_grad(self, dout: np.ndarray, wkey: str, c_in: int) -> np.ndarray:
        """dx of a same-padded 3x3 conv: push dout through W^T, scatter-add."""
        k = self.KERNEL
        wmat = self.params[wkey]  # (k*k*c_in, c_out)
        n, h, w, c_out = dout.shape
        dcol = dout.reshape(n * h * w, c_out) @ wmat.T
        return _col2im(dcol, (n, h, w), c_in, k, self.dtype)


# ---------------------------------------------------------------------------
# Loss and masks


def training_target(
    label: np.ndarray, head: str, buffer_radius: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel class target and validity mask for one head.

    label: (N, H, W) uint8 in {0, 1, 2, 255}. Heads:
      "joint": 3-class target; valid = not invalid, minus the dilation ring
               dilate(buildings, r) \\ buildings (annotation edges are fuzzy,
               so pixels hugging a footprint are not trained on);
      "loc":   binary building target with the same ring exclusion;
      "dmg":   binary damaged target, trained only on true building pixels.
    """
    label = np.asarray(label)
    if label.ndim != 3:
        raise DataError(f"label batch must be (N, H, W), got {label.shape}")
    buildings = np.isin(label, (CLASS_INTACT, CLASS_DAMAGED))
    if head in ("joint", "loc"):
        valid = label != CLASS_INVALID
        if buffer_radius > 0:
            for i in range(label.shape[0]):
                ring = dilate_mask(buildings[i], buffer_radius) & ~buildings[i]
                valid[i] &= ~ring
        if head == "joint":
            target = np.where(label == CLASS_INVALID, 0, label).astype(np.int64)
        else:
            target = buildings.astype(np.int64)
    elif head == "dmg":
        valid = buildings
        target = (label == CLASS_DAMAGED).astype(np.int64)
    else:
        raise ConfigError(f"unknown head {head!r}")
    return target, valid


def masked_cross_entropy(
    logits: np.ndarray, target: np.ndarray, valid: np.ndarray
) -> tuple[float, np.ndarray, int]:
    """Mean cross-entropy over valid pixels, with its logits gradient.

    logits (N, K, H, W); target (N, H, W) int; valid (N, H, W) bool. Returns
    (loss, dlogits, n_valid); with nothing valid the loss and gradient are
    zero and n_valid = 0, which callers should treat as a flag.
    """
    logits = np.asarray(logits)
    n, k, h, w = logits.shape
    if target.shape != (n, h, w) or valid.shape != (n, h, w):
        raise DataError("target/valid shape mismatch with logits")
    if target.min() < 0 or target.max() >= k:
        raise DataError(f"target classes outside [0, {k})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(logits), 0

    lg = logits.transpose(0, 2, 3, 1).astype(np.float64)
    z = lg - lg.max(axis=3, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=3, keepdims=True)
    logp = z - np.log(sez)
    picked = np.take_along_axis(logp, target[..., None], axis=3)[..., 0]
    loss = float(-(picked * valid).sum() / n_valid)

    softmax = ez / sez
    onehot = np.zeros_like(softmax)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=3)
    dl = (softmax - onehot) * (valid[..., None] / n_valid)
    return loss, dl.transpose(0, 3, 1, 2).astype(logits.dtype), n_valid


def loss_and_gradients(
    model: ReferenceClassifier,
    pre: np.ndarray,
    post: Optional[np.ndarray],
    target: np.ndarray,
    valid: np.ndarray,
) -> tuple[float, dict[str, np.ndarray], int]:
    """Forward, masked CE, backward; batch-mean loss over valid pixels.

    Samples stream through forward+backward one at a time and the per-sample
    gradients are summed with valid-count weights, which is the same batch
    mean a monolithic pass would produce (up to summation order). Keeping one
    sample's im2col buffers live instead of the whole batch's roughly halves
    the wall time at training shapes; everything past L2 is bandwidth-bound.
    """
    pre = np.asarray(pre)
    n = pre.shape[0]
    n_valid = int(np.asarray(valid, dtype=bool).sum())
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    if n_valid == 0:
        # still raises on malformed inputs, and keeps the loss definition
        logits = model.forward(pre, post)
        loss, _, _ = masked_cross_entropy(logits, target, valid)
        return loss, grads, 0
    loss = 0.0
    for i in range(n):
        post_i = None if post is None else post[i:i + 1]
        logits, cache = model.forward(pre[i:i + 1], post_i, want_cache=True)
        loss_i, dlogits, nv_i = masked_cross_entropy(
            logits, target[i:i + 1], valid[i:i + 1])
        if nv_i == 0:
            continue
        scale = nv_i / n_valid
        loss += loss_i * scale
        dlogits *= model.dtype.type(scale)
        for key, g in model.backward(cache, dlogits).items():
            grads[key] += g
    return loss, grads, n_valid


# ---------------------------------------------------------------------------
# Optimizer


class AdamWState:
    """First/second moment buffers plus the step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    config: OptimizerConfig,
) -> None:
    """One in-place AdamW update.

    Bias-corrected moment estimates drive the adaptive step; weight decay is
    decoupled and applied afterwards as p -= lr * wd * p, so a zero gradient
    still shrinks weights by exactly (1 - lr * wd).
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, p in params.items():
        g = grads[key]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {key} at step {state.t}")
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        mhat = m / c1
        vhat = v / c2
        p -= lr * mhat / (np.sqrt(vhat) + config.eps)
        p -= lr * config.weight_decay * p


# ---------------------------------------------------------------------------
# Prediction and ensembling


def two_step_combine(
    p_building: np.ndarray,
    p_damaged: np.ndarray,
    tau_loc: float = 0.5,
    tau_dmg: float = 0.5,
) -> np.ndarray:
    """Merge the binary heads: background where the localization probability
    is below tau_loc, otherwise damaged iff P(damaged) >= tau_dmg."""
    p_building = np.asarray(p_building)
    p_damaged = np.asarray(p_damaged)
    if p_building.shape != p_damaged.shape:
        raise DataError("probability map shapes differ")
    out = np.where(
        p_building < tau_loc,
        np.uint8(0),
        np.where(p_damaged >= tau_dmg, np.uint8(CLASS_DAMAGED), np.uint8(CLASS_INTACT)),
    )
    return out.astype(np.uint8)


def softmax_probs(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


@dataclass
class TwoStepModel:
    """A localization model and a damage model acting as one classifier."""

    loc: ReferenceClassifier
    dmg: ReferenceClassifier
    tau_loc: float = 0.5
    tau_dmg: float = 0.5


def _mean_logits(models: Sequence[ReferenceClassifier], pre, post) -> np.ndarray:
    out = None
    for m in models:
        lg = m.forward(pre, post).astype(np.float64)
        out = lg if out is None else out + lg
    return out / len(models)


def ensemble_predict(
    models: Sequence,
    pre: np.ndarray,
    post: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Averaged-logits prediction for one patch.

    models: ReferenceClassifier list (joint task) or TwoStepModel list; all
    members must share the task and architecture. pre/post are (C, H, W)
    stacks; the result is an (H, W) uint8 class map. Averaging the logits of
    identical members reproduces the single model exactly.
    """
    if not models:
        raise ConfigError("ensemble_predict: empty model list")
    pre_b = np.asarray(pre)[None]
    post_b = None if post is None else np.asarray(post)[None]

    if all(isinstance(m, TwoStepModel) for m in models):
        ref = models[0]
        for m in models[1:]:
            if not (m.loc.same_architecture(ref.loc) and m.dmg.same_architecture(ref.dmg)
                    and (m.tau_loc, m.tau_dmg) == (ref.tau_loc, ref.tau_dmg)):
                raise ConfigError("ensemble members disagree on architecture or thresholds")
        loc_logits = _mean_logits([m.loc for m in models], pre_b, post_b)
        dmg_logits = _mean_logits([m.dmg for m in models], pre_b, post_b)
        p_b = softmax_probs(loc_logits)[0, 1]
        p_d = softmax_probs(dmg_logits)[0, 1]
        return two_step_combine(p_b, p_d, ref.tau_loc, ref.tau_dmg)

    if all(isinstance(m, ReferenceClassifier) for m in models):
        ref = models[0]
        for m in models[1:]:
            if not m.same_architecture(ref):
                raise ConfigError("ensemble members disagree on architecture")
        logits = _mean_logits(models, pre_b, post_b)
        return np.argmax(logits[0], axis=0).astype(np.uint8)

    raise ConfigError("ensemble members must all share one task mode")


# ---------------------------------------------------------------------------
# Class-balance-aware sampling


def patch_sampling_weights(labels: Sequence[np.ndarray]) -> np.ndarray:
    """Draw probability per patch, overweighting rare-class content.

    Each patch scores sum_c share_c(patch) / freq_c(global) over the classes
    {background, intact, damaged} present in the whole set (a globally absent
    class is skipped with a warning); shares are over valid pixels. Scores
    are normalized to probabilities. A patch with no valid pixels gets weight
    zero.
    """
    labels = [np.asarray(l) for l in labels]
    if not labels:
        raise DataError("patch_sampling_weights: no labels")
    classes = (0, CLASS_INTACT, CLASS_DAMAGED)
    counts = np.zeros((len(labels), len(classes)), dtype=np.float64)
    valid = np.zeros(len(labels), dtype=np.float64)
    for i, lab in enumerate(labels):
        for j, c in enumerate(classes):
            counts[i, j] = (lab == c).sum()
        valid[i] = (lab != CLASS_INVALID).sum()

    total_valid = valid.sum()
    if total_valid == 0:
        raise DataError("patch_sampling_weights: every pixel is invalid")
    freq = counts.sum(axis=0) / total_valid
    absent = [classes[j] for j in range(len(classes)) if freq[j] == 0.0]
    if absent:
        log.warning("classes %s absent from the whole set; skipped in weighting", absent)

    weights = np.zeros(len(labels), dtype=np.float64)
    nonzero = valid > 0
    for j in range(len(classes)):
        if freq[j] == 0.0:
            continue
        share = np.zeros(len(labels))
        share[nonzero] = counts[nonzero, j] / valid[nonzero]
        weights += share / freq[j]
    if not weights.sum() > 0:
        raise DataError("patch_sampling_weights: all weights are zero")
    return weights / weights.sum()


def biased_sampler(
    labels: Sequence[np.ndarray], seed: int
) -> Iterator[int]:
    """Infinite stream of patch indices drawn with replacement.

    Probabilities come from patch_sampling_weights; the stream is a pure
    function of (labels, seed).
    """
    weights = patch_sampling_weights(labels)
    rng = np.random.default_rng(seed)
    n = len(weights)
    while True:
        yield int(rng.choice(n, p=weights))

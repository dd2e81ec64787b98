"""Optimization: amortized network training and per-pair refinement.

Training follows single-example stochastic gradient descent with ADAM,
sampling one registration pair uniformly at random per iteration.  Instance
optimization treats the displacement field itself as the parameters and
descends the same objective, returning the best-seen iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import net as N
from . import tape as T
from .grid import (
    DisplacementField,
    GridImage,
    RegistrationPair,
    SegmentationMap,
    check_same_geometry,
    onehot_from_labels,
)
from .losses import SEG_ONLY, LossWeights, unsup_loss_grad
from .metrics import dice_eval


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected ADAM accumulators for a list of parameter arrays."""

    t: int
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return cls(
            0,
            tuple(np.zeros_like(p) for p in params),
            tuple(np.zeros_like(p) for p in params),
            lr=lr,
        )


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[AdamState, list[np.ndarray]]:
    """One bias-corrected ADAM update; pure (returns new state and params)."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter / gradient / state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return replace(state, t=t, m=tuple(new_m), v=tuple(new_v)), new_p


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)
    sim_kind: str = "mse"
    learning_rate: float = 1e-4
    seed: int = 0
    log_every: int = 50
    validate_every: int = 500
    observed_labels: tuple[int, ...] | None = None  # None: all labels observed
    label_merge: dict[int, int] | None = None       # coarse-label grouping

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class TrainResult:
    params: N.NetParams
    best_params: N.NetParams
    best_val_dice: float
    log: list[dict]


def _training_segmentation(labels: GridImage, cfg: TrainConfig, num_labels: int) -> SegmentationMap:
    """One-hot channels restricted to the labels observed during training."""
    codes = labels.values
    if cfg.label_merge is not None:
        merged = np.zeros_like(codes)
        for src, dst in cfg.label_merge.items():
            merged[codes == src] = dst
        codes = merged
        num_labels = max(cfg.label_merge.values()) + 1
    img = GridImage(labels.geom, codes)
    onehot = onehot_from_labels(img, num_labels)
    if cfg.observed_labels is None:
        # background (label 0) carries no anatomical overlap signal
        keep = tuple(range(1, num_labels))
    else:
        keep = tuple(cfg.observed_labels)
        if any(k < 0 or k >= num_labels for k in keep):
            raise ValueError(f"observed labels {keep} out of range [0, {num_labels})")
    return SegmentationMap(labels.geom, onehot.weights[..., keep])


def _num_labels(pairs: list[RegistrationPair]) -> int:
    top = 0
    for p in pairs:
        top = max(top, int(p.fixed_seg.values.max()), int(p.moving_seg.values.max()))
    return top + 1


def _loss_node(tp, cfg, pair, u_node, seg_pair):
    """Record the full training objective for one pair on the tape."""
    weights = cfg.weights
    terms, coeffs = [], []
    if weights.gamma is not SEG_ONLY:
        warped = T.warp(tp, pair.moving, u_node)
        if cfg.sim_kind == "mse":
            terms.append(T.mse_loss(tp, pair.fixed, warped))
        elif cfg.sim_kind == "cc":
            terms.append(T.cc_loss(tp, pair.fixed, warped, weights.cc_window))
        else:
            raise ValueError(f"unknown sim_kind {cfg.sim_kind!r}")
        coeffs.append(1.0)
        if weights.lam > 0:
            terms.append(T.smooth_loss(tp, u_node, pair.geom))
            coeffs.append(weights.lam)
    if weights.gamma is SEG_ONLY or weights.gamma > 0:
        sf, sm = seg_pair
        warped_seg = T.warp_seg(tp, sm, u_node)
        terms.append(T.overlap_loss(tp, sf, warped_seg))
        coeffs.append(1.0 if weights.gamma is SEG_ONLY else weights.gamma)
    return T.weighted_sum(tp, terms, coeffs)


def _validation_dice(params: N.NetParams, pairs: list[RegistrationPair], num_labels: int) -> float:
    scores = []
    for p in pairs:
        u = N.predict_displacement(params, p.fixed, p.moving)
        scores.append(dice_eval(p.fixed_seg, p.moving_seg, u, num_labels).mean)
    return float(np.mean(scores))


def train(
    config: N.NetConfig,
    pairs: list[RegistrationPair],
    cfg: TrainConfig,
    val_pairs: list[RegistrationPair] | None = None,
) -> TrainResult:
    """Single-example SGD with ADAM over a dataset of registration pairs.

    Keeps the parameters with the best validation Dice (validation pairs
    need hard segmentations); without validation pairs the final iterate is
    returned as best.
    """
    if not pairs:
        raise ValueError("empty training dataset")
    geom = pairs[0].geom
    for p in pairs:
        check_same_geometry(p.fixed, p.moving)
        if p.geom.dims != geom.dims:
            raise ValueError("all training pairs must share one geometry")
    N.check_geometry_compatible(config, geom)
    uses_segs = cfg.weights.gamma is SEG_ONLY or cfg.weights.gamma > 0
    seg_pairs: list[tuple | None] = [None] * len(pairs)
    if uses_segs:
        missing = [i for i, p in enumerate(pairs) if p.fixed_seg is None or p.moving_seg is None]
        if missing:
            raise ValueError(f"gamma > 0 requires segmentations; pair {missing[0]} has none")
        k = _num_labels(pairs)
        seg_pairs = [
            (
                _training_segmentation(p.fixed_seg, cfg, k),
                _training_segmentation(p.moving_seg, cfg, k),
            )
            for p in pairs
        ]

    rng = np.random.default_rng(cfg.seed)
    params = N.init_params(config, geom.ndim, rng)
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays, lr=cfg.learning_rate)
    log: list[dict] = []
    best_val = -np.inf
    best_arrays = [a.copy() for a in arrays]
    val_labels = _num_labels(val_pairs) if val_pairs else 0

    for it in range(1, cfg.iterations + 1):
        idx = int(rng.integers(len(pairs)))
        pair = pairs[idx]
        tp = T.Tape()
        param_nodes = [tp.leaf(a) for a in arrays]
        u_node = N.build_forward(tp, param_nodes, pair.fixed, pair.moving, config)
        loss_node = _loss_node(tp, cfg, pair, u_node, seg_pairs[idx])
        loss = float(loss_node.value)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {it}")
        tp.backward(loss_node)
        grads = [n.grad for n in param_nodes]
        state, arrays = adam_step(state, arrays, grads)
        if it % cfg.log_every == 0 or it == 1:
            log.append({"iteration": it, "loss": loss, "pair": idx})
        if val_pairs and (it % cfg.validate_every == 0 or it == cfg.iterations):
            cand = params.replace_arrays(arrays)
            score = _validation_dice(cand, val_pairs, val_labels)
            log.append({"iteration": it, "val_dice": score})
            if score > best_val:
                best_val = score
                best_arrays = [a.copy() for a in arrays]

    final = params.replace_arrays(arrays)
    if val_pairs:
        best = params.replace_arrays(best_arrays)
    else:
        best, best_val = final, float("nan")
    return TrainResult(final, best, best_val, log)


def optimize_instance(
    fixed: GridImage,
    moving: GridImage,
    u_init: DisplacementField | None = None,
    weights: LossWeights | None = None,
    iterations: int = 100,
    sim_kind: str = "mse",
    learning_rate: float = 0.1,
) -> tuple[DisplacementField, list[float]]:
    """Refine a displacement field by ADAM on the unsupervised objective.

    With ``u_init=None`` (or zero) this is classical intensity-based
    registration driven by automatic differentiation.  Returns the
    best-seen iterate, so the result never scores worse than ``u_init``.
    """
    check_same_geometry(fixed, moving)
    if u_init is None:
        u_init = DisplacementField(fixed.geom, np.zeros(fixed.geom.dims + (fixed.geom.ndim,)))
    check_same_geometry(fixed, u_init)
    weights = weights or LossWeights()
    u = u_init.vectors.copy()
    state = AdamState.zeros_like([u], lr=learning_rate)
    trace: list[float] = []
    best_loss, best_u = np.inf, u.copy()
    for _ in range(iterations):
        value, grad = unsup_loss_grad(
            fixed, moving, DisplacementField(fixed.geom, u), weights, sim_kind
        )
        if not np.isfinite(value.total):
            raise NumericalError("non-finite loss during instance optimization")
        trace.append(value.total)
        if value.total < best_loss:
            best_loss, best_u = value.total, u.copy()
        state, (u,) = adam_step(state, [u], [grad])
    final_value = unsup_loss_grad(
        fixed, moving, DisplacementField(fixed.geom, u), weights, sim_kind
    )[0].total
    trace.append(final_value)
    if final_value < best_loss:
        best_u = u
    return DisplacementField(fixed.geom, best_u), trace

"""Matching features fed to the meta-network.

Explicit distances are multi-bandwidth RBF MMD (marginal and class-conditional);
implicit distances are domain-discriminator cross-entropies. Task-independent
features are paired source/target embeddings or softmax outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from . import diffmath as dm
from .diffmath import ConfigurationError, ShapeError, Tensor, UsageError
from .models import Mlp, discriminator_logits

MODES = ("emb", "logit", "mmd", "adv", "emb+mmd", "emb+adv", "logit+mmd", "logit+adv")
PAIR_REPRS = ("diff", "concat")


@dataclass(frozen=True)
class KernelSpec:
    base_bandwidth: float | str = "median"
    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        mults = tuple(float(m) for m in self.multipliers)
        if not mults or min(mults) <= 0:
            raise ConfigurationError(f"kernel multipliers must be positive, got {mults}")
        if isinstance(self.base_bandwidth, str):
            if self.base_bandwidth != "median":
                raise ConfigurationError(f"bandwidth must be a positive float or 'median', got {self.base_bandwidth!r}")
        elif not self.base_bandwidth > 0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.base_bandwidth}")
        object.__setattr__(self, "multipliers", mults)

    def resolve(self, *point_sets) -> "KernelSpec":
        """Fix a median bandwidth from the (detached) pooled points."""
        if self.base_bandwidth != "median":
            return self
        pooled = np.vstack([dm.as_tensor(p).data for p in point_sets])
        return replace(self, base_bandwidth=median_bandwidth(pooled))

    def bandwidths(self) -> list[float]:
        if isinstance(self.base_bandwidth, str):
            raise UsageError("median bandwidth must be resolved against data first")
        return [self.base_bandwidth * m for m in self.multipliers]


def median_bandwidth(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise UsageError(f"median bandwidth needs at least 2 points, got shape {pts.shape}")
    med = float(np.median(pdist(pts)))
    return med if med > 0 else 1.0


def _sq_dists(X: Tensor, Y: Tensor) -> Tensor:
    # |x|^2 + |y|^2 - 2 x.y, clamped at zero against rounding
    cross = dm.matmul(X, dm.transpose(Y))
    d2 = dm.row_squared_norms(X) + dm.transpose(dm.row_squared_norms(Y)) - 2.0 * cross
    return dm.relu(d2)


def rbf_kernel_matrix(X, Y, spec: KernelSpec) -> Tensor:
    X, Y = dm.as_tensor(X), dm.as_tensor(Y)
    if X.data.ndim != 2 or Y.data.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"kernel inputs must be matrices of equal width, got {X.shape} and {Y.shape}")
    spec = spec.resolve(X, Y)
    d2 = _sq_dists(X, Y)
    sigmas = spec.bandwidths()
    K = None
    for s in sigmas:
        term = dm.exp(d2 * (-1.0 / (2.0 * s * s)))
        K = term if K is None else K + term
    return K * (1.0 / len(sigmas))


def mmd2_biased(X, Y, spec: KernelSpec) -> Tensor:
    """Biased (V-statistic) squared MMD: mean K_XX + mean K_YY - 2 mean K_XY."""
    X, Y = dm.as_tensor(X), dm.as_tensor(Y)
    if X.shape[0] < 1 or Y.shape[0] < 1:
        raise ShapeError(f"MMD needs non-empty samples, got {X.shape} and {Y.shape}")
    spec = spec.resolve(X, Y)
    kxx = dm.mean(rbf_kernel_matrix(X, X, spec))
    kyy = dm.mean(rbf_kernel_matrix(Y, Y, spec))
    kxy = dm.mean(rbf_kernel_matrix(X, Y, spec))
    return kxx + kyy - 2.0 * kxy


class ConditionalResult(NamedTuple):
    value: Tensor
    degenerate: bool
    classes: tuple[int, ...]


def conditional_mmd(Xs, ys, Xt, pseudo_labels, confidences, spec: KernelSpec,
                    tau: float = 0.8) -> ConditionalResult:
    """Mean class-wise MMD over classes with source samples and confident target samples."""
    if not 0.0 <= tau <= 1.0:
        raise UsageError(f"tau must be in [0, 1], got {tau}")
    Xs, Xt = dm.as_tensor(Xs), dm.as_tensor(Xt)
    ys = np.asarray(ys)
    pl = np.asarray(pseudo_labels)
    conf = np.asarray(confidences, dtype=np.float64)
    classes = sorted(set(ys.tolist()) & set(pl[conf >= tau].tolist()))
    if not classes:
        return ConditionalResult(Tensor(0.0), True, ())
    total = None
    for c in classes:
        s_idx = np.flatnonzero(ys == c)
        t_idx = np.flatnonzero((pl == c) & (conf >= tau))
        term = mmd2_biased(dm.take_rows(Xs, s_idx), dm.take_rows(Xt, t_idx), spec)
        total = term if total is None else total + term
    return ConditionalResult(total * (1.0 / len(classes)), False, tuple(int(c) for c in classes))


def _domain_targets(ns: int, nt: int) -> np.ndarray:
    return np.concatenate([np.ones(ns), np.zeros(nt)]).reshape(-1, 1)


def _check_sides(emb_s: Tensor, emb_t: Tensor) -> None:
    if emb_s.shape[0] < 1 or emb_t.shape[0] < 1:
        raise UsageError(f"adversarial distance needs both domains, got {emb_s.shape[0]} source "
                         f"and {emb_t.shape[0]} target rows")


def train_discriminator_step(G_d: Mlp, inputs: np.ndarray, targets: np.ndarray, lr: float) -> float:
    """One SGD step on binary cross-entropy with detached inputs; returns the pre-step loss."""
    with dm.Tape() as tape:
        loss = dm.bce_with_logits(discriminator_logits(G_d, inputs), targets)
    dm.zero_grad(G_d.params)
    dm.backward(tape, loss)
    dm.sgd_step(G_d.params, lr)
    return loss.item()


def adversarial_marginal(G_d: Mlp, emb_s, emb_t, lr: float = 0.05, train: bool = True
                         ) -> tuple[float, Tensor]:
    """Update the domain discriminator on detached embeddings, then return its
    cross-entropy recomputed on the gradient-carrying embeddings (source label 1)."""
    emb_s, emb_t = dm.as_tensor(emb_s), dm.as_tensor(emb_t)
    _check_sides(emb_s, emb_t)
    targets = _domain_targets(emb_s.shape[0], emb_t.shape[0])
    disc_loss = float("nan")
    if train:
        disc_loss = train_discriminator_step(G_d, np.vstack([emb_s.data, emb_t.data]), targets, lr)
    joined = dm.concat([emb_s, emb_t], axis=0)
    value = dm.bce_with_logits(discriminator_logits(G_d.frozen(), joined), targets)
    return disc_loss, value


def adversarial_conditional(discs: Sequence[Mlp], emb_s, ys, emb_t, soft_t, lr: float = 0.05,
                            train: bool = True) -> tuple[list[float], Tensor]:
    """Class-wise discriminators on embeddings scaled by class probability.

    Source rows are weighted by their one-hot labels, target rows by ``soft_t``
    (rows summing to one). The value is the class-mean domain cross-entropy.
    """
    emb_s, emb_t = dm.as_tensor(emb_s), dm.as_tensor(emb_t)
    _check_sides(emb_s, emb_t)
    C = len(discs)
    soft_t = dm.as_tensor(soft_t)
    if soft_t.shape != (emb_t.shape[0], C):
        raise ShapeError(f"soft predictions {soft_t.shape} do not match {emb_t.shape[0]} rows x {C} classes")
    ys = np.asarray(ys)
    onehot = np.zeros((emb_s.shape[0], C))
    onehot[np.arange(ys.size), ys] = 1.0
    targets = _domain_targets(emb_s.shape[0], emb_t.shape[0])
    losses, total = [], None
    for c, G in enumerate(discs):
        w_s = onehot[:, c:c + 1]
        w_t = dm.take_cols(soft_t, [c])
        if train:
            detached = np.vstack([w_s * emb_s.data, w_t.data * emb_t.data])
            losses.append(train_discriminator_step(G, detached, targets, lr))
        joined = dm.concat([emb_s * w_s, emb_t * w_t], axis=0)
        term = dm.bce_with_logits(discriminator_logits(G.frozen(), joined), targets)
        total = term if total is None else total + term
    return losses, total * (1.0 / C)


def feature_dim(mode: str, embed_dim: int, num_classes: int, pair_repr: str = "diff") -> int:
    if mode not in MODES:
        raise ConfigurationError(f"unknown matching mode {mode!r}; expected one of {MODES}")
    if pair_repr not in PAIR_REPRS:
        raise ConfigurationError(f"unknown pair representation {pair_repr!r}")
    width = 2 if pair_repr == "concat" else 1
    dim = 0
    parts = mode.split("+")
    if "emb" in parts:
        dim += width * embed_dim
    if "logit" in parts:
        dim += width * num_classes
    if "mmd" in parts or "adv" in parts:
        dim += 2
    return dim


@dataclass
class MatchingFeature:
    rows: Tensor
    mode: str
    dim: int
    components: dict = field(default_factory=dict)


def _pair_rows(a: Tensor, b: Tensor, pair_repr: str) -> Tensor:
    n = min(a.shape[0], b.shape[0])
    a = dm.take_rows(a, np.arange(n)) if a.shape[0] != n else a
    b = dm.take_rows(b, np.arange(n)) if b.shape[0] != n else b
    if pair_repr == "diff":
        return a - b
    return dm.concat([a, b], axis=1)


def build_matching_features(mode: str, emb_s=None, emb_t=None, logits_s=None, logits_t=None,
                            d_m=None, d_c=None, adv_m=None, adv_c=None,
                            pair_repr: str = "diff") -> MatchingFeature:
    """Assemble the meta-network input for ``mode``.

    Row i pairs source row i with target row i (batches are already shuffled);
    the pair count is the shorter batch. Scalar distances are broadcast to every row.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown matching mode {mode!r}; expected one of {MODES}")
    if pair_repr not in PAIR_REPRS:
        raise ConfigurationError(f"unknown pair representation {pair_repr!r}")
    parts = mode.split("+")
    blocks = []
    if "emb" in parts:
        blocks.append(_pair_rows(dm.as_tensor(emb_s), dm.as_tensor(emb_t), pair_repr))
    if "logit" in parts:
        blocks.append(_pair_rows(dm.softmax(logits_s), dm.softmax(logits_t), pair_repr))
    if "mmd" in parts:
        scalars = (d_m, d_c)
    elif "adv" in parts:
        scalars = (adv_m, adv_c)
    else:
        scalars = None
    if scalars is not None:
        if any(v is None for v in scalars):
            raise ConfigurationError(f"mode {mode!r} needs both marginal and conditional distances")
        if blocks:
            n = blocks[0].shape[0]
        else:
            candidates = [t for t in (emb_s, emb_t, logits_s, logits_t) if t is not None]
            n = min(dm.as_tensor(t).shape[0] for t in candidates) if candidates else 1
        ones = np.ones((n, 1))
        blocks += [dm.as_tensor(v) * ones for v in scalars]
    rows = blocks[0] if len(blocks) == 1 else dm.concat(blocks, axis=1)
    comps = {"d_m": d_m, "d_c": d_c, "adv_m": adv_m, "adv_c": adv_c}
    return MatchingFeature(rows, mode, rows.shape[1], {k: v for k, v in comps.items() if v is not None})

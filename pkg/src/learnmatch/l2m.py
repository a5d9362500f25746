"""Training engine: pseudo-labelled meta-data, schedules, the assist-model
two-step update, the full epoch loop, and alignment baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffmath as dm
from .datasets import (Dataset, BatchPlan, batch_iterator, load_csv_dataset, make_shifted_blobs,
                       make_two_moons, rotate_domain, standardize_with_source, TARGET)
from .diffmath import ConfigurationError, NumericError, Tape
from .evalio.config import ExperimentConfig
from .evalio.metrics import accuracy, proxy_a_distance
from .matching import (KernelSpec, MatchingFeature, adversarial_conditional, adversarial_marginal,
                       build_matching_features, conditional_mmd, feature_dim, mmd2_biased)
from .models import ModelBundle, build_bundle, classify_forward, clone_assist, feature_forward, mlp_forward

log = logging.getLogger(__name__)

BASELINES = ("source_only", "mmd_align", "adv_align")


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def lr_schedule(k: int, eta0: float, gamma: float, upsilon: float) -> float:
    """eta0 * (1 + gamma*k)^(-upsilon); non-increasing in k."""
    if k < 0:
        raise dm.UsageError(f"step must be >= 0, got {k}")
    return eta0 * (1.0 + gamma * k) ** (-upsilon)


def lambda_schedule(progress: float, lambda_max: float) -> float:
    """Sigmoid ramp from 0 at progress 0 to ~lambda_max at progress 1."""
    if not 0.0 <= progress <= 1.0:
        raise dm.UsageError(f"progress must be in [0, 1], got {progress}")
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


# ---------------------------------------------------------------------------
# meta-data
# ---------------------------------------------------------------------------


@dataclass
class MetaData:
    indices: np.ndarray
    samples: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    per_class_counts: np.ndarray

    @property
    def empty(self) -> bool:
        return self.indices.size == 0

    def __len__(self) -> int:
        return int(self.indices.size)


def select_meta_data(bundle: ModelBundle, Xt: np.ndarray, m: int = 5, tau: float = 0.8,
                     probs: np.ndarray | None = None) -> MetaData:
    """Per predicted class, the <= m most confident target samples with confidence >= tau.

    Ties in confidence go to the lower sample index. ``probs`` may supply
    precomputed softmax outputs for ``Xt``.
    """
    if m < 1:
        raise dm.UsageError(f"m must be >= 1, got {m}")
    if probs is None:
        probs = bundle.predict_proba(Xt)
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(pred)), pred]
    C = probs.shape[1]
    chosen, counts = [], np.zeros(C, dtype=np.int64)
    for c in range(C):
        idx = np.flatnonzero((pred == c) & (conf >= tau))
        order = idx[np.lexsort((idx, -conf[idx]))][:m]
        counts[c] = order.size
        chosen.append(order)
    indices = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    Xt = np.asarray(Xt)
    return MetaData(indices, Xt[indices], pred[indices], conf[indices], counts)


# ---------------------------------------------------------------------------
# matching features for one pair of batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchSetup:
    mode: str = "emb+mmd"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    tau: float = 0.8
    pair_repr: str = "diff"
    disc_lr: float = 0.05


def match_features(bundle: ModelBundle, emb_s, ys, emb_t, logits_t, setup: MatchSetup, *,
                   logits_s=None, train_discriminators: bool = True, target_pseudo=None,
                   kernel: KernelSpec | None = None) -> MatchingFeature:
    """Matching features between a source batch and a target batch of embeddings.

    Target pseudo-labels come from ``logits_t`` unless ``target_pseudo`` =
    (labels, confidences) is given. Discriminators (adv modes) take one step
    on detached inputs when ``train_discriminators``.
    """
    parts = setup.mode.split("+")
    soft_t = dm.softmax(logits_t)
    probs_t = soft_t.data
    if target_pseudo is None:
        pseudo = probs_t.argmax(axis=1)
        conf = probs_t[np.arange(len(pseudo)), pseudo]
    else:
        pseudo, conf = target_pseudo
    d_m = d_c = adv_m = adv_c = None
    if "mmd" in parts:
        k = kernel if kernel is not None else setup.kernel.resolve(emb_s, emb_t)
        d_m = mmd2_biased(emb_s, emb_t, k)
        d_c = conditional_mmd(emb_s, ys, emb_t, pseudo, conf, k, setup.tau).value
    if "adv" in parts:
        _, adv_m = adversarial_marginal(bundle.disc_marginal, emb_s, emb_t, setup.disc_lr,
                                        train=train_discriminators)
        _, adv_c = adversarial_conditional(bundle.disc_conditional, emb_s, ys, emb_t, soft_t,
                                           setup.disc_lr, train=train_discriminators)
    return build_matching_features(setup.mode, emb_s, emb_t, logits_s, logits_t,
                                   d_m, d_c, adv_m, adv_c, pair_repr=setup.pair_repr)


def composite_loss(bundle: ModelBundle, Xs, ys, Xt, lam: float, setup: MatchSetup, *,
                   train_discriminators: bool = True) -> tuple[dm.Tensor, dm.Tensor, dm.Tensor]:
    """L_cls + lam * L_match with the meta-network held fixed; returns (total, cls, match)."""
    emb_s = feature_forward(bundle.feature_extractor, Xs)
    emb_t = feature_forward(bundle.feature_extractor, Xt)
    logits_s = classify_forward(bundle.classifier, emb_s)
    logits_t = classify_forward(bundle.classifier, emb_t)
    l_cls = dm.softmax_cross_entropy(logits_s, ys)
    F = match_features(bundle, emb_s, ys, emb_t, logits_t, setup, logits_s=logits_s,
                       train_discriminators=train_discriminators)
    l_match = mlp_forward(bundle.meta_net.frozen(), F.rows)
    l_match = dm.mean(l_match)
    return l_cls + lam * l_match, l_cls, l_match


def _checked(value: dm.Tensor, what: str, step: int) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NumericError(f"{what} is not finite at step {step}")


def main_update(bundle: ModelBundle, Xs, ys, Xt, lam: float, eta: float, setup: MatchSetup,
                clip_norm: float | None = None, step: int = 0) -> tuple[float, float]:
    """One SGD step on phi (feature extractor + classifier) in place; theta is untouched.

    Returns the pre-step (L_cls, L_match).
    """
    with Tape() as tape:
        total, l_cls, l_match = composite_loss(bundle, Xs, ys, Xt, lam, setup)
    _checked(total, "training loss", step)
    params = bundle.main_params()
    dm.zero_grad(params)
    dm.backward(tape, total)
    dm.sgd_step(params, eta, clip_norm=clip_norm)
    return l_cls.item(), l_match.item()


def meta_features(view: ModelBundle, Xs, ys, meta: MetaData, setup: MatchSetup,
                  kernel: KernelSpec | None) -> MatchingFeature:
    fe, cl = view.feature_extractor.frozen(), view.classifier.frozen()
    emb_s = feature_forward(fe, Xs)
    emb_t = feature_forward(fe, meta.samples)
    logits_s = classify_forward(cl, emb_s)
    logits_t = classify_forward(cl, emb_t)
    return match_features(view, emb_s, ys, emb_t, logits_t, setup, logits_s=logits_s,
                          train_discriminators=False,
                          target_pseudo=(meta.pseudo_labels, meta.confidences), kernel=kernel)


def validation_loss(meta_net, before: ModelBundle, after: ModelBundle, Xs, ys, meta: MetaData,
                    setup: MatchSetup, sign: int = 1) -> dm.Tensor:
    """mean tanh(sign * (g(F at phi(t)) - g(F at phi(t+1)))) over paired rows.

    Both snapshots are detached; the discriminators of ``after`` serve both.
    """
    view_before = ModelBundle(before.feature_extractor, before.classifier, meta_net,
                              after.disc_marginal, after.disc_conditional)
    kernel = None
    if "mmd" in setup.mode.split("+"):
        emb_s = feature_forward(before.feature_extractor.frozen(), Xs)
        emb_t = feature_forward(before.feature_extractor.frozen(), meta.samples)
        kernel = setup.kernel.resolve(emb_s, emb_t)
    F_before = meta_features(view_before, Xs, ys, meta, setup, kernel)
    F_after = meta_features(after, Xs, ys, meta, setup, kernel)
    g_before = mlp_forward(meta_net, F_before.rows)
    g_after = mlp_forward(meta_net, F_after.rows)
    return dm.mean(dm.tanh((g_before - g_after) * float(sign)))


def meta_update(meta_net, before: ModelBundle, after: ModelBundle, Xs, ys, meta: MetaData,
                beta: float, setup: MatchSetup, sign: int = 1, weight_decay: float = 1e-4,
                step: int = 0) -> float:
    """One SGD step on theta minimizing the validation loss; returns the pre-step loss."""
    with Tape() as tape:
        l_val = validation_loss(meta_net, before, after, Xs, ys, meta, setup, sign)
    _checked(l_val, "meta validation loss", step)
    dm.zero_grad(meta_net.params)
    dm.backward(tape, l_val)
    dm.sgd_step(meta_net.params, beta, weight_decay=weight_decay)
    return l_val.item()


# ---------------------------------------------------------------------------
# experiment plumbing
# ---------------------------------------------------------------------------


def load_domains(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.generator == "two_moons":
        source = make_two_moons(d.n, d.noise_sd, cfg.seed)
        target = rotate_domain(make_two_moons(d.n, d.noise_sd, cfg.seed + 10_000), d.angle_deg)
        return source, target
    if d.generator == "blobs":
        source, target = make_shifted_blobs(d.num_classes, d.n_per_class, d.shift, d.scale, cfg.seed)
        return standardize_with_source(source, target)
    if not d.source_csv or not d.target_csv:
        raise ConfigurationError("csv generator needs data.source_csv and data.target_csv")
    col = int(d.label_column) if d.label_column.lstrip("-").isdigit() else d.label_column
    source = load_csv_dataset(d.source_csv, col)
    target = load_csv_dataset(d.target_csv, col, domain_tag=TARGET)
    if source.dim != target.dim:
        raise ConfigurationError(f"source has {source.dim} features, target has {target.dim}")
    return source, target


def match_setup(cfg: ExperimentConfig, mode: str | None = None) -> MatchSetup:
    mc = cfg.matching
    return MatchSetup(mode or mc.mode, KernelSpec(mc.bandwidth, tuple(mc.multipliers)), mc.tau,
                      mc.pair_repr, mc.disc_lr)


def bundle_for(cfg: ExperimentConfig, in_dim: int, num_classes: int) -> ModelBundle:
    mc = cfg.model
    embed = mc.feature_hidden[-1]
    dim = feature_dim(cfg.matching.mode, embed, num_classes, cfg.matching.pair_repr)
    parts = cfg.matching.mode.split("+")
    init = mc.meta_init
    if init == "distance_prior" and "mmd" not in parts and "adv" not in parts:
        init = "zero_last"  # no distance inputs to anchor on
    # adversarial inputs are discriminator cross-entropies: larger means better matched
    sign = -1.0 if "adv" in parts else 1.0
    return build_bundle(in_dim, num_classes, dim, cfg.seed, tuple(mc.feature_hidden),
                        tuple(mc.meta_hidden), mc.disc_hidden, mc.hidden_activation,
                        meta_init=init, prior_sign=sign)


@dataclass
class MetricsRow:
    epoch: int
    step: int
    loss_cls: float
    loss_match: float
    loss_meta: float
    target_accuracy: float
    a_distance: float | None
    seed: int


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[MetricsRow]
    source: Dataset
    target: Dataset
    meta_history: list[MetaData] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    @property
    def target_accuracy(self) -> float:
        return self.metrics[-1].target_accuracy


class _Epochs:
    """Shared batch schedule for every trainer so identical seeds see identical batches."""

    def __init__(self, cfg: ExperimentConfig, source: Dataset, target: Dataset):
        self.cfg = cfg
        self.source, self.target = source, target
        bs = cfg.train.batch_size
        self.steps_per_epoch = math.ceil(source.n / bs)
        self.total_steps = self.steps_per_epoch * cfg.train.epochs

    def batches(self, epoch: int):
        bs = self.cfg.train.batch_size
        s_batches = batch_iterator(self.source, BatchPlan(bs, self.cfg.seed, False, epoch))
        t_batches = []
        t_epoch = epoch
        while len(t_batches) < len(s_batches):
            t_batches += batch_iterator(self.target, BatchPlan(bs, self.cfg.seed + 1, False, t_epoch))
            t_epoch += 100_003
        return list(zip(s_batches, t_batches[:len(s_batches)]))

    def schedules(self, k: int) -> tuple[float, float, float]:
        t = self.cfg.train
        eta = lr_schedule(k, t.eta0, t.gamma, t.upsilon)
        beta = lr_schedule(k, t.beta0, t.gamma, t.upsilon)
        if t.lambda_mode == "constant":
            lam = t.lambda_max
        else:
            lam = lambda_schedule(min(1.0, k / max(1, self.total_steps - 1)), t.lambda_max)
        return eta, beta, lam


def evaluate_losses(bundle: ModelBundle, source: Dataset, target: Dataset, setup: MatchSetup
                    ) -> tuple[float, float]:
    """Full-data (L_cls, L_match) at the current parameters, with no tape and no
    discriminator updates."""
    _, l_cls, l_match = composite_loss(bundle, source.features, source.labels, target.features, 0.0,
                                       setup, train_discriminators=False)
    return l_cls.item(), l_match.item()


def _final_a_distance(bundle: ModelBundle, source: Dataset, target: Dataset, seed: int) -> float | None:
    if source.n < 20 or target.n < 20:
        return None
    return proxy_a_distance(bundle.embed(source.features), bundle.embed(target.features), seed)


def _row(epoch, step, cls_vals, match_vals, meta_val, bundle, target, seed, a_dist=None) -> MetricsRow:
    acc = accuracy(bundle.predict(target.features), target.labels)
    return MetricsRow(epoch, step, float(np.mean(cls_vals)), float(np.mean(match_vals)),
                      float(meta_val), acc, a_dist, seed)


def train_l2m(cfg: ExperimentConfig, on_epoch: Callable[[MetricsRow, ModelBundle], None] | None = None,
              on_meta_step: Callable[[ModelBundle, ModelBundle], None] | None = None) -> TrainResult:
    """Full L2M loop. ``on_meta_step(assist, main)`` runs right after each meta update."""
    if cfg.train.method != "l2m":
        raise ConfigurationError(f"train_l2m called with method {cfg.train.method!r}")
    source, target = load_domains(cfg)
    bundle = bundle_for(cfg, source.dim, max(source.num_classes, target.num_classes))
    setup = match_setup(cfg)
    t = cfg.train
    clip = t.clip_norm or None
    plan = _Epochs(cfg, source, target)
    fresh_rng = np.random.default_rng([cfg.seed, 7])
    result = TrainResult(bundle, [], source, target)
    k = 0
    for epoch in range(t.epochs):
        cls_vals, match_vals, meta_val = [], [], 0.0
        batches = plan.batches(epoch)
        for b, (si, ti) in enumerate(batches):
            eta, beta, lam = plan.schedules(k)
            Xs, ys, Xt = source.features[si], source.labels[si], target.features[ti]
            meta_now = t.meta_enabled and (t.meta_every == "step" or b == len(batches) - 1)
            if not meta_now:
                lc, lm = main_update(bundle, Xs, ys, Xt, lam, eta, setup, clip, step=k)
            else:
                assist = clone_assist(bundle)
                lc, lm = main_update(assist, Xs, ys, Xt, lam, eta, setup, clip, step=k)
                meta = select_meta_data(bundle, target.features, t.m, t.tau)
                _check_meta(meta, t.m, t.tau, k)
                result.meta_history.append(meta)
                if not meta.empty:
                    fi = fresh_rng.choice(source.n, size=min(t.batch_size, source.n), replace=False)
                    meta_val = meta_update(bundle.meta_net, bundle, assist, source.features[fi],
                                           source.labels[fi], meta, beta, setup, t.meta_loss_sign,
                                           t.meta_weight_decay, step=k)
                    result.val_history.append(meta_val)
                if on_meta_step is not None:
                    on_meta_step(assist, bundle)
                if t.main_progression == "lookahead":
                    lc, lm = main_update(bundle, Xs, ys, Xt, lam, eta, setup, clip, step=k)
                else:
                    _adopt(bundle, assist)
            cls_vals.append(lc)
            match_vals.append(lm)
            k += 1
        last = epoch == t.epochs - 1
        a_dist = _final_a_distance(bundle, source, target, cfg.seed) if last else None
        row = _row(epoch, k, cls_vals, match_vals, meta_val, bundle, target, cfg.seed, a_dist)
        result.metrics.append(row)
        if on_epoch is not None:
            on_epoch(row, bundle)
    return result


def _check_meta(meta: MetaData, m: int, tau: float, step: int) -> None:
    if np.any(meta.per_class_counts > m) or np.any(meta.confidences < tau):
        raise dm.UsageError(f"meta-data invariant broken at step {step}: counts "
                            f"{meta.per_class_counts.tolist()}, min confidence {meta.confidences.min()}")


def _adopt(main: ModelBundle, assist: ModelBundle) -> None:
    """Copy phi and the discriminators from the assist; theta stays the main's (already updated)."""
    for (name, net), (_, src) in zip(main.named_networks(), assist.named_networks()):
        if name == "meta":
            continue
        for key, p in net.params.items():
            p.data = src.params[key].data.copy()


def baseline_loss(bundle: ModelBundle, Xs, ys, Xt, lam: float, kind: str, setup: MatchSetup
                  ) -> tuple[dm.Tensor, dm.Tensor, dm.Tensor]:
    emb_s = feature_forward(bundle.feature_extractor, Xs)
    logits_s = classify_forward(bundle.classifier, emb_s)
    l_cls = dm.softmax_cross_entropy(logits_s, ys)
    if kind == "source_only":
        return l_cls, l_cls, dm.Tensor(0.0)
    emb_t = feature_forward(bundle.feature_extractor, Xt)
    logits_t = classify_forward(bundle.classifier, emb_t)
    soft_t = dm.softmax(logits_t)
    probs_t = soft_t.data
    if kind == "mmd_align":
        pseudo = probs_t.argmax(axis=1)
        conf = probs_t[np.arange(len(pseudo)), pseudo]
        kern = setup.kernel.resolve(emb_s, emb_t)
        match = mmd2_biased(emb_s, emb_t, kern) + conditional_mmd(emb_s, ys, emb_t, pseudo, conf,
                                                                  kern, setup.tau).value
        return l_cls + lam * match, l_cls, match
    # adversarial: phi maximizes the discriminators' cross-entropy
    _, adv_m = adversarial_marginal(bundle.disc_marginal, emb_s, emb_t, setup.disc_lr)
    _, adv_c = adversarial_conditional(bundle.disc_conditional, emb_s, ys, emb_t, soft_t, setup.disc_lr)
    match = adv_m + adv_c
    return l_cls - lam * match, l_cls, match


def train_baseline(kind: str, cfg: ExperimentConfig,
                   on_epoch: Callable[[MetricsRow, ModelBundle], None] | None = None) -> TrainResult:
    if kind not in BASELINES:
        raise ConfigurationError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    source, target = load_domains(cfg)
    bundle = bundle_for(cfg, source.dim, max(source.num_classes, target.num_classes))
    setup = match_setup(cfg)
    clip = cfg.train.baseline_clip_norm or None
    plan = _Epochs(cfg, source, target)
    result = TrainResult(bundle, [], source, target)
    k = 0
    for epoch in range(cfg.train.epochs):
        cls_vals, match_vals = [], []
        for si, ti in plan.batches(epoch):
            eta, _, lam = plan.schedules(k)
            with Tape() as tape:
                total, l_cls, l_match = baseline_loss(bundle, source.features[si], source.labels[si],
                                                      target.features[ti], lam, kind, setup)
            _checked(total, "training loss", k)
            params = bundle.main_params()
            dm.zero_grad(params)
            dm.backward(tape, total)
            dm.sgd_step(params, eta, clip_norm=clip)
            cls_vals.append(l_cls.item())
            match_vals.append(l_match.item())
            k += 1
        last = epoch == cfg.train.epochs - 1
        a_dist = _final_a_distance(bundle, source, target, cfg.seed) if last else None
        row = _row(epoch, k, cls_vals, match_vals, 0.0, bundle, target, cfg.seed, a_dist)
        result.metrics.append(row)
        if on_epoch is not None:
            on_epoch(row, bundle)
    return result


def train(cfg: ExperimentConfig, **kwargs) -> TrainResult:
    if cfg.train.method == "l2m":
        return train_l2m(cfg, **kwargs)
    return train_baseline(cfg.train.method, cfg, on_epoch=kwargs.get("on_epoch"))

"""Finite-difference check of the two trained objectives for every matching mode.

For each mode a small random bundle is built and two gradients are compared
with central differences: the main objective (classification plus weighted
learned matching loss) with respect to the feature extractor and classifier,
and the meta validation loss with respect to the meta-network.

The kernel bandwidth is a fixed number here. With the median heuristic the
bandwidth is a detached function of the embeddings, which central differences
would see but backpropagation (by design) would not. The feature extractor
and meta-network use tanh units so no coordinate sits on a ReLU kink. Gradient
components below ``floor`` in magnitude are compared absolutely; the output
bias of the meta-network, for one, cancels exactly in the validation loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .l2m import MatchSetup, MetaData, composite_loss, validation_loss
from .matching import MODES, KernelSpec, feature_dim
from .models import build_bundle, clone_assist


@dataclass(frozen=True)
class GradReport:
    mode: str
    objective: str  # "main" | "meta"
    max_rel_error: float


def _problem(mode: str, seed: int, width: int, n: int, num_classes: int):
    rng = np.random.default_rng(seed)
    Xs = rng.normal(size=(n, 2))
    Xt = rng.normal(size=(n, 2)) + 0.5
    ys = np.arange(n) % num_classes
    dim = feature_dim(mode, width, num_classes)
    bundle = build_bundle(2, num_classes, dim, seed, feature_hidden=(width, width),
                          meta_hidden=(width, width), disc_hidden=width, hidden_activation="tanh",
                          meta_activation="tanh")
    setup = MatchSetup(mode, KernelSpec(1.0), tau=0.0)
    return bundle, setup, Xs, ys, Xt


def check_mode(mode: str, seed: int = 0, width: int = 8, n: int = 6, num_classes: int = 3,
               lam: float = 0.7, floor: float = 1e-6) -> list[GradReport]:
    if width > 16:
        raise dm.UsageError("gradient check networks are limited to width 16")
    bundle, setup, Xs, ys, Xt = _problem(mode, seed, width, n, num_classes)
    rng = np.random.default_rng([seed, 1])

    def main_loss():
        total, _, _ = composite_loss(bundle, Xs, ys, Xt, lam, setup, train_discriminators=False)
        return total

    main_err = dm.finite_difference_gradcheck(bundle.main_params(), main_loss, floor=floor)

    # a visibly different second snapshot keeps the loss well above rounding noise
    after = clone_assist(bundle)
    for p in after.main_params().values():
        p.data = p.data + rng.normal(scale=0.2, size=p.data.shape)
    probs = bundle.predict_proba(Xt)
    pseudo = probs.argmax(axis=1)
    idx = np.arange(n)
    counts = np.bincount(pseudo, minlength=num_classes)
    meta = MetaData(idx, Xt, pseudo, probs[idx, pseudo], counts)

    def meta_loss():
        return validation_loss(bundle.meta_net, bundle, after, Xs, ys, meta, setup)

    meta_err = dm.finite_difference_gradcheck(bundle.meta_net.params, meta_loss, floor=floor)
    return [GradReport(mode, "main", main_err), GradReport(mode, "meta", meta_err)]


def run_suite(seed: int = 0, modes=MODES, width: int = 8) -> list[GradReport]:
    reports = []
    for mode in modes:
        reports += check_mode(mode, seed=seed, width=width)
    return reports

"""The networks of the framework: feature extractor, classifier head,
meta-network and domain discriminators, all plain MLPs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import ParamSet, ShapeError, Tensor

_OUTPUT_ACTIVATIONS = ("none", "sigmoid", "relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "none"
    init_seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise dm.ConfigurationError(f"layer_dims must hold >= 2 positive sizes, got {dims}")
        if self.hidden_activation not in ("relu", "tanh"):
            raise dm.ConfigurationError(f"hidden activation {self.hidden_activation!r} unsupported")
        if self.output_activation not in _OUTPUT_ACTIVATIONS:
            raise dm.ConfigurationError(f"output activation {self.output_activation!r} unsupported")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class Mlp:
    spec: MlpSpec
    params: ParamSet

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)

    def copy(self) -> "Mlp":
        return Mlp(self.spec, ParamSet(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name))
            for k, v in self.params.items()))

    def frozen(self) -> "Mlp":
        """View with the same values but no trainable leaves (gradients stop here)."""
        return Mlp(self.spec, ParamSet(
            (k, Tensor(v.data, name=v.name)) for k, v in self.params.items()))


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def build_mlp(spec: MlpSpec) -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic in ``spec.init_seed``."""
    rng = np.random.default_rng(spec.init_seed)
    params = ParamSet()
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        bound = glorot_bound(fan_in, fan_out)
        params[f"W{i}"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=f"W{i}")
        params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"b{i}")
    return Mlp(spec, params)


def mlp_forward(net: Mlp, x, output: bool = True) -> Tensor:
    """Forward pass; ``output=False`` skips the output activation (returns pre-activations)."""
    h = dm.as_tensor(x)
    n_layers = len(net.spec.layer_dims) - 1
    if h.data.ndim != 2 or h.shape[1] != net.spec.in_dim:
        raise ShapeError(f"network expects input [batch, {net.spec.in_dim}], got {h.shape}")
    for i in range(n_layers):
        h = dm.linear_forward(h, net.params[f"W{i}"], net.params[f"b{i}"])
        if i < n_layers - 1:
            h = dm.activation(h, net.spec.hidden_activation)
    if output and net.spec.output_activation != "none":
        h = dm.activation(h, net.spec.output_activation)
    return h


def feature_forward(f_phi: Mlp, x) -> Tensor:
    return mlp_forward(f_phi, x)


def classify_forward(G_y: Mlp, emb) -> Tensor:
    return mlp_forward(G_y, emb)


def meta_forward(g_theta: Mlp, F) -> Tensor:
    """Scalar learned matching loss: mean over feature rows of the meta-network output."""
    F = dm.as_tensor(F)
    if F.data.ndim != 2 or F.shape[1] != g_theta.spec.in_dim:
        raise ShapeError(f"meta-network expects matching features of dim {g_theta.spec.in_dim}, got {F.shape}")
    return dm.mean(mlp_forward(g_theta, F))


def discriminator_logits(G_d: Mlp, emb) -> Tensor:
    """Pre-sigmoid domain scores as a column of shape [batch, 1]."""
    return mlp_forward(G_d, emb, output=False)


def discriminator_forward(G_d: Mlp, emb) -> np.ndarray:
    """Probability that each row comes from the source domain."""
    return mlp_forward(G_d, emb).data.reshape(-1)


@dataclass
class ModelBundle:
    feature_extractor: Mlp
    classifier: Mlp
    meta_net: Mlp
    disc_marginal: Mlp
    disc_conditional: list[Mlp] = field(default_factory=list)

    def __post_init__(self):
        d = self.feature_extractor.spec.out_dim
        if self.classifier.spec.in_dim != d:
            raise ShapeError(f"classifier input {self.classifier.spec.in_dim} != embedding dim {d}")

    @property
    def num_classes(self) -> int:
        return self.classifier.spec.out_dim

    @property
    def embed_dim(self) -> int:
        return self.feature_extractor.spec.out_dim

    def main_params(self) -> ParamSet:
        """phi: feature extractor plus classifier head."""
        out = ParamSet()
        for prefix, net in (("feature", self.feature_extractor), ("classifier", self.classifier)):
            for k, v in net.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def named_networks(self) -> list[tuple[str, Mlp]]:
        nets = [("feature", self.feature_extractor), ("classifier", self.classifier),
                ("meta", self.meta_net), ("disc_marginal", self.disc_marginal)]
        nets += [(f"disc_conditional.{c}", net) for c, net in enumerate(self.disc_conditional)]
        return nets

    def all_params(self) -> ParamSet:
        out = ParamSet()
        for prefix, net in self.named_networks():
            for k, v in net.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def predict_proba(self, x) -> np.ndarray:
        logits = classify_forward(self.classifier, feature_forward(self.feature_extractor, x))
        return dm.softmax(logits).data

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    def embed(self, x) -> np.ndarray:
        return feature_forward(self.feature_extractor, x).data


def install_distance_prior(meta: Mlp, sign: float = 1.0) -> None:
    """Route the last two inputs (non-negative distances) through hidden units 0
    and 1 unchanged so that g(F) = sign * (F[:, -2] + F[:, -1]) exactly, given a
    zero last layer. Every other weight keeps its value, so learning can move
    away from the prior."""
    spec = meta.spec
    n_layers = len(spec.layer_dims) - 1
    if spec.in_dim < 2 or min(spec.layer_dims[1:-1], default=2) < 2 or spec.hidden_activation != "relu":
        raise dm.ConfigurationError("distance prior needs >= 2 inputs, hidden widths >= 2 and relu units")
    for i in range(n_layers):
        W = meta.params[f"W{i}"].data.copy()
        b = meta.params[f"b{i}"].data.copy()
        if i == n_layers - 1:
            W[:, :] = 0.0
            W[0, 0] = W[1, 0] = sign
            b[:] = 0.0
        else:
            src = (spec.in_dim - 2, spec.in_dim - 1) if i == 0 else (0, 1)
            W[:, 0:2] = 0.0
            W[src[0], 0] = W[src[1], 1] = 1.0
            b[0:2] = 0.0
        meta.params[f"W{i}"].data, meta.params[f"b{i}"].data = W, b


def clone_assist(bundle: ModelBundle) -> ModelBundle:
    """Deep copy whose parameters share no storage or Tensor objects with ``bundle``."""
    return ModelBundle(
        bundle.feature_extractor.copy(),
        bundle.classifier.copy(),
        bundle.meta_net.copy(),
        bundle.disc_marginal.copy(),
        [net.copy() for net in bundle.disc_conditional],
    )


def build_bundle(in_dim: int, num_classes: int, match_dim: int, seed: int,
                 feature_hidden: tuple[int, ...] = (64, 64), meta_hidden: tuple[int, ...] = (64, 64),
                 disc_hidden: int = 32, hidden_activation: str = "relu",
                 meta_init: str = "glorot", prior_sign: float = 1.0,
                 meta_activation: str = "relu") -> ModelBundle:
    """Desk-scale defaults: in->64->64 features, 64->C head, dim->64->64->1 meta-net, d->32->1 discriminators.

    ``meta_init``: "glorot"; "zero_last" (g starts identically zero); or
    "distance_prior" (g starts as ``prior_sign`` times the sum of the two
    trailing distance inputs, see :func:`install_distance_prior`).
    """
    seeds = np.random.SeedSequence(seed).generate_state(4 + num_classes)
    feat = build_mlp(MlpSpec((in_dim, *feature_hidden), hidden_activation, hidden_activation, int(seeds[0])))
    d = feat.spec.out_dim
    cls = build_mlp(MlpSpec((d, num_classes), hidden_activation, "none", int(seeds[1])))
    meta = build_mlp(MlpSpec((match_dim, *meta_hidden, 1), meta_activation, "none", int(seeds[2])))
    if meta_init not in ("glorot", "zero_last", "distance_prior"):
        raise dm.ConfigurationError(f"unknown meta_init {meta_init!r}")
    if meta_init != "glorot":
        last = len(meta.spec.layer_dims) - 2
        meta.params[f"W{last}"].data = np.zeros_like(meta.params[f"W{last}"].data)
    if meta_init == "distance_prior":
        install_distance_prior(meta, prior_sign)
    disc = build_mlp(MlpSpec((d, disc_hidden, 1), "relu", "sigmoid", int(seeds[3])))
    conds = [build_mlp(MlpSpec((d, disc_hidden, 1), "relu", "sigmoid", int(seeds[4 + c])))
             for c in range(num_classes)]
    return ModelBundle(feat, cls, meta, disc, conds)

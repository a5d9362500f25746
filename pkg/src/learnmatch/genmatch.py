"""Generator trained by distribution matching on a 2D ring of Gaussians.

``loss_mode="mmd"`` is the moment-matching baseline: the generator minimizes
the multi-bandwidth MMD between its samples and a real batch.
``loss_mode="l2m"`` replaces that loss by the learned meta-network loss and
runs the assist/meta/look-ahead loop on generator parameters, with held-out
real samples in the role of the meta-data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffmath as dm
from .diffmath import ConfigurationError, NumericError, Tape, Tensor
from .matching import KernelSpec, build_matching_features, feature_dim, mmd2_biased
from .models import Mlp, MlpSpec, build_mlp, install_distance_prior, mlp_forward

LOSS_MODES = ("mmd", "l2m")


@dataclass(frozen=True)
class GenSpec:
    prior_dim: int = 4
    hidden: tuple[int, ...] = (64, 64)
    modes: int = 8
    radius: float = 2.0
    sd: float = 0.1
    loss_mode: str = "mmd"
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1.0
    beta: float = 1e-4
    bandwidth: float = 0.5
    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    match_mode: str = "emb+mmd"  # emb | emb+mmd
    meta_hidden: tuple[int, ...] = (32, 32)
    meta_every: int = 5
    log_every: int = 50
    eval_size: int = 512
    data_size: int = 4096
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.prior_dim < 1:
            raise ConfigurationError(f"prior_dim must be >= 1, got {self.prior_dim}")
        if self.modes < 2:
            raise ConfigurationError(f"need at least 2 modes, got {self.modes}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.match_mode not in ("emb", "emb+mmd"):
            raise ConfigurationError(f"generator matching mode must be 'emb' or 'emb+mmd', got {self.match_mode!r}")
        if self.steps < 1 or self.batch_size < 2 or self.meta_every < 1 or self.log_every < 1:
            raise ConfigurationError("steps, meta_every and log_every must be >= 1, batch_size >= 2")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.bandwidth, self.multipliers)


def sample_prior(n: int, H: int, seed) -> np.ndarray:
    """i.i.d. uniform entries in [-1, 1]."""
    if n < 1 or H < 1:
        raise dm.UsageError(f"prior sample needs n >= 1 and H >= 1, got n={n}, H={H}")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, H))


def ring_centers(modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def ring_dataset(n: int, modes: int = 8, radius: float = 2.0, sd: float = 0.1, seed=0
                 ) -> tuple[np.ndarray, np.ndarray]:
    """``n`` points around equally spaced centers; each mode gets n//modes or one more."""
    if modes < 2 or n < 0:
        raise dm.UsageError(f"ring needs modes >= 2 and n >= 0, got modes={modes}, n={n}")
    rng = np.random.default_rng(seed)
    assign = rng.permutation(np.arange(n) % modes)
    X = ring_centers(modes, radius)[assign] + sd * rng.normal(size=(n, 2))
    return X, assign


def mode_coverage(samples, centers, sd: float, min_fraction: float = 0.02) -> int:
    """Modes holding at least ``min_fraction`` of the samples within 3 sd of their center."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise dm.UsageError("mode_coverage needs at least one center")
    S = np.asarray(samples, dtype=np.float64).reshape(-1, centers.shape[1])
    if S.shape[0] == 0:
        return 0
    d2 = ((S[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    hits = (d2 <= (3.0 * sd) ** 2).sum(axis=0)
    return int(np.sum(hits >= min_fraction * S.shape[0]))


@dataclass
class GenMetricsRow:
    step: int
    loss: float
    mmd2_to_data: float


@dataclass
class GenResult:
    spec: GenSpec
    generator: Mlp
    meta_net: Mlp | None
    metrics: list[GenMetricsRow] = field(default_factory=list)

    def sample(self, n: int, seed=None) -> np.ndarray:
        seed = [self.spec.seed, 99] if seed is None else seed
        return mlp_forward(self.generator, sample_prior(n, self.spec.prior_dim, seed)).data

    @property
    def final_mmd2(self) -> float:
        return self.metrics[-1].mmd2_to_data

    def coverage(self, n: int = 2000) -> int:
        s = self.spec
        return mode_coverage(self.sample(n), ring_centers(s.modes, s.radius), s.sd)


def build_generator(spec: GenSpec) -> Mlp:
    seed = int(np.random.SeedSequence([spec.seed, 1]).generate_state(1)[0])
    return build_mlp(MlpSpec((spec.prior_dim, *spec.hidden, 2), "relu", "none", seed))


def _meta_net(spec: GenSpec) -> Mlp:
    seed = int(np.random.SeedSequence([spec.seed, 2]).generate_state(1)[0])
    dim = feature_dim(spec.match_mode, 2, 1)
    net = build_mlp(MlpSpec((dim, *spec.meta_hidden, 1), "relu", "none", seed))
    last = len(net.spec.layer_dims) - 2
    net.params[f"W{last}"].data = np.zeros_like(net.params[f"W{last}"].data)
    if spec.match_mode == "emb+mmd":
        install_distance_prior(net, 1.0)
    return net


def _features(spec: GenSpec, fake: Tensor, real, kernel: KernelSpec, mmd_fn) -> Tensor:
    # one class: the conditional distance coincides with the marginal one
    d_m = d_c = None
    if spec.match_mode == "emb+mmd":
        d_m = mmd_fn(fake, real, kernel)
        d_c = d_m
    return build_matching_features(spec.match_mode, emb_s=fake, emb_t=real, d_m=d_m, d_c=d_c).rows


def _learned_loss(spec, gen: Mlp, meta: Mlp, z, real, kernel, mmd_fn) -> Tensor:
    return dm.mean(mlp_forward(meta, _features(spec, mlp_forward(gen, z), real, kernel, mmd_fn)))


def _check(v: Tensor, step: int) -> None:
    if not np.all(np.isfinite(v.data)):
        raise NumericError(f"generator loss is not finite at step {step}")


def _sgd(net: Mlp, loss: Tensor, tape: Tape, lr: float, clip: float | None) -> None:
    dm.zero_grad(net.params)
    dm.backward(tape, loss)
    dm.sgd_step(net.params, lr, clip_norm=clip)


def train_generator(spec: GenSpec, generator: Mlp | None = None,
                    mmd_fn: Callable[[Tensor, Tensor, KernelSpec], Tensor] = mmd2_biased) -> GenResult:
    """Train a generator on the ring. ``generator`` overrides the initial network;
    ``mmd_fn`` is the MMD implementation used for every distance (injectable
    for instrumentation).

    Row ``step`` of the metrics holds that step's training loss and the
    MMD-to-data before its update; a last row (step = ``spec.steps``) holds the
    final MMD-to-data.
    """
    gen = generator if generator is not None else build_generator(spec)
    kernel = spec.kernel
    clip = spec.clip_norm or None
    data, _ = ring_dataset(spec.data_size, spec.modes, spec.radius, spec.sd, [spec.seed, 3])
    held, _ = ring_dataset(spec.data_size, spec.modes, spec.radius, spec.sd, [spec.seed, 4])
    eval_real, _ = ring_dataset(spec.eval_size, spec.modes, spec.radius, spec.sd, [spec.seed, 5])
    eval_z = sample_prior(spec.eval_size, spec.prior_dim, [spec.seed, 6])
    rng = np.random.default_rng([spec.seed, 7])
    meta = _meta_net(spec) if spec.loss_mode == "l2m" else None
    result = GenResult(spec, gen, meta)

    def mmd_to_data() -> float:
        return float(mmd_fn(mlp_forward(gen, eval_z).data, eval_real, kernel).item())

    for step in range(spec.steps):
        # MMD-to-data is measured before this step's update
        logged = mmd_to_data() if step % spec.log_every == 0 else None
        z = rng.uniform(-1.0, 1.0, size=(spec.batch_size, spec.prior_dim))
        real = data[rng.choice(data.shape[0], spec.batch_size, replace=False)]
        if spec.loss_mode == "mmd":
            with Tape() as tape:
                loss = mmd_fn(mlp_forward(gen, z), real, kernel)
            _check(loss, step)
            _sgd(gen, loss, tape, spec.lr, clip)
        else:
            frozen_meta = meta.frozen()
            if step % spec.meta_every == 0:
                # assist step, meta step on held-out real samples, then look-ahead re-step
                assist = gen.copy()
                with Tape() as tape:
                    a_loss = _learned_loss(spec, assist, frozen_meta, z, real, kernel, mmd_fn)
                _check(a_loss, step)
                _sgd(assist, a_loss, tape, spec.lr, clip)
                z_meta = rng.uniform(-1.0, 1.0, size=(spec.batch_size, spec.prior_dim))
                real_meta = held[rng.choice(held.shape[0], spec.batch_size, replace=False)]
                before = mlp_forward(gen.frozen(), z_meta)
                after = mlp_forward(assist.frozen(), z_meta)
                k_before = kernel.resolve(before, real_meta)
                with Tape() as tape:
                    g_b = mlp_forward(meta, _features(spec, before, real_meta, k_before, mmd_fn))
                    g_a = mlp_forward(meta, _features(spec, after, real_meta, k_before, mmd_fn))
                    l_val = dm.mean(dm.tanh(g_b - g_a))
                _check(l_val, step)
                _sgd(meta, l_val, tape, spec.beta, None)
                frozen_meta = meta.frozen()
            with Tape() as tape:
                loss = _learned_loss(spec, gen, frozen_meta, z, real, kernel, mmd_fn)
            _check(loss, step)
            _sgd(gen, loss, tape, spec.lr, clip)
        if logged is not None:
            result.metrics.append(GenMetricsRow(step, loss.item(), logged))
    result.metrics.append(GenMetricsRow(spec.steps, loss.item(), mmd_to_data()))
    return result


def write_samples_csv(samples: np.ndarray, path) -> None:
    lines = ["x,y"] + [f"{float(a)!r},{float(b)!r}" for a, b in np.asarray(samples)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_gen_metrics_csv(rows: list[GenMetricsRow], path) -> None:
    lines = ["step,loss,mmd2_to_data"] + [f"{r.step},{r.loss:.9g},{r.mmd2_to_data:.9g}" for r in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


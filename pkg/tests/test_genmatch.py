import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from learnmatch import diffmath as dm
from learnmatch.genmatch import (GenSpec, build_generator, mode_coverage, ring_centers, ring_dataset, sample_prior,
                                 train_generator, write_gen_metrics_csv, write_samples_csv)
from learnmatch.matching import mmd2_biased


def test_prior_bounds_and_seed():
    Z = sample_prior(1000, 3, 5)
    assert Z.shape == (1000, 3) and Z.min() >= -1.0 and Z.max() <= 1.0
    assert np.array_equal(Z, sample_prior(1000, 3, 5))


def test_prior_mean_concentrates():
    assert np.all(np.abs(sample_prior(100_000, 4, 0).mean(axis=0)) <= 0.02)


def test_ring_without_noise_sits_on_centers():
    X, assign = ring_dataset(40, 8, 2.0, 0.0, 1)
    assert np.array_equal(X, ring_centers(8, 2.0)[assign])
    assert np.allclose(np.linalg.norm(X, axis=1), 2.0, atol=1e-12)


@pytest.mark.parametrize("modes,radius", [(2, 1.0), (8, 2.0), (13, 0.5)])
def test_ring_center_spacing(modes, radius):
    C = ring_centers(modes, radius)
    d = np.linalg.norm(C[:, None] - C[None], axis=2)[~np.eye(modes, dtype=bool)]
    assert d.min() >= 2 * radius * np.sin(np.pi / modes) - 1e-12


@given(n=st.integers(0, 200), modes=st.integers(2, 12), seed=st.integers(0, 99))
def test_ring_is_balanced(n, modes, seed):
    _, assign = ring_dataset(n, modes, 1.0, 0.1, seed)
    counts = np.bincount(assign, minlength=modes)
    assert counts.max() - counts.min() <= 1 and counts.sum() == n


def test_coverage_examples():
    C = ring_centers(8, 2.0)
    assert mode_coverage(np.repeat(C, 10, axis=0), C, 0.1) == 8
    assert mode_coverage(np.repeat(C[:1], 50, axis=0), C, 0.1) == 1
    assert mode_coverage(np.zeros((0, 2)), C, 0.1) == 0


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6))
def test_coverage_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    C = ring_centers(8, 2.0)
    S = C[rng.integers(0, 8, size=60)] + rng.normal(0, 0.2, size=(60, 2))
    base = mode_coverage(S, C, 0.1)
    assert mode_coverage(S[rng.permutation(60)], C[rng.permutation(8)], 0.1) == base


def test_spec_validation():
    with pytest.raises(dm.ConfigurationError):
        GenSpec(prior_dim=0)
    with pytest.raises(dm.ConfigurationError):
        GenSpec(modes=1)
    with pytest.raises(dm.ConfigurationError):
        GenSpec(loss_mode="gan")


def test_constant_generator_first_logged_mmd():
    spec = GenSpec(steps=1, eval_size=64, seed=2)
    gen = build_generator(spec)
    for p in gen.params.values():
        p.data = np.zeros_like(p.data)
    gen.params["b2"].data = np.array([0.3, -0.4])
    res = train_generator(spec, generator=gen)
    real, _ = ring_dataset(64, spec.modes, spec.radius, spec.sd, [2, 5])
    expected = mmd2_biased(np.tile([0.3, -0.4], (64, 1)), real, spec.kernel).item()
    assert res.metrics[0].step == 0 and res.metrics[0].mmd2_to_data == expected


@pytest.mark.parametrize("loss_mode", ["mmd", "l2m"])
def test_every_distance_goes_through_the_injected_mmd(loss_mode):
    calls = []

    def counting(X, Y, spec):
        calls.append(1)
        return mmd2_biased(X, Y, spec)

    spec = GenSpec(loss_mode=loss_mode, steps=6, batch_size=32, eval_size=32, log_every=3, meta_every=2)
    res = train_generator(spec, mmd_fn=counting)
    plain = train_generator(spec)
    assert len(calls) > 0 and res.final_mmd2 == plain.final_mmd2
    logs = len(res.metrics)  # one distance per log, per step, and three per meta step (assist, before, after)
    assert len(calls) == (logs + 6 if loss_mode == "mmd" else logs + 6 + 3 * 3)


def test_generator_run_is_deterministic():
    spec = GenSpec(loss_mode="l2m", steps=10, batch_size=32, eval_size=32, log_every=5, meta_every=2)
    a, b = train_generator(spec), train_generator(spec)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.generator.params[k].data, b.generator.params[k].data) for k in a.generator.params)


def test_csv_writers(tmp_path):
    spec = GenSpec(steps=4, batch_size=16, eval_size=16, log_every=2)
    res = train_generator(spec)
    write_samples_csv(res.sample(5), tmp_path / "s.csv")
    write_gen_metrics_csv(res.metrics, tmp_path / "m.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x,y"
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 6
    assert [int(line.split(",")[0]) for line in (tmp_path / "m.csv").read_text().splitlines()[1:]] == [0, 2, 4]


def test_mmd_training_reduces_mmd_tenfold():
    res = train_generator(GenSpec(loss_mode="mmd", steps=2000, seed=0))
    assert res.final_mmd2 < res.metrics[0].mmd2_to_data / 10

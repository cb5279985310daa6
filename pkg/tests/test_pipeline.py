import json
from dataclasses import replace

import numpy as np
import pytest

from travag.dp_optimizer import DpSgdConfig, RngStream, dp_sgd_step
from travag.errors import PrivacyError, TravagError
from travag.eventlog import SimpleEventLog, fit_vocabulary, one_hot_encode
from travag.neuralnet import batch_gradient, forward, init_network, loss_value, mlp_specs
from travag.pipeline import (
    TrainedBundle,
    TravagConfig,
    audit_ledger,
    build_autoencoder,
    generate,
    generator_gradient,
    grid_search,
    run_travag,
    train_autoencoder,
    train_gan,
)

SMALL = dict(encoder_hidden=(16,), decoder_hidden=(16,), generator_hidden=(16,), discriminator_hidden=(16,))


def dp(**kw):
    base = dict(clip_norm=1.0, noise_multiplier=0.0, sampling_rate=0.2, learning_rate=1.0, iterations=100)
    return DpSgdConfig(**{**base, **kw})


def small_cfg(ae=None, ds=None, **kw):
    return TravagConfig(autoencoder=ae or dp(), discriminator=ds or dp(learning_rate=0.2), **{**SMALL, **kw})


@pytest.fixture
def three_variants():
    return SimpleEventLog({("a", "b"): 50, ("a", "c"): 50, ("b",): 50})


@pytest.fixture
def trained(toy_log):
    return run_travag(toy_log, small_cfg(seed=3))


# ---------------------------------------------------------------------------
# training phases


def test_autoencoder_reconstructs_noise_free(three_variants):
    matrix = one_hot_encode(three_variants, fit_vocabulary(three_variants))
    encoder, decoder, spend = train_autoencoder(matrix, small_cfg(ae=dp(iterations=2000)), RngStream(0))
    x = matrix.to_dense()
    accuracy = (forward(decoder, forward(encoder, x)).argmax(axis=1) == x.argmax(axis=1)).mean()
    assert accuracy >= 0.99
    assert spend.iterations == 2000 and spend.phi == 0


def test_empty_batches_still_count(three_variants):
    matrix = one_hot_encode(three_variants, fit_vocabulary(three_variants))
    cfg = small_cfg(ae=dp(sampling_rate=1e-12, iterations=50))
    encoder, decoder, spend = train_autoencoder(matrix, cfg, RngStream(4))
    assert spend.iterations == 50
    # no batch was ever drawn, so the networks are still at their initial values
    fresh_enc, fresh_dec = build_autoencoder(3, cfg, RngStream(4))
    assert encoder == fresh_enc and decoder == fresh_dec


def test_gan_leaves_decoder_untouched(three_variants):
    matrix = one_hot_encode(three_variants, fit_vocabulary(three_variants))
    cfg = small_cfg(ds=dp(noise_multiplier=1.0, iterations=30))
    _, decoder, _ = train_autoencoder(matrix, cfg, RngStream(1))
    frozen = decoder.copy()
    _, _, spend = train_gan(matrix, decoder, cfg, RngStream(2))
    assert decoder == frozen
    assert spend.iterations == 30 and spend.phi == 1.0


def test_generator_gradient_matches_numeric_and_is_pure():
    rng = np.random.default_rng(0)
    gen = init_network(mlp_specs([4, 6, 3], ["relu", "identity"]), 1)
    dec = init_network(mlp_specs([3, 5, 4], ["relu", "sigmoid"]), 2)
    dis = init_network(mlp_specs([4, 5, 1], ["relu", "sigmoid"]), 3)
    z = rng.normal(size=(7, 4))
    snapshot = (gen.copy(), dec.copy(), dis.copy())
    grad, loss = generator_gradient(gen, dec, dis, z)
    assert (gen, dec, dis) == snapshot

    def objective(theta):
        probe = gen.copy()
        probe.set_flat(theta)
        return loss_value("bce", forward(dis, forward(dec, forward(probe, z))), 1.0)

    theta, h = gen.get_flat(), 1e-6
    numeric = np.array([(objective(theta + h * e) - objective(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    assert loss == pytest.approx(objective(theta), rel=1e-9)
    assert np.allclose(grad.values, numeric, atol=1e-7)


def test_noise_free_gan_matches_textbook_loop(three_variants):
    """Phi=0, q=1: the DP path must reduce to plain alternating GAN updates."""
    matrix = one_hot_encode(three_variants, fit_vocabulary(three_variants))
    x = matrix.to_dense()
    m = x.shape[0]
    cfg = small_cfg(ds=dp(clip_norm=1e9, sampling_rate=1.0, learning_rate=0.3, iterations=20), noise_dim=4)
    decoder = init_network(mlp_specs([3, 6, 3], ["relu", "sigmoid"]), 8)
    generator, discriminator, _ = train_gan(matrix, decoder, cfg, RngStream(21))

    # oracle: same draws in the same order, textbook updates
    rng = RngStream(21)
    gen = init_network(mlp_specs([4, 16, 3], ["relu", "identity"]), rng.seed_int())
    dis = init_network(mlp_specs([3, 16, 1], ["relu", "sigmoid"]), rng.seed_int())
    lr_g, b1, b2, eps = cfg.generator_learning_rate, 0.9, 0.999, 1e-8
    mom, vel = np.zeros(gen.parameter_count()), np.zeros(gen.parameter_count())
    for t in range(1, 21):
        assert rng.bernoulli(m, 1.0).all()
        fake = forward(decoder, forward(gen, rng.gaussian((m, 4))))
        grad_d = batch_gradient(dis, x, 1.0, "bce").values + batch_gradient(dis, fake, 0.0, "bce").values
        rng.gaussian(dis.parameter_count())  # the zero-scaled noise draw
        dis.set_flat(dis.get_flat() - 0.3 * grad_d)
        g, _ = generator_gradient(gen, decoder, dis, rng.gaussian((m, 4)))
        mom = b1 * mom + (1 - b1) * g.values
        vel = b2 * vel + (1 - b2) * g.values**2
        gen.set_flat(gen.get_flat() - lr_g * (mom / (1 - b1**t)) / (np.sqrt(vel / (1 - b2**t)) + eps))
    assert np.allclose(discriminator.get_flat(), dis.get_flat(), rtol=0, atol=1e-12)
    assert np.allclose(generator.get_flat(), gen.get_flat(), rtol=0, atol=1e-12)


def test_discriminator_separates_clusters():
    # real rows are variant 0, fake rows variant 1; noise-free DP-SGD plus public fake gradient
    dis = init_network(mlp_specs([2, 8, 1], ["relu", "sigmoid"]), 5)
    real, fake = np.tile([1.0, 0.0], (20, 1)), np.tile([0.0, 1.0], (20, 1))
    cfg, rng = dp(sampling_rate=1.0, learning_rate=0.5, iterations=1), RngStream(0)
    for _ in range(500):
        dp_sgd_step(dis, None, real, 1.0, "bce", cfg, rng, public_gradient=batch_gradient(dis, fake, 0.0, "bce"))
    bce = loss_value("bce", forward(dis, real), 1.0) + loss_value("bce", forward(dis, fake), 0.0)
    assert bce / 2 < 0.2


# ---------------------------------------------------------------------------
# end to end


def test_run_is_deterministic(toy_log):
    cfg = small_cfg(seed=11, ds=dp(noise_multiplier=0.5, learning_rate=0.2))
    (r1, b1), (r2, b2) = run_travag(toy_log, cfg), run_travag(toy_log, cfg)
    assert r1.log == r2.log
    for name in ("encoder", "decoder", "generator", "discriminator"):
        assert getattr(b1, name) == getattr(b2, name)


def test_output_size_and_vocabulary(trained, toy_log):
    report, bundle = trained
    assert report.samples == toy_log.num_cases == report.log.num_cases
    assert set(report.log) <= set(toy_log)
    assert generate(bundle, 250, seed=1).log.num_cases == 250
    assert run_travag(toy_log, small_cfg(generation_count=17))[0].log.num_cases == 17
    with pytest.raises(ValueError):
        generate(bundle, 0)


def test_bundle_round_trip(trained, tmp_path):
    _, bundle = trained
    bundle.save(tmp_path / "b")
    again = TrainedBundle.load(tmp_path / "b")
    for name in ("encoder", "decoder", "generator", "discriminator", "vocabulary"):
        assert getattr(again, name) == getattr(bundle, name)
    assert generate(again, 40, seed=9).log == generate(bundle, 40, seed=9).log


def test_corrupt_bundle_raises(trained, tmp_path):
    _, bundle = trained
    bundle.save(tmp_path / "b")
    (tmp_path / "b" / "generator.json").unlink()
    with pytest.raises(TravagError):
        TrainedBundle.load(tmp_path / "b")
    bundle.save(tmp_path / "c")
    (tmp_path / "c" / "ledger.json").write_text("{not json")
    with pytest.raises(TravagError):
        TrainedBundle.load(tmp_path / "c")
    with pytest.raises(TravagError):
        TrainedBundle.load(tmp_path / "missing")


# ---------------------------------------------------------------------------
# privacy targets


def test_budget_split_is_even_by_default():
    cfg = small_cfg(target_epsilon=2.0, target_delta=1e-5)
    (e1, d1), (e2, d2) = cfg.mechanism_budgets()
    assert (e1, e2) == (1.0, 1.0) and d1 == d2 == 5e-6


def test_insufficient_noise_is_refused_before_training(toy_log):
    cfg = small_cfg(ae=dp(noise_multiplier=0.5), ds=dp(noise_multiplier=0.5), target_epsilon=0.1, target_delta=1e-5)
    with pytest.raises(PrivacyError):
        run_travag(toy_log, cfg)
    with pytest.raises(PrivacyError):
        run_travag(toy_log, replace(cfg, autoencoder=dp()))


def test_calibrated_run_meets_target_and_audits(toy_log, tmp_path):
    cfg = small_cfg(target_epsilon=3.0, target_delta=1e-5, calibrate=True)
    _, bundle = run_travag(toy_log, cfg)
    assert bundle.guarantee.epsilon <= 3.0 and bundle.guarantee.delta <= 1e-5 * (1 + 1e-12)
    ledger = bundle.ledger()
    assert audit_ledger(ledger)
    tampered = json.loads(json.dumps(ledger))
    tampered["mechanisms"]["discriminator"]["phi"] *= 1.01
    assert not audit_ledger(tampered)


def test_config_validation():
    for bad in (
        dict(latent_dim=0),
        dict(noise_dim=0),
        dict(budget_split=1.0),
        dict(generation_count=0),
        dict(target_epsilon=-1.0),
        dict(target_delta=1.5),
        dict(calibrate=True),
    ):
        with pytest.raises(ValueError):
            small_cfg(**bad)
    with pytest.raises(ValueError):
        small_cfg(latent_dim=5).resolved_latent_dim(3)
    assert small_cfg().resolved_latent_dim(100) == 32


# ---------------------------------------------------------------------------
# grid search


def grid_base(**kw):
    return small_cfg(
        ae=dp(iterations=300), ds=dp(learning_rate=0.2, iterations=300), target_epsilon=1e6, target_delta=1e-5, **kw
    )


def test_grid_single_point_and_exclusion(toy_log):
    result = grid_search(toy_log, grid_base(), [0.5], [50], [1.0], trials=1)
    assert len(result.points) == 1 and result.best_point.admissible
    assert result.best.autoencoder.noise_multiplier == 1.0

    tight = replace(grid_base(), target_epsilon=2.0)
    result = grid_search(toy_log, tight, [0.5], [50], [0.5, 20.0], trials=1)
    excluded, kept = result.points
    assert not excluded.admissible and excluded.error and excluded.similarities == []
    assert kept.admissible and result.best_point is kept
    with pytest.raises(PrivacyError):
        grid_search(toy_log, tight, [0.5], [50], [0.5], trials=1)


def test_grid_prefers_useful_noise():
    log = SimpleEventLog({("a", "b"): 40, ("a", "c"): 8, ("b",): 2})
    result = grid_search(log, grid_base(), [0.5], [300], [0.7, 50.0], trials=5)
    low, high = result.points
    assert len(low.similarities) == len(high.similarities) == 5
    assert low.mean_similarity > high.mean_similarity
    assert result.best_point.noise_multiplier == 0.7

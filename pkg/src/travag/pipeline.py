"""End-to-end synthesizer: private autoencoder, private GAN, generation.

Training runs in two strictly sequential phases.

* Autoencoder. The encoder maps one-hot rows into a latent space and the
  decoder maps back. Only the decoder is released, so only the decoder is
  trained with DP-SGD; the encoder takes clean gradients from the same batch.
* GAN. A generator produces latent codes, the frozen decoder lifts them to
  variant space, and a discriminator compares them with real rows. The
  discriminator sees private data and is trained with DP-SGD; the generator
  only sees the discriminator's verdicts and is trained with Adam.

Generation decodes ``dec(gen(z))`` by argmax over the variant columns, so
every synthetic case is one of the original variants.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from travag.accountant import (
    DpGuarantee,
    MechanismSpend,
    account_dpsgd,
    calibrate_phi,
    combine_mechanisms,
)
from travag.dp_optimizer import Adam, DpSgdConfig, RngStream, dp_sgd_step, poisson_sample
from travag.errors import DivergenceError, NumericalError, PrivacyError, TravagError
from travag.eventlog import (
    BinaryMatrix,
    SimpleEventLog,
    VariantVocabulary,
    fit_vocabulary,
    one_hot_decode,
    one_hot_encode,
)
from travag.metrics import absolute_log_difference, relative_log_similarity
from travag.neuralnet import (
    GradientVector,
    Network,
    backward,
    batch_gradient,
    forward,
    forward_cached,
    init_network,
    loss_delta,
    mlp_specs,
)

logger = logging.getLogger(__name__)

LEDGER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TravagConfig:
    autoencoder: DpSgdConfig
    discriminator: DpSgdConfig
    latent_dim: Optional[int] = None  # None: min(32, n)
    noise_dim: int = 16
    encoder_learning_rate: float = 1e-3
    generator_learning_rate: float = 1e-3
    encoder_hidden: tuple = (128,)
    decoder_hidden: tuple = (128,)
    generator_hidden: tuple = (64, 64)
    discriminator_hidden: tuple = (128, 64)
    target_epsilon: Optional[float] = None
    target_delta: Optional[float] = None
    budget_split: float = 0.5
    calibrate: bool = False
    generation_count: Optional[int] = None  # None: number of cases
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if not 0 < self.budget_split < 1:
            raise ValueError("budget_split must lie in (0, 1)")
        if self.generation_count is not None and self.generation_count < 1:
            raise ValueError("generation_count must be >= 1")
        if self.target_epsilon is not None and not self.target_epsilon > 0:
            raise ValueError("target epsilon must be positive")
        if self.target_delta is not None and not 0 < self.target_delta < 1:
            raise ValueError("target delta must lie in (0, 1)")
        if self.calibrate and (self.target_epsilon is None or self.target_delta is None):
            raise ValueError("noise calibration needs a target epsilon and delta")

    def resolved_latent_dim(self, n: int) -> int:
        d = self.latent_dim if self.latent_dim is not None else min(32, n)
        if d > n:
            raise ValueError(f"latent_dim {d} exceeds the number of variants {n}")
        return d

    def mechanism_budgets(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """(epsilon, delta) granted to the autoencoder and to the discriminator."""
        if self.target_epsilon is None or self.target_delta is None:
            raise PrivacyError("no privacy target configured")
        r = self.budget_split
        return (
            (r * self.target_epsilon, r * self.target_delta),
            ((1 - r) * self.target_epsilon, (1 - r) * self.target_delta),
        )

    def mechanism_deltas(self) -> Optional[tuple[float, float]]:
        if self.target_delta is None:
            return None
        r = self.budget_split
        return r * self.target_delta, (1 - r) * self.target_delta


@dataclass
class TrainedBundle:
    encoder: Network
    decoder: Network
    generator: Network
    discriminator: Network
    vocabulary: VariantVocabulary
    autoencoder_spend: MechanismSpend
    discriminator_spend: MechanismSpend
    autoencoder_clip: float
    discriminator_clip: float
    mechanism_guarantees: Optional[tuple[DpGuarantee, DpGuarantee]]
    guarantee: Optional[DpGuarantee]
    num_cases: int
    target: Optional[dict] = None

    def __post_init__(self):
        n = self.vocabulary.n
        if self.decoder.out_dim != n or self.discriminator.in_dim != n:
            raise ValueError("decoder output and discriminator input must match the vocabulary size")
        if self.generator.out_dim != self.decoder.in_dim:
            raise ValueError("generator output must match the decoder's latent dimension")

    @property
    def noise_dim(self) -> int:
        return self.generator.in_dim

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim

    def ledger(self) -> dict:
        return build_ledger(self)

    def save(self, directory) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        for name in ("encoder", "decoder", "generator", "discriminator"):
            (path / f"{name}.json").write_text(getattr(self, name).to_json())
        (path / "vocabulary.tsv").write_text(self.vocabulary.to_tsv(), encoding="utf-8")
        (path / "ledger.json").write_text(json.dumps(self.ledger(), indent=2))

    @classmethod
    def load(cls, directory) -> "TrainedBundle":
        path = Path(directory)
        try:
            nets = {
                name: Network.from_json((path / f"{name}.json").read_text())
                for name in ("encoder", "decoder", "generator", "discriminator")
            }
            vocab = VariantVocabulary.from_tsv((path / "vocabulary.tsv").read_text(encoding="utf-8"))
            ledger = json.loads((path / "ledger.json").read_text())
            mech = ledger["mechanisms"]
            ae, ds = mech["autoencoder"], mech["discriminator"]
            guarantees = None
            if ae.get("epsilon") is not None and ds.get("epsilon") is not None:
                guarantees = (
                    DpGuarantee(ae["epsilon"], ae["delta"], ae.get("alpha_star")),
                    DpGuarantee(ds["epsilon"], ds["delta"], ds.get("alpha_star")),
                )
            combined = ledger.get("combined")
            return cls(
                encoder=nets["encoder"],
                decoder=nets["decoder"],
                generator=nets["generator"],
                discriminator=nets["discriminator"],
                vocabulary=vocab,
                autoencoder_spend=MechanismSpend(ae["q"], ae["phi"], ae["iterations"]),
                discriminator_spend=MechanismSpend(ds["q"], ds["phi"], ds["iterations"]),
                autoencoder_clip=ae["clip_norm"],
                discriminator_clip=ds["clip_norm"],
                mechanism_guarantees=guarantees,
                guarantee=DpGuarantee(combined["epsilon"], combined["delta"]) if combined else None,
                num_cases=ledger["num_cases"],
                target=ledger.get("target"),
            )
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise TravagError(f"corrupt or incomplete bundle at {path}: {exc}") from exc


@dataclass
class GenerationReport:
    log: SimpleEventLog
    samples: int
    seed: int
    guarantee: Optional[DpGuarantee]


# ---------------------------------------------------------------------------
# Privacy ledger


def _mechanism_entry(spend: MechanismSpend, clip: float, guarantee: Optional[DpGuarantee], delta) -> dict:
    entry = spend.to_dict()
    entry["clip_norm"] = clip
    entry["delta"] = guarantee.delta if guarantee else delta
    entry["epsilon"] = guarantee.epsilon if guarantee else None
    entry["alpha_star"] = guarantee.alpha_star if guarantee else None
    return entry


def build_ledger(bundle: TrainedBundle) -> dict:
    g = bundle.mechanism_guarantees
    return {
        "format_version": LEDGER_FORMAT_VERSION,
        "num_cases": bundle.num_cases,
        "target": bundle.target,
        "mechanisms": {
            "autoencoder": _mechanism_entry(
                bundle.autoencoder_spend, bundle.autoencoder_clip, g[0] if g else None, None
            ),
            "discriminator": _mechanism_entry(
                bundle.discriminator_spend, bundle.discriminator_clip, g[1] if g else None, None
            ),
        },
        "combined": (
            {"epsilon": bundle.guarantee.epsilon, "delta": bundle.guarantee.delta} if bundle.guarantee else None
        ),
    }


def recompute_ledger(ledger: dict):
    """Re-derive per-mechanism and combined guarantees from the recorded spends.

    Returns ``(per_mechanism, combined)``, both None for a run without noise.
    """
    per = []
    for name in ("autoencoder", "discriminator"):
        entry = ledger["mechanisms"][name]
        if entry.get("delta") is None or entry["phi"] == 0:
            return None, None
        spend = MechanismSpend(entry["q"], entry["phi"], entry["iterations"])
        per.append(account_dpsgd(spend, entry["delta"]))
    return tuple(per), combine_mechanisms(*per)


def audit_ledger(ledger: dict) -> bool:
    """True when recomputation reproduces the recorded values bit for bit."""
    per, combined = recompute_ledger(ledger)
    recorded = ledger.get("combined")
    if combined is None or recorded is None:
        return combined is None and recorded is None
    for name, g in zip(("autoencoder", "discriminator"), per):
        entry = ledger["mechanisms"][name]
        if entry["epsilon"] != g.epsilon or entry["alpha_star"] != g.alpha_star:
            return False
    return combined.epsilon == recorded["epsilon"] and combined.delta == recorded["delta"]


# ---------------------------------------------------------------------------
# Training


def _check_finite(value: float, phase: str, iteration: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{phase}: non-finite loss at iteration {iteration}")


def build_autoencoder(n: int, cfg: TravagConfig, rng: RngStream) -> tuple[Network, Network]:
    d = cfg.resolved_latent_dim(n)
    enc_dims = [n, *cfg.encoder_hidden, d]
    dec_dims = [d, *cfg.decoder_hidden, n]
    encoder = init_network(mlp_specs(enc_dims, ["relu"] * (len(enc_dims) - 1)), rng.seed_int())
    decoder = init_network(
        mlp_specs(dec_dims, ["relu"] * (len(dec_dims) - 2) + ["sigmoid"]), rng.seed_int()
    )
    return encoder, decoder


def build_gan(n: int, d: int, cfg: TravagConfig, rng: RngStream) -> tuple[Network, Network]:
    gen_dims = [cfg.noise_dim, *cfg.generator_hidden, d]
    dis_dims = [n, *cfg.discriminator_hidden, 1]
    generator = init_network(
        mlp_specs(gen_dims, ["relu"] * (len(gen_dims) - 2) + ["identity"]), rng.seed_int()
    )
    discriminator = init_network(
        mlp_specs(dis_dims, ["relu"] * (len(dis_dims) - 2) + ["sigmoid"]), rng.seed_int()
    )
    return generator, discriminator


def train_autoencoder(matrix: BinaryMatrix, cfg: TravagConfig, rng: RngStream):
    """Private decoder, clean encoder. Returns ``(encoder, decoder, spend)``.

    Every Poisson round counts as an iteration, empty ones included.
    """
    m, n = matrix.shape
    if m < 2:
        raise ValueError("autoencoder training needs at least two cases")
    dp = cfg.autoencoder
    x_all = matrix.to_dense()
    encoder, decoder = build_autoencoder(n, cfg, rng)
    enc_opt = Adam(cfg.encoder_learning_rate)

    for it in range(dp.iterations):
        idx = poisson_sample(m, dp.sampling_rate, rng)
        if idx.size == 0:
            continue
        xb = x_all[idx]
        try:
            enc_cache = forward_cached(encoder, xb)
            step = dp_sgd_step(decoder, None, enc_cache.output, xb, "bce", dp, rng)
            _check_finite(step.loss, "autoencoder", it)
            g_enc, _ = backward(encoder, enc_cache, step.input_grads / idx.size)
            enc_opt.step(encoder, GradientVector(g_enc, encoder.layout()))
        except NumericalError as exc:
            raise DivergenceError(f"autoencoder diverged at iteration {it}: {exc}") from exc
        if it % 500 == 0:
            logger.debug("autoencoder it=%d batch=%d loss=%.5f", it, idx.size, step.loss)

    spend = MechanismSpend(dp.sampling_rate, dp.noise_multiplier, dp.iterations)
    return encoder, decoder, spend


def generator_gradient(
    generator: Network, decoder: Network, discriminator: Network, z: np.ndarray
) -> tuple[GradientVector, float]:
    """Gradient of the non-saturating loss ``-mean log dis(dec(gen(z)))``."""
    g_cache = forward_cached(generator, z)
    d_cache = forward_cached(decoder, g_cache.output)
    s_cache = forward_cached(discriminator, d_cache.output)
    batch = z.shape[0]
    delta = loss_delta(discriminator, s_cache, "bce", 1.0) / batch
    _, grad_fake = backward(discriminator, s_cache, delta, subset=(), wrt_preactivation=True)
    _, grad_latent = backward(decoder, d_cache, grad_fake, subset=())
    g_gen, _ = backward(generator, g_cache, grad_latent)
    p = np.clip(s_cache.output, 1e-7, 1 - 1e-7)
    return GradientVector(g_gen, generator.layout()), float(-np.mean(np.log(p)))


def train_gan(matrix: BinaryMatrix, decoder: Network, cfg: TravagConfig, rng: RngStream):
    """Private discriminator, clean generator. Returns ``(generator, discriminator, spend)``.

    Real rows are clipped and noised; generated rows enter the discriminator
    gradient unmodified since they carry no private data. The decoder is
    read-only here.
    """
    m, n = matrix.shape
    dp = cfg.discriminator
    x_all = matrix.to_dense()
    generator, discriminator = build_gan(n, decoder.in_dim, cfg, rng)
    gen_opt = Adam(cfg.generator_learning_rate)

    for it in range(dp.iterations):
        idx = poisson_sample(m, dp.sampling_rate, rng)
        if idx.size == 0:
            continue
        batch = idx.size
        try:
            fake = forward(decoder, forward(generator, rng.gaussian((batch, cfg.noise_dim))))
            fake_grad = batch_gradient(discriminator, fake, 0.0, "bce")
            step = dp_sgd_step(
                discriminator, None, x_all[idx], 1.0, "bce", dp, rng, public_gradient=fake_grad
            )
            _check_finite(step.loss, "discriminator", it)
            g_gen, g_loss = generator_gradient(
                generator, decoder, discriminator, rng.gaussian((batch, cfg.noise_dim))
            )
            _check_finite(g_loss, "generator", it)
            gen_opt.step(generator, g_gen)
        except NumericalError as exc:
            raise DivergenceError(f"GAN diverged at iteration {it}: {exc}") from exc
        if it % 500 == 0:
            logger.debug("gan it=%d batch=%d d_real=%.4f g=%.4f", it, batch, step.loss, g_loss)

    spend = MechanismSpend(dp.sampling_rate, dp.noise_multiplier, dp.iterations)
    return generator, discriminator, spend


# ---------------------------------------------------------------------------
# Generation and orchestration


def sample_columns(bundle: TrainedBundle, count: int, rng: RngStream) -> np.ndarray:
    z = rng.gaussian((count, bundle.noise_dim))
    scores = forward(bundle.decoder, forward(bundle.generator, z))
    return np.argmax(scores, axis=1)


def generate(bundle: TrainedBundle, count: Optional[int] = None, seed: int = 0) -> GenerationReport:
    """Draw ``count`` synthetic cases (default: the original case count).

    Sampling is post-processing of the released networks and consumes no
    additional privacy budget.
    """
    count = bundle.num_cases if count is None else count
    if int(count) != count or count < 1:
        raise ValueError(f"count must be a positive integer, got {count}")
    columns = sample_columns(bundle, int(count), RngStream(seed))
    log = one_hot_decode(columns, bundle.vocabulary)
    return GenerationReport(log, int(count), seed, bundle.guarantee)


def resolve_noise(cfg: TravagConfig) -> TravagConfig:
    """Replace both noise multipliers by calibrated ones when requested."""
    if not cfg.calibrate:
        return cfg
    (eps_ae, delta_ae), (eps_ds, delta_ds) = cfg.mechanism_budgets()
    ae, ds = cfg.autoencoder, cfg.discriminator
    phi_ae = calibrate_phi(eps_ae, delta_ae, ae.sampling_rate, ae.iterations)
    phi_ds = calibrate_phi(eps_ds, delta_ds, ds.sampling_rate, ds.iterations)
    logger.info("calibrated phi: autoencoder %.4f, discriminator %.4f", phi_ae, phi_ds)
    return replace(
        cfg,
        autoencoder=replace(ae, noise_multiplier=phi_ae),
        discriminator=replace(ds, noise_multiplier=phi_ds),
        calibrate=False,
    )


def account_config(cfg: TravagConfig):
    """Per-mechanism and combined guarantees of a config, or None without noise."""
    deltas = cfg.mechanism_deltas()
    ae, ds = cfg.autoencoder, cfg.discriminator
    if deltas is None or ae.noise_multiplier == 0 or ds.noise_multiplier == 0:
        return None, None
    g_ae = account_dpsgd(MechanismSpend(ae.sampling_rate, ae.noise_multiplier, ae.iterations), deltas[0])
    g_ds = account_dpsgd(MechanismSpend(ds.sampling_rate, ds.noise_multiplier, ds.iterations), deltas[1])
    return (g_ae, g_ds), combine_mechanisms(g_ae, g_ds)


def _within_target(g: DpGuarantee, cfg: TravagConfig) -> bool:
    return g.epsilon <= cfg.target_epsilon and g.delta <= cfg.target_delta * (1 + 1e-12)


def check_admissible(cfg: TravagConfig) -> DpGuarantee:
    per, combined = account_config(cfg)
    if cfg.target_epsilon is None:
        raise PrivacyError("no target epsilon to check against")
    if combined is None:
        raise PrivacyError("privacy target set but a noise multiplier is 0")
    if not _within_target(combined, cfg):
        raise PrivacyError(
            f"guarantee ({combined.epsilon:.6g}, {combined.delta:.3g}) exceeds target "
            f"({cfg.target_epsilon}, {cfg.target_delta})"
        )
    return combined


def run_travag(log: SimpleEventLog, cfg: TravagConfig) -> tuple[GenerationReport, TrainedBundle]:
    """Fit vocabulary, train both phases, account, and generate."""
    vocab = fit_vocabulary(log)
    matrix = one_hot_encode(log, vocab)
    cfg = resolve_noise(cfg)
    if cfg.target_epsilon is not None:
        check_admissible(cfg)

    root = RngStream(cfg.seed)
    ae_rng, gan_rng, gen_rng = root.spawn(3)
    encoder, decoder, ae_spend = train_autoencoder(matrix, cfg, ae_rng)
    generator, discriminator, ds_spend = train_gan(matrix, decoder, cfg, gan_rng)

    per, combined = account_config(cfg)
    if combined is not None and cfg.target_epsilon is not None and not _within_target(combined, cfg):
        raise PrivacyError(f"combined guarantee {combined} exceeds the target")

    target = None
    if cfg.target_epsilon is not None or cfg.target_delta is not None:
        target = {"epsilon": cfg.target_epsilon, "delta": cfg.target_delta, "split": cfg.budget_split}
    bundle = TrainedBundle(
        encoder=encoder,
        decoder=decoder,
        generator=generator,
        discriminator=discriminator,
        vocabulary=vocab,
        autoencoder_spend=ae_spend,
        discriminator_spend=ds_spend,
        autoencoder_clip=cfg.autoencoder.clip_norm,
        discriminator_clip=cfg.discriminator.clip_norm,
        mechanism_guarantees=per,
        guarantee=combined,
        num_cases=log.num_cases,
        target=target,
    )
    count = cfg.generation_count or log.num_cases
    report = generate(bundle, count, seed=gen_rng.seed_int())
    return report, bundle


# ---------------------------------------------------------------------------
# Grid search


@dataclass
class GridPoint:
    sampling_rate: float
    iterations: int
    noise_multiplier: float
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    admissible: bool = False
    similarities: list = field(default_factory=list)
    differences: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def mean_similarity(self) -> float:
        return float(np.mean(self.similarities)) if self.similarities else float("-inf")

    @property
    def mean_difference(self) -> float:
        return float(np.mean(self.differences)) if self.differences else float("inf")


@dataclass
class GridSearchResult:
    best: TravagConfig
    best_point: GridPoint
    points: list


def point_config(base: TravagConfig, q: float, iterations: int, phi: float) -> TravagConfig:
    return replace(
        base,
        autoencoder=replace(base.autoencoder, sampling_rate=q, iterations=iterations, noise_multiplier=phi),
        discriminator=replace(base.discriminator, sampling_rate=q, iterations=iterations, noise_multiplier=phi),
        calibrate=False,
    )


def _trial(args):
    log, cfg = args
    try:
        report, _ = run_travag(log, cfg)
    except DivergenceError as exc:
        return str(exc)
    return relative_log_similarity(log, report.log), absolute_log_difference(log, report.log)


def grid_search(
    log: SimpleEventLog,
    base: TravagConfig,
    sampling_rates: Sequence[float],
    iterations: Sequence[int],
    noise_multipliers: Sequence[float],
    trials: int = 3,
    jobs: int = 1,
) -> GridSearchResult:
    """Train every admissible (q, T, phi) point ``trials`` times and keep the best.

    Points are ranked by mean relative log similarity, then lower mean
    absolute log difference, then lower phi. Each trial gets a seed derived
    from the base seed, the point index and the trial index.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if base.target_epsilon is None or base.target_delta is None:
        raise PrivacyError("grid search needs a target (epsilon, delta)")
    combos = list(itertools.product(sampling_rates, iterations, noise_multipliers))
    if not combos:
        raise ValueError("empty grid")

    points: list[GridPoint] = []
    jobs_list = []
    for index, (q, t, phi) in enumerate(combos):
        point = GridPoint(float(q), int(t), float(phi))
        points.append(point)
        cfg = point_config(base, q, t, phi)
        try:
            g = check_admissible(cfg)
            point.epsilon, point.delta, point.admissible = g.epsilon, g.delta, True
        except PrivacyError as exc:
            _, combined = account_config(cfg) if phi > 0 else (None, None)
            if combined is not None:
                point.epsilon, point.delta = combined.epsilon, combined.delta
            point.error = str(exc)
            logger.info("grid point q=%s T=%s phi=%s excluded: %s", q, t, phi, exc)
            continue
        for trial in range(trials):
            seed = int(np.random.SeedSequence([base.seed, index, trial]).generate_state(1)[0])
            jobs_list.append((len(points) - 1, (log, replace(cfg, seed=seed))))

    admissible = [p for p in points if p.admissible]
    if not admissible:
        detail = ", ".join(
            f"(q={p.sampling_rate}, T={p.iterations}, phi={p.noise_multiplier}): eps={p.epsilon}" for p in points
        )
        raise PrivacyError(f"no grid point satisfies the privacy target; {detail}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_trial, [a for _, a in jobs_list]))
    else:
        outcomes = [_trial(a) for _, a in jobs_list]
    for (pi, _), outcome in zip(jobs_list, outcomes):
        if isinstance(outcome, str):
            points[pi].error = outcome
            continue
        points[pi].similarities.append(outcome[0])
        points[pi].differences.append(outcome[1])

    # a point with any diverged trial cannot be trusted
    scored = [p for p in admissible if p.error is None]
    if not scored:
        raise DivergenceError("every admissible grid point diverged")
    best_point = max(scored, key=lambda p: (p.mean_similarity, -p.mean_difference, -p.noise_multiplier))
    best = point_config(base, best_point.sampling_rate, best_point.iterations, best_point.noise_multiplier)
    return GridSearchResult(best, best_point, points)

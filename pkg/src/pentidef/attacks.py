"""Poisoning strategies applied by adversarial clients.

Data attacks (label flip, backdoor, GAN) rewrite the local dataset before
training; model attacks (weight scaling, Un-Krum, Un-Med) rewrite the
outgoing weights after training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datahub import Dataset
from .neuralcore import (LayerSpec, ModelWeights, TrainConfig, _Optimizer,
                         backward, bce_loss_and_grads, forward, init_network)
from .aggregators import weights_of

ATTACK_KINDS = ("label_flip", "weight_scale", "un_krum", "un_med", "backdoor", "gan")
DATA_ATTACKS = ("label_flip", "backdoor", "gan")
MODEL_ATTACKS = ("weight_scale", "un_krum", "un_med")
FAKE_LABEL_POLICIES = ("single", "mixed", "confusion")


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 8
    hidden: int = 32
    steps: int = 200
    batch_size: int = 64
    learning_rate: float = 2e-3
    n_fake: int = 200
    fake_label: str = "single"
    single_label: int = 0

    def __post_init__(self):
        if self.n_fake < 0:
            raise ValueError("n_fake must be >= 0")
        if self.fake_label not in FAKE_LABEL_POLICIES:
            raise ValueError(f"fake_label must be one of {FAKE_LABEL_POLICIES}")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "label_flip"
    scale: float = 10.0
    trigger_threshold: float | None = None
    target_label: int = 0
    margin: float = 0.5
    eps_floor: float = 1e-3
    gan: GanConfig = field(default_factory=GanConfig)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if not self.scale > 0:
            raise ValueError("weight-scale factor must be > 0")
        if self.target_label not in (0, 1):
            raise ValueError("target_label must be 0 or 1")
        if self.margin < 0 or not self.eps_floor > 0:
            raise ValueError("margin must be >= 0 and eps_floor > 0")


# --------------------------------------------------------------------------
# data attacks
# --------------------------------------------------------------------------

def label_flip(data: Dataset) -> Dataset:
    return data.with_labels(1 - data.labels)


def backdoor_poison(data: Dataset, threshold: float, target_label: int = 0) -> Dataset:
    """Relabel every sample whose feature mean exceeds ``threshold``."""
    labels = data.labels.copy()
    labels[data.features.mean(axis=1) > threshold] = target_label
    return data.with_labels(labels)


def default_trigger_threshold(data: Dataset) -> float:
    return float(np.median(data.features.mean(axis=1)))


@dataclass
class GanHistory:
    disc_accuracy: list = field(default_factory=list)
    disc_loss: list = field(default_factory=list)
    gen_loss: list = field(default_factory=list)


def _step(net: ModelWeights, opt, grads):
    opt.step([a for pair in net.layers for a in pair], [g for pair in grads for g in pair])


def train_gan(X, cfg: GanConfig, seed: int, X_holdout=None, record_every: int = 10):
    """Alternating one-step updates of a small generator/discriminator pair.

    Every ``record_every`` steps the discriminator's real-vs-fake accuracy on
    ``X_holdout`` (defaults to ``X``) against fresh fakes is recorded.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    rng = np.random.default_rng(seed)
    gen = init_network(LayerSpec((cfg.latent_dim, cfg.hidden, cfg.hidden, d), "identity"), seed)
    disc = init_network(LayerSpec((d, cfg.hidden, cfg.hidden, 1), "sigmoid"), seed + 1)
    tc = TrainConfig(learning_rate=cfg.learning_rate, epochs=1, batch_size=cfg.batch_size,
                     optimizer="adam", beta1=0.5)
    g_opt = _Optimizer(tc, [a.shape for pair in gen.layers for a in pair])
    d_opt = _Optimizer(tc, [a.shape for pair in disc.layers for a in pair])
    hist = GanHistory()
    holdout = X if X_holdout is None else np.asarray(X_holdout, dtype=np.float64)
    b = min(cfg.batch_size, X.shape[0])
    for step in range(cfg.steps):
        real = X[rng.integers(0, X.shape[0], b)]
        fake = forward(gen, rng.standard_normal((b, cfg.latent_dim)))[1]
        loss, grads = bce_loss_and_grads(disc, np.vstack([real, fake]),
                                         np.concatenate([np.ones(b), np.zeros(b)]))
        _step(disc, d_opt, grads)
        hist.disc_loss.append(loss)

        g_acts, fake = forward(gen, rng.standard_normal((b, cfg.latent_dim)))
        d_acts, p = forward(disc, fake)
        p = np.clip(p[:, 0], 1e-7, 1 - 1e-7)
        # non-saturating generator loss -log D(G(z))
        hist.gen_loss.append(float(-np.mean(np.log(p))))
        _, g_x = backward(disc, d_acts, ((p - 1.0) / b)[:, None], need_input_grad=True)
        _step(gen, g_opt, backward(gen, g_acts, g_x))

        if step % record_every == 0 or step == cfg.steps - 1:
            hist.disc_accuracy.append(_disc_accuracy(gen, disc, holdout, cfg.latent_dim, rng))
    return gen, disc, hist


def _disc_accuracy(gen, disc, real, latent_dim, rng):
    fake = forward(gen, rng.standard_normal((real.shape[0], latent_dim)))[1]
    pr = forward(disc, real)[1][:, 0]
    pf = forward(disc, fake)[1][:, 0]
    return float((np.sum(pr >= 0.5) + np.sum(pf < 0.5)) / (2 * real.shape[0]))


def gan_poison(data: Dataset, cfg: GanConfig | None = None, seed: int = 0) -> Dataset:
    """Append ``n_fake`` generated samples labeled by the fake-label policy."""
    cfg = cfg or GanConfig()
    if len(data) == 0:
        raise ValueError("cannot fit a GAN on an empty dataset")
    if cfg.n_fake < 1:
        raise ValueError("n_fake must be >= 1")
    gen, _, _ = train_gan(data.features, cfg, seed)
    rng = np.random.default_rng(seed + 7)
    fake = forward(gen, rng.standard_normal((cfg.n_fake, cfg.latent_dim)))[1]
    fake = np.clip(fake, data.features.min(axis=0), data.features.max(axis=0))
    if cfg.fake_label == "single":
        fake_y = np.full(cfg.n_fake, cfg.single_label)
    elif cfg.fake_label == "mixed":
        fake_y = rng.integers(0, 2, cfg.n_fake)
    else:
        # opposite of the nearest real sample's label
        d2 = ((fake[:, None, :] - data.features[None, :, :]) ** 2).sum(axis=2)
        fake_y = 1 - data.labels[np.argmin(d2, axis=1)]
    return Dataset(np.vstack([data.features, fake]),
                   np.concatenate([data.labels, fake_y]), data.feature_names)


# --------------------------------------------------------------------------
# model attacks
# --------------------------------------------------------------------------

def weight_scale(w: ModelWeights, scale: float) -> ModelWeights:
    if not scale > 0:
        raise ValueError("scale must be > 0")
    return weights_of(w).map(lambda a: a * scale)


def _benign_matrix(benign_estimates, global_w):
    if not benign_estimates:
        raise ValueError("need at least one benign estimate")
    models = [weights_of(m) for m in benign_estimates]
    V = np.stack([m.flat() for m in models])
    return models[0].spec, V, weights_of(global_w).flat()


def craft_untargeted_krum(benign_estimates, global_w, f: int, margin: float = 0.5,
                          eps_floor: float = 1e-3) -> ModelWeights:
    """Step against the benign update direction while staying Krum-plausible.

    The crafted vector starts at the most central benign estimate (lowest
    Krum-style neighbour distance) and moves ``margin * diameter`` (or
    ``eps_floor`` when all estimates coincide) opposite to the mean update.
    """
    if f < 1:
        raise ValueError("f must be >= 1")
    spec, V, g = _benign_matrix(benign_estimates, global_w)
    direction = V.mean(axis=0) - g
    norm = np.linalg.norm(direction)
    unit = direction / norm if norm > 0 else np.zeros_like(direction)
    d2 = ((V[:, None, :] - V[None, :, :]) ** 2).sum(axis=2)
    diameter = float(np.sqrt(d2.max()))
    m = max(1, V.shape[0] - f - 2)
    centrality = np.sort(d2, axis=1)[:, 1:m + 1].sum(axis=1)
    anchor = V[int(np.argmin(centrality))]
    radius = margin * diameter if diameter > 0 else eps_floor
    return ModelWeights.from_flat(spec, anchor - radius * unit)


def craft_untargeted_med(benign_estimates, global_w, margin: float = 0.5,
                         eps_floor: float = 1e-3) -> ModelWeights:
    """Push each coordinate just outside the benign range, against its update sign."""
    if not margin > 0:
        raise ValueError("margin must be > 0")
    spec, V, g = _benign_matrix(benign_estimates, global_w)
    lo, hi = V.min(axis=0), V.max(axis=0)
    spread = np.where(hi - lo > 0, hi - lo, eps_floor)
    positive = V.mean(axis=0) - g >= 0
    crafted = np.where(positive, lo - margin * spread, hi + margin * spread)
    return ModelWeights.from_flat(spec, crafted)

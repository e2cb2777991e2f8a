"""Comparison attacks: benign code injection and a substitute-detector GAN.

The substitute-detector attack (after MalGAN) queries the target detector
for labels and trains a local stand-in; every label request is counted so
reports can contrast it with the query-free attack, whose count is always
zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore, petk
from .detectors import MALICIOUS
from .gan import GanPreset, TrainingDivergedError, sample_noise, smooth_union
from .nncore import AdamState, Mlp, Tensor, adam_step, build_mlp, concat, forward, grad


def benign_injection(pe: petk.PeImage, benign_pool: list[bytes],
                     rng: np.random.Generator) -> petk.PeImage:
    """Append one uniformly chosen benign file's bytes to the overlay."""
    if not benign_pool:
        raise ValueError("empty benign pool")
    chosen = benign_pool[int(rng.integers(0, len(benign_pool)))]
    return petk.parse(pe.data + bytes(chosen), strict=True)


@dataclass
class MalganConfig:
    batch_size: int = 32
    substitute_lr: float = 1e-3
    generator_lr: float = 1e-3
    substitute_steps_per_round: int = 4
    generator_steps_per_round: int = 4
    max_queries: int = 50_000
    target_detection: float = 0.05
    probe_size: int = 32
    probe_every: int = 5
    seed: int = 0


@dataclass
class MalganModel:
    generator: Mlp
    substitute: Mlp
    preset: GanPreset
    query_count: int = 0
    training_meta: dict = field(default_factory=dict)


class _QueryCounter:
    def __init__(self, label_fn):
        self.label_fn = label_fn
        self.count = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        self.count += len(x)
        labels = self.label_fn(x)
        return (np.asarray(labels) == MALICIOUS).astype(np.float64)


def _build_malgan(preset: GanPreset, seed: int) -> MalganModel:
    rng = np.random.default_rng(seed)
    gen = build_mlp(
        [preset.input_dim + preset.noise_dim, *preset.generator_hidden,
         preset.input_dim],
        "relu", preset.output_activation, rng)
    # substitute mirrors the critic preset with a sigmoid head
    sub = build_mlp([preset.input_dim, *preset.critic_hidden, 1],
                    "leaky_relu", "sigmoid", rng)
    return MalganModel(generator=gen, substitute=sub, preset=preset)


def malgan_generate(model: MalganModel, m: np.ndarray, z) -> np.ndarray:
    """Adversarial vector from the substitute-trained generator."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    z_t = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
    out = forward(model.generator, concat([Tensor(m), z_t])).data
    if model.preset.is_binary:
        result = np.logical_or(m > 0.5, out > 0.5).astype(np.float64)
    else:
        result = out
    return result[0] if result.shape[0] == 1 and np.asarray(z).ndim == 1 else result


def _bce(p: Tensor, y: np.ndarray) -> Tensor:
    y_col = Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    p_safe = nncore.add(nncore.mul(p, Tensor(1.0 - 1e-7)), Tensor(5e-8))
    pos = nncore.mul(y_col, nncore.tlog(p_safe))
    neg = nncore.mul(nncore.sub(Tensor(1.0), y_col),
                     nncore.tlog(nncore.sub(Tensor(1.0), p_safe)))
    return nncore.mul(Tensor(-1.0), nncore.tmean(nncore.add(pos, neg)))


def train_malgan(malicious_features: np.ndarray, benign_features: np.ndarray,
                 black_box, preset: GanPreset,
                 cfg: MalganConfig | None = None) -> MalganModel:
    """Alternate substitute fitting (against black-box labels) with
    generator updates that lower the substitute's malicious probability.

    ``black_box`` must be a label-only callable; scores are never used.
    """
    cfg = cfg or MalganConfig()
    xm = np.atleast_2d(np.asarray(malicious_features, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(benign_features, dtype=np.float64))
    rng = np.random.default_rng(cfg.seed)
    model = _build_malgan(preset, cfg.seed)
    counter = _QueryCounter(black_box)
    sub_state = AdamState.for_params(model.substitute.parameters())
    gen_state = AdamState.for_params(model.generator.parameters())

    round_no = 0
    while counter.count < cfg.max_queries:
        round_no += 1
        m_idx = rng.integers(0, len(xm), size=cfg.batch_size)
        b_idx = rng.integers(0, len(xb), size=cfg.batch_size)
        m_batch = xm[m_idx]
        b_batch = xb[b_idx]
        z = sample_noise(preset.noise_dim, cfg.batch_size, rng)
        fakes = malgan_generate(model, m_batch, z)

        x_train = np.vstack([fakes, b_batch])
        y_train = counter(x_train)

        try:
            for _ in range(cfg.substitute_steps_per_round):
                p = forward(model.substitute, Tensor(x_train))
                loss = _bce(p, y_train)
                grads = grad(loss, model.substitute.parameters())
                adam_step(model.substitute.parameters(), grads, sub_state,
                          lr=cfg.substitute_lr, beta1=0.9, beta2=0.999)

            for _ in range(cfg.generator_steps_per_round):
                c = concat([Tensor(m_batch), z])
                o = forward(model.generator, c)
                fake_t = smooth_union(m_batch, o) if preset.is_binary else o
                p_fake = forward(model.substitute, fake_t)
                loss_g = nncore.tmean(p_fake)
                grads = grad(loss_g, model.generator.parameters())
                adam_step(model.generator.parameters(), grads, gen_state,
                          lr=cfg.generator_lr, beta1=0.9, beta2=0.999)
        except nncore.NumericError:
            raise TrainingDivergedError(round_no, None, None) from None

        if round_no % cfg.probe_every == 0:
            probe_idx = rng.integers(0, len(xm), size=cfg.probe_size)
            probe_z = sample_noise(preset.noise_dim, cfg.probe_size, rng)
            probe = malgan_generate(model, xm[probe_idx], probe_z)
            rate = float(np.mean(counter(probe)))
            if rate < cfg.target_detection:
                break

    model.query_count = counter.count
    model.training_meta = {"rounds": round_no, "seed": cfg.seed,
                           "queries": counter.count}
    return model

"""Alternating discriminator / generator+CVAE training."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import ndiff as nd
from ..data import DataError, FeatureArrays, SceneBatch, augment_rotation
from ..ndiff import AdamState, adam_step
from . import losses
from .config import ModelConfig
from .model import SoFGAN, full_relative, integrate_force_stream, save_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    d_loss: float
    g_loss: float
    variety: float
    kl: float
    goal: float
    wall_time: float


@dataclass
class StepResult:
    d_loss: float
    g_loss: float
    variety: float
    kl: float
    goal: float


def generator_forward(model: SoFGAN, feats: FeatureArrays, noise, epsilon):
    """Run encoder, CVAE (posterior) and decoder on a minibatch, k samples per row.

    ``noise`` is (B*k, noise_dim) and ``epsilon`` (B, k, z_dim); sample rows are
    ordered pedestrian-major. Returns a dict of tensors.
    """
    k = epsilon.shape[1] if epsilon is not None else noise.shape[0] // len(feats)
    cfg = model.config
    goal_term = None if cfg.use_cvae else feats.f_goal
    context = model.encode_observation(feats.x_rel_obs, feats.f_total, feats.rep, goal_term)
    ctx_k = nd.repeat_rows(context, k)
    last_rel = np.repeat(feats.x_rel_obs[:, -1], k, axis=0)
    out = {}
    goal_in = None
    if cfg.use_cvae:
        code = model.encode_trajectory(feats.x_r_obs)
        mu, log_sigma, _, g_pred = model.cvae_train_forward(code, feats.g_r, epsilon)
        anchor = np.repeat(feats.x_r_obs[:, -1], k, axis=0)
        goal_in = nd.sub(g_pred, nd.constant(anchor, dtype=model.dtype))
        out.update(mu=mu, log_sigma=log_sigma, goals=g_pred)
    y_rel, forces = model.generate(ctx_k, goal_in, noise, last_rel)
    out.update(y_rel=y_rel, forces=forces, force_rel=integrate_force_stream(forces, last_rel, model.dtype))
    return out


def compute_generator_loss(model: SoFGAN, feats: FeatureArrays, fwd: dict, fake_scores):
    """Weighted generator objective and its parts for a forward pass ``fwd``."""
    cfg = model.config
    b = len(feats)
    k = fwd["y_rel"].shape[0] // b
    adv = losses.generator_loss(fake_scores, cfg.generator_loss)
    shape = (b, k) + fwd["y_rel"].shape[1:]
    variety = nd.add(
        losses.variety_loss(nd.reshape(fwd["y_rel"], shape), feats.x_rel_pred),
        losses.variety_loss(nd.reshape(fwd["force_rel"], shape), feats.x_rel_pred),
    )
    cvae = kl = goal = None
    if cfg.use_cvae:
        goals = nd.reshape(fwd["goals"], (b, k, 2))
        cvae, kl, goal = losses.cvae_loss(fwd["mu"], fwd["log_sigma"], goals, feats.g_r, cfg.lambda2, cfg.lambda3)
    total = losses.total_loss(adv, variety, cvae, cfg.lambda1)
    return total, {"adv": adv, "variety": variety, "kl": kl, "goal": goal}


def train_step(model: SoFGAN, feats: FeatureArrays, rng: np.random.Generator,
               opt_g: AdamState, opt_d: AdamState) -> StepResult:
    """One discriminator update followed by one generator+CVAE update."""
    cfg = model.config
    b, k = len(feats), cfg.k_samples
    noise = rng.standard_normal((b * k, cfg.noise_dim))
    epsilon = rng.standard_normal((b, k, cfg.z_dim))
    model.train()
    fwd = generator_forward(model, feats, noise, epsilon)
    # the adversarial terms judge the first of the k samples of each pedestrian
    fake = full_relative(feats.x_rel_obs, fwd["y_rel"][::k], model.dtype)
    real = np.concatenate([feats.x_rel_obs, feats.x_rel_pred], axis=1)

    d_params = model.discriminator_parameters()
    g_params = model.generator_parameters()
    model.zero_grad()
    d_loss = losses.discriminator_loss(model.discriminate(real), model.discriminate(nd.detach(fake)))
    _check_finite(d_loss, "d_loss")
    d_loss.backward()
    adam_step(opt_d, d_params)

    model.zero_grad()
    g_loss, parts = compute_generator_loss(model, feats, fwd, model.discriminate(fake))
    _check_finite(g_loss, "g_loss")
    g_loss.backward()
    adam_step(opt_g, g_params)
    model.zero_grad()
    scalar = lambda t: float(t.value) if t is not None else 0.0  # noqa: E731
    return StepResult(scalar(d_loss), scalar(g_loss), scalar(parts["variety"]), scalar(parts["kl"]),
                      scalar(parts["goal"]))


def _check_finite(loss, name):
    if not np.all(np.isfinite(loss.value)):
        raise TrainingError(f"non-finite {name} ({loss.value}); aborting")


def _minibatches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    """Chunks of ``order``; a trailing single row is merged into the previous chunk
    so batch normalisation never sees a batch of one."""
    chunks = [order[i : i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(
    batches: Sequence[SceneBatch],
    config: ModelConfig,
    epochs: int,
    seed: int = 0,
    checkpoint: str | Path | None = None,
    log_path: str | Path | None = None,
    dtype=np.float32,
    model: SoFGAN | None = None,
    on_epoch: Callable[[EpochRecord, SoFGAN], None] | None = None,
) -> tuple[SoFGAN, list[EpochRecord]]:
    """Train for ``epochs`` passes over ``batches``.

    With ``config.augment`` every scene is rotated about its centroid by a fresh
    uniform angle each epoch. All randomness derives from ``seed``.
    """
    if not batches or sum(len(b) for b in batches) == 0:
        raise DataError("training set is empty")
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    init_seq, aug_seq, step_seq = np.random.SeedSequence(seed).spawn(3)
    if model is None:
        model = SoFGAN(config, seed=int(init_seq.generate_state(1)[0]))
    model.astype(dtype)
    aug_rng = np.random.default_rng(aug_seq)
    rng = np.random.default_rng(step_seq)
    opt_g, opt_d = AdamState(lr=config.lr), AdamState(lr=config.lr)
    base = FeatureArrays.from_batches(batches)
    history = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, epochs + 1):
            start = time.perf_counter()
            if config.augment:
                angles = aug_rng.uniform(0.0, 2.0 * math.pi, size=len(batches))
                feats = FeatureArrays.from_batches([augment_rotation(b, a) for b, a in zip(batches, angles)])
            else:
                feats = base
            steps = []
            for idx in _minibatches(len(feats), config.batch, rng.permutation(len(feats))):
                try:
                    steps.append(train_step(model, feats.subset(idx), rng, opt_g, opt_d))
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {len(steps) + 1}: {exc}") from None
            mean = lambda name: float(np.mean([getattr(s, name) for s in steps]))  # noqa: E731
            record = EpochRecord(epoch, mean("d_loss"), mean("g_loss"), mean("variety"), mean("kl"),
                                 mean("goal"), time.perf_counter() - start)
            history.append(record)
            log.info("epoch %d: d=%.4f g=%.4f variety=%.4f kl=%.4f goal=%.4f (%.1fs)", epoch, record.d_loss,
                     record.g_loss, record.variety, record.kl, record.goal, record.wall_time)
            if log_file is not None:
                log_file.write(json.dumps(asdict(record), sort_keys=True) + "\n")
                log_file.flush()
            if on_epoch is not None:
                on_epoch(record, model)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    if checkpoint is not None:
        save_model(model, checkpoint)
    return model, history

"""Generator, CVAE goal module and discriminator built on the ndiff tape."""
from __future__ import annotations

import numpy as np

from .. import ndiff as nd
from ..data import OBS_LEN, PRED_LEN, SEQ_LEN
from ..ndiff import MLP, CheckpointError, Linear, LSTMCell, Module, Tensor, read_checkpoint, write_checkpoint
from .config import GENERATOR_LOSSES, ModelConfig


class ModeError(RuntimeError):
    """An operation was called in the wrong train/eval mode."""


class SoFGAN(Module):
    """Parameters are grouped as ``phi_*``/``enc``/``dec*``/``head_*`` (generator),
    ``traj_*``/``theta_*`` (CVAE, absent when ``use_cvae`` is off) and
    ``disc_*``/``psi`` (discriminator)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        e = c.embed_dim
        rep_dim = 4 * c.m_bins
        self.phi_rel = Linear(2, e, rng)
        self.phi_force = Linear(2, e, rng)
        self.phi_rep = Linear(rep_dim, e, rng)
        self.phi_goal = Linear(2, e, rng)
        self.enc = LSTMCell((3 if c.use_cvae else 4) * e, c.enc_hidden, rng)
        init_in = c.enc_hidden + c.noise_dim + (e if c.use_cvae else 0)
        self.dec_init = MLP((init_in, c.dec_hidden), rng, activate_last=True)
        self.dec_embed = Linear(2, e, rng)
        self.dec = LSTMCell(e, c.dec_hidden, rng)
        self.head_rel = Linear(c.dec_hidden, 2, rng)
        self.head_force = Linear(c.dec_hidden, 2, rng)
        if c.use_cvae:
            self.traj_embed = Linear(2, e, rng)
            self.traj_enc = LSTMCell(e, c.enc_hidden, rng)
            self.traj_code = Linear(c.enc_hidden, c.code_dim, rng)
            self.theta_g = MLP(c.theta_g_dims, rng, activate_last=True)
            self.theta_e = MLP(c.theta_e_dims, rng)
            self.theta_d = MLP(c.theta_d_dims, rng)
        self.disc_embed = Linear(2, e, rng)
        self.disc_enc = LSTMCell(e, c.enc_hidden, rng)
        self.psi = MLP(c.psi_dims, rng)

    # --- parameter groups -------------------------------------------------

    def generator_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if not name.startswith(("disc_", "psi."))]

    def discriminator_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if name.startswith(("disc_", "psi."))]

    @property
    def dtype(self):
        return self.phi_rel.weight.value.dtype

    def _const(self, x) -> Tensor:
        return nd.constant(x, dtype=self.dtype)

    # --- generator ----------------------------------------------------------

    def encode_observation(self, x_rel, f_total, rep, goal_term=None) -> Tensor:
        """LSTM context (B, enc_hidden) from 8-step features.

        ``rep`` is the flattened representation (B, 8, 4m). ``goal_term`` is the
        per-step attractive force (B, 8, 2) and must be given exactly when the
        CVAE is disabled.
        """
        features = {"x_rel_obs": x_rel, "f_total_obs": f_total, "rep": rep}
        for name, value in features.items():
            if value is None:
                raise ValueError(f"missing feature {name}")
        if self.config.use_cvae == (goal_term is not None):
            raise ValueError("goal_term is required without the CVAE and unused with it")
        x_rel, f_total, rep = (np.asarray(v, dtype=self.dtype) for v in (x_rel, f_total, rep))
        if x_rel.shape[1] != OBS_LEN or rep.shape[-1] != 4 * self.config.m_bins:
            raise ValueError(f"expected {OBS_LEN} steps and {4 * self.config.m_bins} rep values, "
                             f"got {x_rel.shape} and {rep.shape}")
        batch = x_rel.shape[0]
        h = self._const(np.zeros((batch, self.config.enc_hidden)))
        c = h
        fused = self.enc.fused()
        for t in range(OBS_LEN):
            parts = [
                self.phi_rel(self._const(x_rel[:, t])),
                self.phi_force(self._const(f_total[:, t])),
                self.phi_rep(self._const(rep[:, t])),
            ]
            if goal_term is not None:
                parts.append(self.phi_goal(self._const(np.asarray(goal_term)[:, t])))
            h, c = self.enc(nd.concat(parts, axis=1), h, c, fused)
        return h

    def generate(self, context: Tensor, goal: Tensor | None, noise, last_rel) -> tuple[Tensor, Tensor]:
        """Roll the decoder out for 12 steps.

        ``goal`` is the predicted goal relative to the last observed position
        (None without the CVAE). Returns displacements and forces, each (B, 12, 2).
        """
        parts = [context, self._const(noise)]
        if self.config.use_cvae:
            if goal is None:
                raise ValueError("the CVAE model needs a goal to generate")
            parts.append(self.phi_goal(goal))
        h = self.dec_init(nd.concat(parts, axis=1))
        c = self._const(np.zeros(h.shape))
        fused = self.dec.fused()
        step_in = self.dec_embed(self._const(last_rel))
        rels, forces = [], []
        for _ in range(PRED_LEN):
            h, c = self.dec(step_in, h, c, fused)
            rel = self.head_rel(h)
            rels.append(rel)
            forces.append(self.head_force(h))
            step_in = self.dec_embed(rel)
        return nd.stack(rels, axis=1), nd.stack(forces, axis=1)

    # --- CVAE ---------------------------------------------------------------

    def encode_trajectory(self, x_r_obs) -> Tensor:
        """Compressed code (B, code_dim) of the observed positions relative to the first one."""
        x_r_obs = np.asarray(x_r_obs, dtype=self.dtype)
        batch = x_r_obs.shape[0]
        h = self._const(np.zeros((batch, self.config.enc_hidden)))
        c = h
        fused = self.traj_enc.fused()
        for t in range(OBS_LEN):
            h, c = self.traj_enc(self.traj_embed(self._const(x_r_obs[:, t])), h, c, fused)
        return self.traj_code(h)

    def cvae_train_forward(self, code: Tensor, g_r_gt, epsilon):
        """Posterior pass. ``epsilon`` is (B, z_dim) or (B, k, z_dim); with k samples the
        outputs z and goals have B*k rows ordered pedestrian-major.
        Returns (mu, log_sigma, z, g_r_pred)."""
        if not self.training:
            raise ModeError("cvae_train_forward is a training-mode operation")
        zd = self.config.z_dim
        stats = self.theta_e(nd.concat([self.theta_g(self._const(g_r_gt)), code], axis=1))
        mu, log_sigma = stats[:, :zd], stats[:, zd:]
        eps = np.asarray(epsilon, dtype=self.dtype)
        if eps.ndim == 3:
            k = eps.shape[1]
            z = nd.reparameterize(nd.repeat_rows(mu, k), nd.repeat_rows(log_sigma, k), eps.reshape(-1, zd))
            code = nd.repeat_rows(code, k)
        else:
            z = nd.reparameterize(mu, log_sigma, eps)
        g_pred = self.theta_d(nd.concat([z, code], axis=1))
        return mu, log_sigma, z, g_pred

    def cvae_test_sample(self, code: Tensor, alpha: float, epsilon) -> Tensor:
        """Prior pass with z ~ N(0, alpha I); ``epsilon`` is standard normal (B, z_dim)."""
        z = self._const(np.sqrt(alpha) * np.asarray(epsilon, dtype=self.dtype))
        return self.theta_d(nd.concat([z, code], axis=1))

    # --- discriminator ------------------------------------------------------

    def discriminate(self, traj_rel) -> Tensor:
        """Realness score in (0, 1) for each (20, 2) relative trajectory; returns (B,)."""
        traj = traj_rel if isinstance(traj_rel, Tensor) else self._const(traj_rel)
        if traj.ndim != 3 or traj.shape[1] != SEQ_LEN or traj.shape[2] != 2:
            raise ValueError(f"discriminator expects (B, {SEQ_LEN}, 2), got {traj.shape}")
        batch = traj.shape[0]
        h = self._const(np.zeros((batch, self.config.enc_hidden)))
        c = h
        fused = self.disc_enc.fused()
        for t in range(SEQ_LEN):
            h, c = self.disc_enc(self.disc_embed(traj[:, t]), h, c, fused)
        return nd.sigmoid(self.psi(h))[:, 0]


def full_relative(x_rel_obs, y_rel: Tensor, dtype) -> Tensor:
    """Observed steps followed by predicted ones, (B, 20, 2)."""
    obs = nd.constant(np.asarray(x_rel_obs), dtype=dtype)
    return nd.concat([obs, y_rel], axis=1)


def integrate_force_stream(forces: Tensor, last_rel, dtype) -> Tensor:
    """Per-step displacement of the force-driven trajectory: ``v_t = v_{t-1} + F_t``
    starting from the last observed step."""
    v = nd.constant(np.asarray(last_rel), dtype=dtype)
    steps = []
    for t in range(forces.shape[1]):
        v = nd.add(v, forces[:, t])
        steps.append(v)
    return nd.stack(steps, axis=1)


# --- checkpoints ----------------------------------------------------------------

_TUPLE_FIELDS = ("psi_dims", "theta_g_dims", "theta_e_dims", "theta_d_dims")


def _config_records(config: ModelConfig) -> dict[str, np.ndarray]:
    out = {}
    for name, value in config.to_dict().items():
        if name == "generator_loss":
            value = GENERATOR_LOSSES.index(value)
        out[f"meta.{name}"] = np.asarray(value, dtype=float)
    return out


def _config_from_records(records: dict[str, np.ndarray]) -> ModelConfig:
    values = {}
    for name, default in ModelConfig().to_dict().items():
        key = f"meta.{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint lacks config entry {key!r}")
        raw = records[key]
        if name in _TUPLE_FIELDS:
            values[name] = tuple(int(v) for v in raw)
        elif name == "generator_loss":
            values[name] = GENERATOR_LOSSES[int(raw.item())]
        else:
            values[name] = type(default)(raw.item())
    return ModelConfig(**values)


def save_model(model: SoFGAN, path) -> None:
    records = _config_records(model.config)
    records.update(sorted(model.state_dict().items()))
    write_checkpoint(path, records)


def load_model(path, dtype=np.float32) -> SoFGAN:
    records = read_checkpoint(path)
    model = SoFGAN(_config_from_records(records))
    model.load_state_dict({k: v for k, v in records.items() if not k.startswith("meta.")})
    return model.astype(dtype).eval()

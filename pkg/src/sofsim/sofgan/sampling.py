"""Multimodal sampling: oversampling with a tape-free forward pass and k-means selection."""
from __future__ import annotations

import warnings

import numpy as np

from .. import ndiff as nd
from ..data import FeatureArrays
from ..ndiff import MLP, Linear, LSTMCell
from ..prediction import PredictionSet
from .model import SoFGAN

# --- k-means ----------------------------------------------------------------------


def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(A, n, 2) x (A, k, 2) -> (A, n, k) squared distances."""
    diff = points[:, :, None, :] - centers[:, None, :, :]
    return np.einsum("ankd,ankd->ank", diff, diff)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding, batched over the leading axis. Returns center indices (A, k).

    When every point coincides with a chosen center the next pick is index 0.
    """
    a, n, _ = points.shape
    rows = np.arange(a)
    chosen = np.empty((a, k), dtype=np.int64)
    chosen[:, 0] = rng.integers(n, size=a)
    d2 = _sq_dist(points, points[rows, chosen[:, 0]][:, None])[..., 0]
    for j in range(1, k):
        total = d2.sum(axis=1)
        cum = np.cumsum(d2, axis=1)
        u = rng.random(a) * total
        pick = np.minimum((cum <= u[:, None]).sum(axis=1), n - 1)
        pick[total <= 0] = 0
        chosen[:, j] = pick
        d2 = np.minimum(d2, _sq_dist(points, points[rows, pick][:, None])[..., 0])
    return chosen


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50):
    """Lloyd iterations on (A, n, 2) point sets. Returns (labels (A, n), centroids (A, k, 2)).

    Empty clusters keep their previous centroid.
    """
    points = np.asarray(points, dtype=float)
    a, n, _ = points.shape
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rows = np.arange(a)[:, None]
    centers = points[rows, kmeans_plus_plus(points, k, rng)]
    labels = np.argmin(_sq_dist(points, centers), axis=2)
    for _ in range(max_iter):
        onehot = labels[..., None] == np.arange(k)
        counts = onehot.sum(axis=1)
        sums = np.einsum("ank,and->akd", onehot.astype(float), points)
        centers = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], centers)
        new = np.argmin(_sq_dist(points, centers), axis=2)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centers


def kmeans_select(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50) -> np.ndarray:
    """Indices (A, k) of one representative per cluster: the member nearest its
    centroid, or the nearest point overall when the cluster ended up empty."""
    labels, centers = kmeans(points, k, rng, max_iter)
    d2 = _sq_dist(np.asarray(points, dtype=float), centers)
    member = labels[..., None] == np.arange(k)
    masked = np.where(member, d2, np.inf)
    pick = np.argmin(masked, axis=1)
    empty = ~member.any(axis=1)
    return np.where(empty, np.argmin(d2, axis=1), pick)


# --- folded float32 forward -----------------------------------------------------------


def _lin(layer: Linear):
    return layer.weight.value.astype(np.float64), layer.bias.value.astype(np.float64)


def _cell(cell: LSTMCell):
    w = np.concatenate([getattr(cell, f"w_{g}").value for g in "ifgo"], axis=0).T.astype(np.float64)
    b = np.concatenate([getattr(cell, f"b_{g}").value for g in "ifgo"]).astype(np.float64)
    return w[: cell.d_in], w[cell.d_in :], b


def _mlp(mlp: MLP):
    """Layers as (W, b, relu) with eval-mode batch norm folded into W and b."""
    out = []
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        w, b = _lin(layer)
        active = i < last or mlp.activate_last
        if active and mlp.batchnorm:
            scale, shift = (x.astype(np.float64) for x in mlp.norms[i].folded())
            w, b = w * scale, b * scale + shift
        out.append((w, b, active))
    return out


def _run_mlp(layers, x):
    for w, b, active in layers:
        x = x @ w + b
        if active:
            np.maximum(x, 0, out=x)
    return x


def _lstm_gates(z: np.ndarray, c: np.ndarray, d: int, scale: np.ndarray):
    """Gate update from pre-activations ``z`` (n, 4d); sigmoid as 0.5 * (1 + tanh(x/2))."""
    z *= scale
    np.tanh(z, out=z)
    sig = z[:, :d], z[:, d : 2 * d], z[:, 3 * d :]
    for part in sig:
        part *= 0.5
        part += 0.5
    i, f, o = sig
    g = z[:, 2 * d : 3 * d]
    c = f * c + i * g
    return o * np.tanh(c), c


class InferenceEngine:
    """Eval-mode forward pass of a :class:`SoFGAN` on plain arrays.

    Batch norm is folded into the adjacent Linear layers, each feature
    embedding into the LSTM input weights, and the decoder's feedback of its
    own displacement into the recurrent matrix. Matches the tape forward in
    eval mode up to float32 rounding.
    """

    def __init__(self, model: SoFGAN, dtype=np.float32, chunk_rows: int = 16384):
        self.config = cfg = model.config
        self.dtype = dtype
        self.chunk_rows = chunk_rows
        f = lambda x: np.ascontiguousarray(x, dtype=dtype)  # noqa: E731

        # observation encoder: raw per-step features -> gates
        wx, wh, b = _cell(model.enc)
        embeds = [model.phi_rel, model.phi_force, model.phi_rep] + ([] if cfg.use_cvae else [model.phi_goal])
        blocks, offset = [], 0
        bias = b.copy()
        for layer in embeds:
            w, bb = _lin(layer)
            part = wx[offset : offset + w.shape[1]]
            blocks.append(w @ part)
            bias += bb @ part
            offset += w.shape[1]
        self.enc_wu, self.enc_wh, self.enc_b = f(np.vstack(blocks)), f(wh), f(bias)

        if cfg.use_cvae:
            wx, wh, b = _cell(model.traj_enc)
            we, be = _lin(model.traj_embed)
            self.traj_wu, self.traj_wh, self.traj_b = f(we @ wx), f(wh), f(be @ wx + b)
            self.code_w, self.code_b = (f(x) for x in _lin(model.traj_code))
            layers = _mlp(model.theta_d)
            w0, b0, act0 = layers[0]
            zd = cfg.z_dim
            self.goal_wz, self.goal_wc, self.goal_b0, self.goal_act0 = f(w0[:zd]), f(w0[zd:]), f(b0), act0
            self.goal_rest = [(f(w), f(bb), a) for w, bb, a in layers[1:]]

        # decoder initial state
        (w, b, _), = _mlp(model.dec_init)
        h_dim = cfg.enc_hidden
        self.init_wc = f(w[:h_dim])
        self.init_wn = f(w[h_dim : h_dim + cfg.noise_dim])
        init_b = b.copy()
        if cfg.use_cvae:
            wg, bg = _lin(model.phi_goal)
            part = w[h_dim + cfg.noise_dim :]
            self.init_wg = f(wg @ part)
            init_b += bg @ part
        self.init_b = f(init_b)

        # decoder with folded feedback
        wx, wh, b = _cell(model.dec)
        we, be = _lin(model.dec_embed)
        wa, ba = _lin(model.head_rel)
        wf, bf = _lin(model.head_force)
        self.dec_first_w = f(we @ wx)
        self.dec_first_b = f(be @ wx + b)
        self.dec_wh = f(wh)
        self.dec_w = f(wh + wa @ we @ wx)
        self.dec_b = f(ba @ we @ wx + be @ wx + b)
        self.heads_w = f(np.hstack([wa, wf]))
        self.heads_b = f(np.concatenate([ba, bf]))
        self.dec_scale = self._scale(cfg.dec_hidden)

    def _scale(self, d):
        s = np.full(4 * d, 0.5, dtype=self.dtype)
        s[2 * d : 3 * d] = 1.0
        return s

    def _encode(self, steps: np.ndarray, wu, wh, b) -> np.ndarray:
        n, t, _ = steps.shape
        d = wh.shape[0]
        h = np.zeros((n, d), dtype=self.dtype)
        c = np.zeros_like(h)
        proj = steps.reshape(n * t, -1) @ wu
        proj = proj.reshape(n, t, -1) + b
        scale = self._scale(d)
        for s in range(t):
            h, c = _lstm_gates(proj[:, s] + h @ wh, c, d, scale)
        return h

    def context(self, feats: FeatureArrays) -> np.ndarray:
        parts = [feats.x_rel_obs, feats.f_total, feats.rep] + ([] if self.config.use_cvae else [feats.f_goal])
        steps = np.concatenate(parts, axis=2).astype(self.dtype)
        return self._encode(steps, self.enc_wu, self.enc_wh, self.enc_b)

    def trajectory_code(self, feats: FeatureArrays) -> np.ndarray:
        h = self._encode(feats.x_r_obs.astype(self.dtype), self.traj_wu, self.traj_wh, self.traj_b)
        return h @ self.code_w + self.code_b

    def goals(self, code_part: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Goal decoder; ``code_part`` is the code already multiplied into layer one."""
        x = z @ self.goal_wz + code_part
        if self.goal_act0:
            np.maximum(x, 0, out=x)
        return _run_mlp(self.goal_rest, x)

    def decode(self, ctx_part, noise, goal_rel, last_rel):
        """Roll out 12 steps; returns (displacements, forces), each (n, 12, 2)."""
        x = ctx_part + noise @ self.init_wn
        if goal_rel is not None:
            x += goal_rel @ self.init_wg
        np.maximum(x, 0, out=x)
        h = x
        d = h.shape[1]
        c = np.zeros_like(h)
        hs = np.empty((12, h.shape[0], d), dtype=self.dtype)
        z = last_rel @ self.dec_first_w + self.dec_first_b + h @ self.dec_wh
        for t in range(12):
            h, c = _lstm_gates(z, c, d, self.dec_scale)
            hs[t] = h
            if t < 11:
                z = h @ self.dec_w + self.dec_b
        out = (hs.reshape(-1, d) @ self.heads_w + self.heads_b).reshape(12, -1, 4).transpose(1, 0, 2)
        return out[..., :2], out[..., 2:]

    def sample(self, feats: FeatureArrays, n_samples: int, rng: np.random.Generator,
               alpha: float | None = None) -> dict[str, np.ndarray]:
        """Draw ``n_samples`` futures per pedestrian with fresh noise and goal draws.

        Returns arrays ``y_rel``/``forces`` (P, S, 12, 2) and ``goals`` (P, S, 2) or None.
        """
        cfg = self.config
        alpha = cfg.alpha_test if alpha is None else alpha
        p, s = len(feats), n_samples
        dt = self.dtype
        noise = rng.standard_normal((p * s, cfg.noise_dim)).astype(dt)
        eps = rng.standard_normal((p * s, cfg.z_dim)).astype(dt) if cfg.use_cvae else None
        ctx = self.context(feats) @ self.init_wc + self.init_b
        if cfg.use_cvae:
            code_part = self.trajectory_code(feats) @ self.goal_wc + self.goal_b0
            anchor = feats.x_r_obs[:, -1].astype(dt)
        last_rel = feats.x_rel_obs[:, -1].astype(dt)
        y_rel = np.empty((p * s, 12, 2), dtype=dt)
        forces = np.empty_like(y_rel)
        goals = np.empty((p * s, 2), dtype=dt) if cfg.use_cvae else None
        agent = np.repeat(np.arange(p), s)
        for lo in range(0, p * s, self.chunk_rows):
            sl = slice(lo, min(lo + self.chunk_rows, p * s))
            who = agent[sl]
            goal_rel = None
            if cfg.use_cvae:
                z = eps[sl] * dt(np.sqrt(alpha))
                goals[sl] = self.goals(code_part[who], z)
                goal_rel = goals[sl] - anchor[who]
            y_rel[sl], forces[sl] = self.decode(ctx[who], noise[sl], goal_rel, last_rel[who])
        out = {"y_rel": y_rel.reshape(p, s, 12, 2), "forces": forces.reshape(p, s, 12, 2)}
        out["goals"] = None if goals is None else goals.reshape(p, s, 2)
        return out


def tape_sample(model: SoFGAN, feats: FeatureArrays, noise: np.ndarray, epsilon: np.ndarray | None,
                alpha: float | None = None) -> dict[str, np.ndarray]:
    """Reference eval-mode sampling through the tape; ``noise`` is (P*S, noise_dim)
    and ``epsilon`` (P*S, z_dim), both agent-major."""
    cfg = model.config
    alpha = cfg.alpha_test if alpha is None else alpha
    model.eval()
    p = len(feats)
    s = noise.shape[0] // p
    goal_term = None if cfg.use_cvae else feats.f_goal
    ctx = nd.repeat_rows(model.encode_observation(feats.x_rel_obs, feats.f_total, feats.rep, goal_term), s)
    goal_rel, goals = None, None
    if cfg.use_cvae:
        code = nd.repeat_rows(model.encode_trajectory(feats.x_r_obs), s)
        g = model.cvae_test_sample(code, alpha, epsilon)
        goals = g.value.reshape(p, s, 2)
        goal_rel = nd.sub(g, nd.constant(np.repeat(feats.x_r_obs[:, -1], s, axis=0), dtype=model.dtype))
    y_rel, forces = model.generate(ctx, goal_rel, noise, np.repeat(feats.x_rel_obs[:, -1], s, axis=0))
    return {"y_rel": y_rel.value.reshape(p, s, 12, 2), "forces": forces.value.reshape(p, s, 12, 2), "goals": goals}


def select_samples(samples: dict, idx: np.ndarray) -> dict:
    rows = np.arange(idx.shape[0])[:, None]
    return {k: (None if v is None else v[rows, idx]) for k, v in samples.items()}


def predict_multimodal(
    model: SoFGAN | InferenceEngine,
    feats: FeatureArrays,
    oversample: int | None = None,
    k: int | None = None,
    seed: int = 0,
    alpha: float | None = None,
    chunk_agents: int = 64,
) -> PredictionSet:
    """Oversample futures per pedestrian and keep one per k-means cluster of endpoints.

    Agents are processed ``chunk_agents`` at a time to bound memory; both
    random streams continue across chunks.
    """
    engine = model if isinstance(model, InferenceEngine) else InferenceEngine(model)
    oversample = engine.config.oversample if oversample is None else oversample
    k = engine.config.k_samples if k is None else k
    if oversample < 1 or k < 1:
        raise ValueError("oversample and k must be positive")
    if oversample < k:
        warnings.warn(f"oversample={oversample} < k={k}: returning all samples unclustered", stacklevel=2)
    sample_seq, cluster_seq = np.random.SeedSequence(seed).spawn(2)
    sample_rng, cluster_rng = np.random.default_rng(sample_seq), np.random.default_rng(cluster_seq)
    parts = []
    for lo in range(0, len(feats), chunk_agents):
        sub = feats.subset(slice(lo, lo + chunk_agents))
        samples = engine.sample(sub, oversample, sample_rng, alpha)
        if oversample >= k:
            endpoints = samples["y_rel"].sum(axis=2).astype(float)
            samples = select_samples(samples, kmeans_select(endpoints, k, cluster_rng))
        parts.append(samples)
    if not parts:
        shape = (0, min(k, oversample), 12, 2)
        parts = [{"y_rel": np.zeros(shape), "forces": np.zeros(shape),
                  "goals": np.zeros(shape[:2] + (2,)) if engine.config.use_cvae else None}]
    joined = {name: (None if parts[0][name] is None else np.concatenate([p[name] for p in parts]))
              for name in parts[0]}
    return PredictionSet.from_features(feats, joined["y_rel"], joined["forces"], joined["goals"])

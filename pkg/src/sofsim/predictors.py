"""Uniform predictor interface used by the command line and the streaming server."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baselines import CVM, CvmConfig, concat_predictions, cvm_predict, default_goals, sfm_simulate
from .data import FRAME_DT, PRED_LEN, FeatureArrays, SceneBatch, _context_velocities
from .prediction import PredictionSet
from .sfm import SfmParams
from .sofgan import InferenceEngine, load_model, predict_multimodal

PREDICTORS = ("gt", "cvm", "cvm20", "sfm", "sofgan")


@dataclass(frozen=True)
class SceneContext:
    """Every agent of the last observed frame of one scene, with velocities."""

    ids: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    obstacles: tuple = ()

    @classmethod
    def from_scene(cls, scene: SceneBatch) -> "SceneContext":
        vel = _context_velocities(scene.context_ids, scene.context_pos, scene.dt)[-1]
        return cls(scene.context_ids[-1], scene.context_pos[-1], vel, tuple(scene.obstacles))


class Predictor:
    name = "base"
    k = 1

    def __call__(self, feats: FeatureArrays, contexts: Sequence[SceneContext]) -> PredictionSet:
        raise NotImplementedError


class GroundTruthPredictor(Predictor):
    """Returns the recorded future; an oracle for checking the evaluation pipeline."""

    name = "gt"

    def __call__(self, feats, contexts):
        if np.isnan(feats.x_rel_pred).any():
            raise ValueError("the ground-truth predictor needs recorded futures")
        return PredictionSet.from_features(feats, feats.x_rel_pred[:, None])


class CvmPredictor(Predictor):
    def __init__(self, config: CvmConfig = CVM, seed: int = 0):
        self.config, self.seed = config, seed
        self.k = config.samples
        self.name = "cvm" if config.samples == 1 else f"cvm{config.samples}"

    def __call__(self, feats, contexts):
        return cvm_predict(feats, self.config, self.seed)


class SfmPredictor(Predictor):
    """Simulates every agent of each scene's last observed frame and reports the targets."""

    name = "sfm"

    def __init__(self, params: SfmParams | None = None, dt: float = FRAME_DT):
        self.params = params or SfmParams()
        self.dt = dt

    def __call__(self, feats, contexts):
        parts = []
        for s in np.unique(feats.scene):
            sub = feats.subset(np.flatnonzero(feats.scene == s))
            ctx = contexts[int(s)]
            row = {agent: r for r, agent in enumerate(np.asarray(ctx.ids).tolist())}
            targets = [row[int(p)] for p in sub.ped_id]
            traj, _, _ = sfm_simulate(ctx.pos, ctx.vel, default_goals(ctx.pos, ctx.vel), self.params,
                                      ctx.obstacles, PRED_LEN, self.dt)
            ours = np.concatenate([ctx.pos[targets][None], traj[:, targets]], axis=0)
            y_rel = np.diff(ours, axis=0).transpose(1, 0, 2)
            parts.append(PredictionSet.from_features(sub, y_rel[:, None]))
        out = concat_predictions(parts)
        return PredictionSet(out.ped_ids, np.unique(feats.scene)[out.scene], out.last_obs, out.last_rel, out.y_rel)


class SofganPredictor(Predictor):
    name = "sofgan"

    def __init__(self, model, k: int | None = None, oversample: int | None = None, seed: int = 0):
        self.engine = InferenceEngine(model)
        self.k = model.config.k_samples if k is None else k
        self.oversample = model.config.oversample if oversample is None else oversample
        self.seed = seed
        self.calls = 0

    def __call__(self, feats, contexts):
        # a fresh, reproducible stream per call
        seed = [self.seed, self.calls]
        self.calls += 1
        return predict_multimodal(self.engine, feats, self.oversample, self.k, seed=seed)


def make_predictor(name: str, checkpoint=None, k: int | None = None, oversample: int | None = None, seed: int = 0,
                   params: SfmParams | None = None, angle_std: float = 25.0) -> Predictor:
    if name == "gt":
        return GroundTruthPredictor()
    if name == "cvm":
        return CvmPredictor(CvmConfig(1, angle_std), seed)
    if name == "cvm20":
        return CvmPredictor(CvmConfig(20 if k is None else k, angle_std), seed)
    if name == "sfm":
        return SfmPredictor(params)
    if name == "sofgan":
        if checkpoint is None:
            raise ValueError("the sofgan predictor needs a checkpoint")
        return SofganPredictor(load_model(checkpoint), k, oversample, seed)
    raise ValueError(f"unknown predictor {name!r}; choose from {PREDICTORS}")


def predict_scenes(predictor: Predictor, scenes: Sequence[SceneBatch]) -> tuple[PredictionSet, FeatureArrays]:
    feats = FeatureArrays.from_batches(scenes)
    return predictor(feats, [SceneContext.from_scene(s) for s in scenes]), feats

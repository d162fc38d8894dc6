"""Estimator-style front end: configure once, ``fit`` a recording, then
``predict`` poses or joint angles at arbitrary times.

The class follows the scikit-learn parameter protocol (constructor arguments
stored verbatim, fitted state in trailing-underscore attributes,
``get_params``/``set_params``) so it drops into that ecosystem's tooling,
without importing it.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import body, evaluation, objective, recording as rec_mod


class NotFittedError(RuntimeError):
    """``fit`` has not run yet."""


class KinematicFusion:
    """Joint fit of body trajectory, shape, camera orientation, and sensor
    calibrations from one recording.

    Parameters mirror :class:`~kinefuse.objective.OptimizerConfig` and
    :class:`~kinefuse.objective.LossWeights`; anything left at None uses the
    staged-schedule defaults. ``mode`` selects ``'fusion'`` (video + sensors)
    or ``'video'``.
    """

    def __init__(self, mode="fusion", steps=20000, batch_size=500, seed=0,
                 calib_activation_step=10000, anneal_start=10000,
                 anneal_end=15000, hidden_layers=3, hidden_width=96,
                 frequency_bands=8, weights=None, optimizer=None):
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.calib_activation_step = calib_activation_step
        self.anneal_start = anneal_start
        self.anneal_end = anneal_end
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.frequency_bands = frequency_bands
        self.weights = weights
        self.optimizer = optimizer

    # -- sklearn parameter protocol -----------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for KinematicFusion; "
                    f"valid parameters: {sorted(valid)}"
                )
            setattr(self, key, value)
        return self

    # -- configuration assembly ----------------------------------------------

    def _config(self):
        if self.optimizer is not None:
            cfg = self.optimizer
        else:
            cfg = objective.OptimizerConfig(
                steps=self.steps,
                batch_size=self.batch_size,
                seed=self.seed,
                calib_activation_step=self.calib_activation_step,
                hidden_layers=self.hidden_layers,
                hidden_width=self.hidden_width,
                frequency_bands=self.frequency_bands,
            )
        if self.weights is not None:
            w = self.weights
        else:
            w = objective.LossWeights(anneal_start=self.anneal_start,
                                      anneal_end=self.anneal_end)
        return cfg, w

    # -- estimator surface -----------------------------------------------------

    def fit(self, recording, tree=None, progress=None):
        """Run the staged optimization on ``recording``.

        ``recording`` is a :class:`~kinefuse.recording.Recording` (or a path
        to a manifest). ``tree`` defaults to the model the recording names.
        """
        if isinstance(recording, (str, bytes)):
            recording = rec_mod.load_recording(recording, mode=self.mode)
        if tree is None:
            tree = recording.tree()
        cfg, w = self._config()
        self.result_ = objective.optimize(recording, tree, config=cfg,
                                           weights=w, mode=self.mode,
                                           progress=progress)
        self.tree_ = tree
        self.model_ = self.result_.model(tree)
        self.duration_ = recording.duration
        return self

    def _require_fit(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before predicting")

    def predict(self, times):
        """Pose vectors (N, D) at recording times."""
        self._require_fit()
        times = self._check_times(times)
        return self.model_.theta(times)

    def predict_joint_angles(self, times, joints):
        """Joint angle matrix (N, len(joints)) in degrees."""
        self._require_fit()
        times = self._check_times(times)
        return self.model_.joint_angles(times, joints)

    def predict_markers(self, times):
        self._require_fit()
        return self.model_.markers(self._check_times(times))

    def predict_camera(self, times):
        self._require_fit()
        return self.model_.camera_rot(self._check_times(times))

    def score(self, recording=None):
        """Negative mean 3D keypoint residual (m); higher is better, so the
        estimator composes with model-selection utilities."""
        self._require_fit()
        if recording is None:
            res = self.result_.residuals
        else:
            res = evaluation.compute_residuals(self.model_, recording)
        if res.keypoint_cm is None:
            raise ValueError("recording has no keypoints to score against")
        return -res.keypoint_cm / 100.0

    def _check_times(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        if not np.all(np.isfinite(times)):
            raise ValueError("evaluation times must be finite")
        return times

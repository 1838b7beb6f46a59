"""Expectation-maximization for the normal mixture, with an optional bias step."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bias import BiasField, DEFAULT_CONTROL_SPACING, compute_residuals, correct_channels, evaluate_bias, fit_bspline
from .errors import InputError
from .mixture import (
    DEFAULT_FLOOR,
    MixtureModel,
    NormalComponent,
    ResponsibilityStack,
    _posteriors,
    _weighted_moments,
    floor_covariance,
)
from .volume import MultichannelVolume

__all__ = ["EmConfig", "IterationRecord", "EmResult", "em_fit"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 100
    tolerance: float = 1e-6
    bias_correction: bool = False
    covariance_floor: float = DEFAULT_FLOOR
    rng_seed: int = 0
    bias_spacing: float = DEFAULT_CONTROL_SPACING
    bias_order: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise InputError("tolerance must be positive")
        if self.covariance_floor < 0:
            raise InputError("covariance floor must be non-negative")


@dataclass
class IterationRecord:
    iteration: int
    log_likelihood: float
    max_mean_delta: float = 0.0
    max_cov_delta: float = 0.0
    frozen: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "log_likelihood": self.log_likelihood,
            "max_mean_delta": self.max_mean_delta,
            "max_cov_delta": self.max_cov_delta,
            "frozen": list(self.frozen),
        }


@dataclass
class EmResult:
    model: MixtureModel
    responsibilities: ResponsibilityStack
    bias: Optional[BiasField]
    log: list
    corrected: MultichannelVolume
    converged: bool = False
    warnings: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.model, self.responsibilities, self.bias, self.log))

    @property
    def log_likelihoods(self) -> list[float]:
        return [r.log_likelihood for r in self.log]


def _m_step(model: MixtureModel, feats: np.ndarray, gamma: np.ndarray, eps: float):
    c = feats.shape[1]
    comps, frozen = [], []
    nk = gamma.sum(axis=1)
    for k, comp in enumerate(model.components):
        if nk[k] < c + 1:
            comps.append(comp)
            frozen.append(k)
            continue
        mean, cov = _weighted_moments(feats, gamma[k])
        comps.append(NormalComponent(mean, floor_covariance(cov, eps), comp.tissue_id))
    # per-voxel priors come from outside (MRF stage) and stay fixed
    priors = model.priors if model.per_voxel else nk / nk.sum()
    return MixtureModel(tuple(comps), priors), frozen


def em_fit(mv: MultichannelVolume, model: MixtureModel, cfg: EmConfig = EmConfig()) -> EmResult:
    """Fit ``model`` to ``mv``.

    Each iteration runs the E-step, then (optionally) re-estimates the bias
    field from the log residuals and corrects the data, then the M-step.
    Iteration stops once the relative change of the observed-data
    log-likelihood drops below ``cfg.tolerance``.
    """
    if model.n_channels != mv.n_channels:
        raise InputError(f"model has {model.n_channels} channels, volume has {mv.n_channels}")
    data = mv
    bias = None
    records, warnings = [], []
    prev_ll = None
    converged = False
    for it in range(1, cfg.max_iterations + 1):
        gamma, norm = _posteriors(model, data)
        ll = float(np.sum(norm))
        if prev_ll is not None and abs(ll - prev_ll) <= cfg.tolerance * abs(prev_ll):
            records.append(IterationRecord(it, ll))
            converged = True
            break
        if prev_ll is not None and ll < prev_ll and not cfg.bias_correction:
            log.debug("log-likelihood decreased at iteration %d: %r -> %r", it, prev_ll, ll)
        prev_ll = ll
        if cfg.bias_correction:
            resp = ResponsibilityStack.from_masked(data, gamma)
            # fitting the residual of the raw data is the cumulative correction in one step
            res = compute_residuals(mv, model, resp)
            bias = fit_bspline(res, cfg.bias_spacing, cfg.bias_order)
            fields = evaluate_bias(bias, mv.geometry)
            centre = [float(f.flat[mv.mask_index].mean()) for f in fields]
            bias = bias.shifted([-m for m in centre])
            data = correct_channels(mv, bias)
        feats = data.features()
        new_model, frozen = _m_step(model, feats, gamma, cfg.covariance_floor)
        for k in frozen:
            msg = f"iteration {it}: component {k + 1} has too little mass and was frozen"
            if msg not in warnings:
                warnings.append(msg)
        records.append(
            IterationRecord(
                it,
                ll,
                float(np.abs(new_model.means - model.means).max()),
                float(np.abs(new_model.covariances - model.covariances).max()),
                frozen,
            )
        )
        model = new_model
    else:
        gamma, _ = _posteriors(model, data)
    resp = ResponsibilityStack.from_masked(data, gamma)
    return EmResult(model, resp, bias, records, data, converged, warnings)

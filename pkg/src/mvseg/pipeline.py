"""End-to-end segmentation: initialization, EM (optionally with bias), MRF
regularization, final tissue probability maps and PV resolution."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bias import DEFAULT_CONTROL_SPACING, BiasField, evaluate_bias
from .em import EmConfig, EmResult, em_fit
from .errors import InputError
from .mixture import (
    MixtureModel,
    ResponsibilityStack,
    compute_posteriors,
    init_from_priors,
    init_kmeans,
    map_labeling,
)
from .mrf import NeighborhoodSystem, TransitionModel, mrf_priors, regularize
from .pv import TissueTopology, collapse_tissues, resolve_pv
from .volume import LabelMap, MultichannelVolume, enhance_tail

__all__ = ["SegmentConfig", "SegmentResult", "run_segmentation", "fit_mixture", "transition_for"]


@dataclass(frozen=True)
class SegmentConfig:
    n_classes: int = 3
    init: str = "kmeans"  # kmeans | manual | priors
    manual_model: Optional[MixtureModel] = None
    prior_maps: Optional[tuple] = None
    lam: float = 0.6
    neighborhood: int = 6
    penalties: Optional[np.ndarray] = None  # Potts when None
    mover: str = "swap"
    bias: bool = False
    bias_spacing: float = DEFAULT_CONTROL_SPACING
    topology: Optional[TissueTopology] = None
    seed: int = 0
    max_iterations: int = 100
    tolerance: float = 1e-6
    outer_loops: int = 1
    enhance_channel: Optional[int] = None
    enhance_percentile: float = 85.0

    def __post_init__(self):
        if self.init not in ("kmeans", "manual", "priors"):
            raise InputError(f"unknown initialization {self.init!r}")
        if self.init == "manual" and self.manual_model is None:
            raise InputError("manual initialization needs a model")
        if self.init == "priors" and not self.prior_maps:
            raise InputError("prior initialization needs probability maps")
        if self.n_classes < 1:
            raise InputError("need at least one class")
        if self.lam < 0:
            raise InputError("lambda must be non-negative")
        if self.mover not in ("swap", "expansion"):
            raise InputError(f"unknown mover {self.mover!r}")
        if self.outer_loops < 1:
            raise InputError("outer loops must be >= 1")

    def as_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "init": self.init,
            "lambda": self.lam,
            "neighborhood": self.neighborhood,
            "penalties": None if self.penalties is None else np.asarray(self.penalties).tolist(),
            "mover": self.mover,
            "bias": self.bias,
            "bias_spacing": self.bias_spacing,
            "topology": None if self.topology is None else self.topology.to_dict(),
            "seed": self.seed,
            "max_iterations": self.max_iterations,
            "tolerance": self.tolerance,
            "outer_loops": self.outer_loops,
            "enhance_channel": self.enhance_channel,
            "enhance_percentile": self.enhance_percentile,
        }


@dataclass
class SegmentResult:
    model: MixtureModel
    em: EmResult
    labels: LabelMap  # MRF-regularized component labels
    responsibilities: ResponsibilityStack  # final component TPMs
    tissue_maps: ResponsibilityStack  # after PV resolution / tissue collapse
    tissue_labels: LabelMap
    bias: Optional[BiasField]
    bias_fields: list  # multiplicative, one ScalarVolume per channel, 0 outside the mask
    corrected: MultichannelVolume
    timings: dict = field(default_factory=dict)
    mrf_log: list = field(default_factory=list)


def transition_for(cfg: SegmentConfig, k: int) -> TransitionModel:
    if cfg.penalties is None:
        return TransitionModel.potts(k, cfg.lam)
    tm = TransitionModel(np.asarray(cfg.penalties, dtype=np.float64), cfg.lam)
    if tm.n_labels != k:
        raise InputError(f"transition matrix is {tm.n_labels}x{tm.n_labels}, expected {k}x{k}")
    return tm


def _initial_model(mv: MultichannelVolume, cfg: SegmentConfig) -> MixtureModel:
    if cfg.init == "kmeans":
        return init_kmeans(mv, cfg.n_classes, cfg.seed)
    if cfg.init == "manual":
        model = cfg.manual_model
    else:
        model = init_from_priors(mv, cfg.prior_maps)
    if model.n_components != cfg.n_classes:
        raise InputError(f"initial model has {model.n_components} classes, expected {cfg.n_classes}")
    if model.n_channels != mv.n_channels:
        raise InputError(f"initial model has {model.n_channels} channels, volume has {mv.n_channels}")
    return model


def _tissue_labels(labels: LabelMap, maps: ResponsibilityStack, topo: Optional[TissueTopology]) -> LabelMap:
    """Hard tissue labels: pure components keep their MRF label, PV voxels take
    the most probable resolved tissue."""
    if topo is None:
        return labels
    out = np.zeros(labels.geometry.dims, dtype=np.int32)
    mask = labels.mask
    best = np.argmax(maps.maps, axis=0) + 1
    index = {t: j + 1 for j, t in enumerate(_output_tissues(topo))}
    comp_tissue = np.array([0] + [index.get(t, -1) for t in topo.components])
    mapped = comp_tissue[labels.labels]
    out[mask] = np.where(mapped[mask] > 0, mapped[mask], best[mask])
    return LabelMap(labels.geometry, out, len(index))


def _output_tissues(topo: TissueTopology) -> tuple:
    return topo.pure if topo.pv else topo.tissues


def _em_config(cfg: SegmentConfig) -> EmConfig:
    return EmConfig(
        max_iterations=cfg.max_iterations,
        tolerance=cfg.tolerance,
        bias_correction=cfg.bias,
        rng_seed=cfg.seed,
        bias_spacing=cfg.bias_spacing,
    )


def fit_mixture(mv: MultichannelVolume, cfg: SegmentConfig) -> EmResult:
    """Initialization plus EM only."""
    return em_fit(mv, _initial_model(mv, cfg), _em_config(cfg))


def run_segmentation(
    mv: MultichannelVolume, cfg: SegmentConfig = SegmentConfig(), em: Optional[EmResult] = None
) -> SegmentResult:
    """Run the whole chain on ``mv``.

    A precomputed ``em`` result (from the same volume and configuration) skips
    initialization and EM, which lets parameter sweeps reuse one fit.
    """
    timings = {}
    t0 = time.perf_counter()
    if cfg.enhance_channel is not None:
        c = cfg.enhance_channel
        if not 0 <= c < mv.n_channels:
            raise InputError(f"invalid channel index {c}")
        chans = list(mv.channels)
        chans[c] = enhance_tail(chans[c], cfg.enhance_percentile, mask=mv.mask_array)
        mv = MultichannelVolume(mv.geometry, tuple(chans), mv.mask_array)
        timings["enhance"] = time.perf_counter() - t0

    em_cfg = _em_config(cfg)
    if em is None:
        t = time.perf_counter()
        model = _initial_model(mv, cfg)
        timings["init"] = time.perf_counter() - t
        t = time.perf_counter()
        em = em_fit(mv, model, em_cfg)
        timings["em"] = time.perf_counter() - t

    ns = NeighborhoodSystem(cfg.neighborhood)
    tm = transition_for(cfg, cfg.n_classes)
    model, resp, data = em.model, em.responsibilities, em.corrected
    global_priors = model.priors
    mrf_log = []
    t = time.perf_counter()
    for loop in range(cfg.outer_loops):
        labels, energy, moves = regularize(resp, model, tm, ns, cfg.mover, return_log=True)
        mrf_log.append(
            {
                "loop": loop + 1,
                "energy": None if energy is None else energy.as_dict(),
                "moves": moves.as_dict(),
            }
        )
        if cfg.lam == 0:
            break
        with np.errstate(divide="ignore"):
            field_ = np.log(global_priors)
        pi = mrf_priors(labels, tm, ns, field_)
        voxel_model = MixtureModel(model.components, pi)
        if loop + 1 < cfg.outer_loops:
            em = em_fit(mv, voxel_model, em_cfg)
            model = MixtureModel(em.model.components, global_priors)
            data = em.corrected
            resp = em.responsibilities
        else:
            resp = compute_posteriors(voxel_model, data)
    timings["mrf"] = time.perf_counter() - t

    if cfg.lam == 0:
        labels = map_labeling(resp)

    t = time.perf_counter()
    topo = cfg.topology
    if topo is None:
        tissue_maps = resp
    elif topo.pv:
        tissue_maps = resolve_pv(resp, model, topo, data)
    else:
        tissue_maps = collapse_tissues(resp, topo)
    tissue_labels = _tissue_labels(labels, tissue_maps, topo)
    timings["pv"] = time.perf_counter() - t

    bias_fields = []
    if em.bias is not None:
        bias_fields = evaluate_bias(em.bias, mv.geometry, multiplicative=True, mask=mv.mask_array)
    timings["total"] = time.perf_counter() - t0
    return SegmentResult(
        model=model,
        em=em,
        labels=labels,
        responsibilities=resp,
        tissue_maps=tissue_maps,
        tissue_labels=tissue_labels,
        bias=em.bias,
        bias_fields=bias_fields,
        corrected=data,
        timings=timings,
        mrf_log=mrf_log,
    )

"""Partial-volume resolution: split PV-class probability between its two parent tissues."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .mixture import MixtureModel, NormalComponent, ResponsibilityStack, log_density, mahalanobis_sq
from .volume import MultichannelVolume

__all__ = [
    "TissueTopology",
    "mahalanobis",
    "pv_redistribution",
    "resolve_pv",
    "collapse_tissues",
    "load_topology",
]


def mahalanobis(comp: NormalComponent, y) -> np.ndarray:
    """Mahalanobis distance of ``y`` (``(C,)`` or ``(n, C)``) to a component."""
    return np.sqrt(np.maximum(mahalanobis_sq(comp, y), 0.0))


@dataclass(frozen=True)
class TissueTopology:
    """Which tissue every component belongs to, and which tissues PV classes mix.

    ``components[k]`` is the tissue id of component ``k``; ``pv`` maps a PV
    class id to its ordered pair of pure parent tissues.
    """

    components: tuple[int, ...]
    pure: tuple[int, ...]
    pv: tuple[tuple[int, tuple[int, int]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(int(c) for c in self.components))
        object.__setattr__(self, "pure", tuple(int(p) for p in self.pure))
        items = self.pv.items() if isinstance(self.pv, dict) else self.pv
        pv = tuple((int(i), (int(a), int(b))) for i, (a, b) in items)
        object.__setattr__(self, "pv", pv)
        pure = set(self.pure)
        if len(pure) != len(self.pure):
            raise InputError("duplicate pure tissue ids")
        pv_ids = [i for i, _ in pv]
        if len(set(pv_ids)) != len(pv_ids) or pure & set(pv_ids):
            raise InputError("PV ids must be unique and distinct from pure tissue ids")
        for i, (a, b) in pv:
            if a == b or a not in pure or b not in pure:
                raise InputError(f"PV class {i} must mix two distinct pure tissues")
        known = pure | set(pv_ids)
        for k, t in enumerate(self.components):
            if t not in known:
                raise InputError(f"component {k + 1} belongs to unknown tissue {t}")
        for t in pure:
            if t not in self.components:
                raise InputError(f"pure tissue {t} has no component")

    @classmethod
    def trivial(cls, n_components: int) -> "TissueTopology":
        ids = tuple(range(1, n_components + 1))
        return cls(ids, ids)

    @property
    def tissues(self) -> tuple[int, ...]:
        """Every tissue id (pure and PV) in ascending order."""
        return tuple(sorted(set(self.components)))

    def members(self, tissue: int) -> list[int]:
        return [k for k, t in enumerate(self.components) if t == tissue]

    def to_dict(self) -> dict:
        return {
            "pure": list(self.pure),
            "pv": [{"id": i, "parents": [a, b]} for i, (a, b) in self.pv],
            "components": list(self.components),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TissueTopology":
        try:
            pv = tuple((e["id"], tuple(e["parents"])) for e in doc.get("pv", []))
            return cls(tuple(doc["components"]), tuple(doc["pure"]), pv)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed topology document: {exc}") from exc


def load_topology(path) -> TissueTopology:
    try:
        with open(os.fspath(path)) as fh:
            return TissueTopology.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read topology {os.fspath(path)}: {exc}") from exc


def _renormalize(maps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    sums = maps[:, mask].sum(axis=0)
    out = maps.copy()
    out[:, mask] = maps[:, mask] / np.where(sums > 0, sums, 1.0)
    return out


def _check(model: MixtureModel, topo: TissueTopology, resp: ResponsibilityStack):
    if len(topo.components) != model.n_components or resp.n_classes != model.n_components:
        raise InputError("topology does not match the mixture model")


def pv_redistribution(
    resp: ResponsibilityStack,
    model: MixtureModel,
    topo: TissueTopology,
    mv: MultichannelVolume,
    exponent: float = 1.0,
) -> np.ndarray:
    """Pure-tissue mass per in-mask voxel, shape ``(len(topo.pure), n_masked)``.

    A PV class's probability goes to its parents with weights proportional to
    ``1 / D**exponent``, ``D`` being the Mahalanobis distance to the parent's
    component of highest density at the voxel. A zero distance takes all the
    mass; two zero distances split it evenly. No renormalization is applied.
    """
    _check(model, topo, resp)
    gamma = resp.masked()
    feats = mv.features()
    pure_mass = {t: gamma[topo.members(t)].sum(axis=0) for t in topo.pure}
    if topo.pv:
        dist = {}
        for t in {p for _, pair in topo.pv for p in pair}:
            comps = topo.members(t)
            dens = np.stack([log_density(model.components[k], feats) for k in comps])
            best = np.argmax(dens, axis=0)
            d = np.stack([mahalanobis(model.components[k], feats) for k in comps])
            dist[t] = np.take_along_axis(d, best[None], axis=0)[0] ** exponent
        for pv_id, (a, b) in topo.pv:
            g_pv = gamma[topo.members(pv_id)].sum(axis=0)
            da, db = dist[a], dist[b]
            total = da + db
            # (1/da) / (1/da + 1/db) == db / (da + db)
            wa = np.where(total > 0, db / np.where(total > 0, total, 1.0), 0.5)
            pure_mass[a] = pure_mass[a] + g_pv * wa
            pure_mass[b] = pure_mass[b] + g_pv * (1.0 - wa)
    return np.stack([pure_mass[t] for t in topo.pure])


def resolve_pv(
    resp: ResponsibilityStack,
    model: MixtureModel,
    topo: TissueTopology,
    mv: MultichannelVolume,
    exponent: float = 1.0,
) -> ResponsibilityStack:
    """Pure-tissue maps (ordered as ``topo.pure``), renormalized inside the mask."""
    maps = mv.scatter(pv_redistribution(resp, model, topo, mv, exponent))
    return ResponsibilityStack(resp.geometry, _renormalize(maps, resp.mask), resp.mask)


def collapse_tissues(resp: ResponsibilityStack, topo: TissueTopology) -> ResponsibilityStack:
    """Sum component maps per tissue id (ascending id order), renormalized in the mask."""
    if len(topo.components) != resp.n_classes:
        raise InputError("topology does not match the responsibility stack")
    maps = np.stack([resp.maps[topo.members(t)].sum(axis=0) for t in topo.tissues])
    return ResponsibilityStack(resp.geometry, _renormalize(maps, resp.mask), resp.mask)

"""Feature extraction and single-shot CMC / mAP retrieval metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .networks import DIReID

VARIANTS = ("fused", "f_inv", "f_sen_weighted")


class ProtocolError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    values: np.ndarray
    ids: np.ndarray
    cams: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("feature matrix has non-finite values")
        if not (len(self.values) == len(self.ids) == len(self.cams)):
            raise ValueError("rows, ids and cams disagree in length")

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@torch.no_grad()
def raw_features(model: DIReID, images: torch.Tensor, use_attention=True, batch=128):
    """Unnormalised ``(f_inv, f_sen * weights, fused)`` for every image."""
    model.eval()
    inv, sen, fused = [], [], []
    for s in range(0, len(images), batch):
        rep = model.identity_representation(images[s:s + batch], use_attention=use_attention)
        inv.append(rep.f_inv)
        sen.append(rep.f_sen * rep.weights)
        fused.append(rep.fused)
    return torch.cat(inv), torch.cat(sen), torch.cat(fused)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def extract_features(model: DIReID, images: torch.Tensor, ids, cams, feature="fused",
                     use_attention=True) -> FeatureMatrix:
    if feature not in VARIANTS:
        raise ValueError(f"unknown feature variant {feature!r}; choose from {VARIANTS}")
    inv, sen, fused = raw_features(model, images, use_attention)
    chosen = {"fused": fused, "f_inv": inv, "f_sen_weighted": sen}[feature]
    values = l2_normalize(chosen.double().numpy())
    return FeatureMatrix(values, np.asarray(ids), np.asarray(cams))


def distance_matrix(q: FeatureMatrix | np.ndarray, g: FeatureMatrix | np.ndarray) -> np.ndarray:
    qv = q.values if isinstance(q, FeatureMatrix) else np.asarray(q, dtype=np.float64)
    gv = g.values if isinstance(g, FeatureMatrix) else np.asarray(g, dtype=np.float64)
    if qv.shape[1] != gv.shape[1]:
        raise ValueError(f"dimension mismatch {qv.shape[1]} vs {gv.shape[1]}")
    sq = (qv ** 2).sum(1)[:, None] + (gv ** 2).sum(1)[None, :] - 2 * qv @ gv.T
    return np.sqrt(np.maximum(sq, 0.0))


def _match_rows(dist, q_ids, g_ids, q_cams, g_cams):
    """For each query, the relevance vector over its ranked valid gallery (or None)."""
    dist = np.asarray(dist)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    out = []
    for q in range(dist.shape[0]):
        order = np.argsort(dist[q], kind="stable")
        gid, gcam = g_ids[order], g_cams[order]
        keep = ~((gid == q_ids[q]) & (gcam == q_cams[q]))
        matches = gid[keep] == q_ids[q]
        out.append(matches if matches.any() else None)
    return out


def cmc(dist, q_ids, g_ids, q_cams, g_cams, K: int) -> np.ndarray:
    rows = [r for r in _match_rows(dist, q_ids, g_ids, q_cams, g_cams) if r is not None]
    if not rows:
        raise ProtocolError("no query has a valid gallery match")
    curve = np.zeros(K)
    for r in rows:
        first = int(np.argmax(r))
        if first < K:
            curve[first:] += 1
    return curve / len(rows)


def mean_average_precision(dist, q_ids, g_ids, q_cams, g_cams) -> float:
    rows = [r for r in _match_rows(dist, q_ids, g_ids, q_cams, g_cams) if r is not None]
    if not rows:
        raise ProtocolError("no query has a valid gallery match")
    aps = []
    for r in rows:
        hits = np.flatnonzero(r)
        precision = np.arange(1, len(hits) + 1) / (hits + 1)
        aps.append(precision.mean())
    return float(np.mean(aps))


@dataclass
class SingleShotResult:
    cmc: np.ndarray
    map: float
    trial_cmc: list[np.ndarray]
    trial_map: list[float]


def single_shot_eval(dist, q_ids, g_ids, q_cams, g_cams, trials: int, rng: np.random.Generator,
                     K: int = 20) -> SingleShotResult:
    """Average CMC/mAP over ``trials`` random one-image-per-identity galleries."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    g_cams = np.asarray(g_cams)
    missing = set(q_ids.tolist()) - set(g_ids.tolist())
    if missing:
        raise ProtocolError(f"identities with zero gallery candidates: {sorted(missing)[:5]}")
    pools = {pid: np.flatnonzero(g_ids == pid) for pid in np.unique(g_ids)}
    curves, maps = [], []
    for _ in range(trials):
        cols = np.sort([rng.choice(pool) for pool in pools.values()])
        d = np.asarray(dist)[:, cols]
        curves.append(cmc(d, q_ids, g_ids[cols], q_cams, g_cams[cols], K))
        maps.append(mean_average_precision(d, q_ids, g_ids[cols], q_cams, g_cams[cols]))
    return SingleShotResult(np.mean(curves, axis=0), float(np.mean(maps)), curves, maps)


def metrics_report(result: SingleShotResult, variant: str, trials: int, seed: int,
                   checkpoint: str | None) -> dict:
    return {
        "variant": variant,
        "cmc": [float(v) for v in result.cmc],
        "map": float(result.map),
        "trials": trials,
        "seed": seed,
        "checkpoint": checkpoint,
    }

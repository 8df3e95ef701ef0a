"""Self-degradation operators and the multi-low-resolution retrieval split."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import DegradationKind
from .data import DatasetManifest

MLR_RATIOS = (2, 3, 4)


class DegradationError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


def gamma_degrade(x: torch.Tensor, gamma: float) -> torch.Tensor:
    if gamma <= 0:
        raise DegradationError(f"gamma must be positive, got {gamma}")
    return x.clamp(0, 1).pow(gamma)


def resolution_degrade(x: torch.Tensor, ratio: float) -> torch.Tensor:
    """Area down-sample by ``ratio`` (ceil sizes), then bilinear back to the input size.

    Works on ``(3, H, W)`` or ``(N, 3, H, W)``.
    """
    if ratio < 1:
        raise DegradationError(f"ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return x.clone()
    single = x.dim() == 3
    xb = x[None] if single else x
    H, W = xb.shape[-2:]
    small = F.interpolate(xb, size=(math.ceil(H / ratio), math.ceil(W / ratio)), mode="area")
    out = F.interpolate(small, size=(H, W), mode="bilinear", align_corners=False).clamp(0, 1)
    return out[0] if single else out


def apply_degradation(x: torch.Tensor, kind: str, param: float) -> torch.Tensor:
    if kind == "resolution":
        return resolution_degrade(x, param)
    if kind == "illumination":
        return gamma_degrade(x, param)
    raise DegradationError(f"unknown degradation kind {kind!r}")


def sample_degradation_param(kind: DegradationKind, rng: np.random.Generator) -> float:
    lo, hi = kind.param_range
    return float(rng.uniform(lo, hi))


@dataclass
class DatasetSplit:
    query: DatasetManifest
    gallery: DatasetManifest
    # per-query down-sampling ratio (None for an undegraded split)
    query_ratios: list[int] | None = None

    def __post_init__(self):
        gallery_ids = set(self.gallery.ids.tolist())
        missing = sorted(set(self.query.ids.tolist()) - gallery_ids)
        if missing:
            raise ProtocolError(f"query identities absent from gallery: {missing[:5]}")


def build_mlr_split(manifest: DatasetManifest, rng: np.random.Generator,
                    query_camera: int = 0) -> DatasetSplit:
    """Query camera images become down-sampled queries; other cameras form the HR gallery."""
    cams = manifest.cams
    if len(set(cams.tolist())) < 2:
        raise ProtocolError("MLR split needs at least two cameras")
    q_idx = np.flatnonzero(cams == query_camera)
    g_idx = np.flatnonzero(cams != query_camera)
    if len(q_idx) == 0:
        raise ProtocolError(f"no images from query camera {query_camera}")
    ratios = [int(r) for r in rng.choice(MLR_RATIOS, size=len(q_idx))]
    return DatasetSplit(manifest.subset(q_idx), manifest.subset(g_idx), ratios)


def degrade_queries(images: torch.Tensor, ratios: list[int]) -> torch.Tensor:
    out = images.clone()
    for r in sorted(set(ratios)):
        sel = [i for i, v in enumerate(ratios) if v == r]
        out[sel] = resolution_degrade(images[sel], r)
    return out


def degrade_directory(src: str, dst: str, kind: str, param: float) -> int:
    """Apply one operator with a fixed parameter to every image under ``src``."""
    from pathlib import Path

    from .data import load_image, save_image

    src_p, dst_p = Path(src), Path(dst)
    if src_p.resolve() == dst_p.resolve():
        raise DegradationError("output directory must differ from input directory")
    n = 0
    for p in sorted(src_p.rglob("*")):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        out = dst_p / p.relative_to(src_p).with_suffix(".png")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_image(apply_degradation(load_image(p), kind, param), out)
        n += 1
    return n

"""Manifests, image I/O and the procedural pedestrian corpus.

Images are float32 tensors laid out channel-first, ``(3, H, W)``, with values
in [0, 1]. Batches stack to ``(N, 3, H, W)``.
"""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    path: str
    identity: int
    camera: int


@dataclass
class DatasetManifest:
    entries: list[Entry]
    # original identity -> contiguous label
    relabel: dict[int, int] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ManifestError(f"duplicate image path {e.path!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> np.ndarray:
        return np.array([e.identity for e in self.entries], dtype=np.int64)

    @property
    def cams(self) -> np.ndarray:
        return np.array([e.camera for e in self.entries], dtype=np.int64)

    @property
    def num_identities(self) -> int:
        return len(set(e.identity for e in self.entries))

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in indices], dict(self.relabel), self.root)

    def validate(self) -> None:
        labels = sorted(set(e.identity for e in self.entries))
        if labels != list(range(len(labels))):
            raise ManifestError("identities are not a contiguous 0..K-1 labelling")
        if self.relabel:
            used = set(labels)
            for orig, lab in self.relabel.items():
                if lab not in used:
                    raise ManifestError(f"identity {orig} has zero images")


def relabel_entries(entries: list[Entry]) -> tuple[list[Entry], dict[int, int]]:
    mapping = {orig: i for i, orig in enumerate(sorted(set(e.identity for e in entries)))}
    return [Entry(e.path, mapping[e.identity], e.camera) for e in entries], mapping


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    raw = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected path,identity,camera")
        try:
            ident, cam = int(parts[1]), int(parts[2])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: identity and camera must be integers") from None
        if ident < 0 or cam < 0 or not parts[0]:
            raise ManifestError(f"{path}:{lineno}: malformed entry")
        raw.append(Entry(parts[0], ident, cam))
    if not raw:
        raise ManifestError("empty manifest")
    entries, mapping = relabel_entries(raw)
    m = DatasetManifest(entries, mapping, path.parent)
    m.validate()
    return m


def write_manifest(manifest: DatasetManifest, path: str | Path, original_ids: bool = True) -> None:
    inverse = {v: k for k, v in manifest.relabel.items()}
    lines = []
    for e in manifest.entries:
        ident = inverse.get(e.identity, e.identity) if original_ids else e.identity
        lines.append(f"{e.path},{ident},{e.camera}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_image(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path: str | Path) -> None:
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path, format="PNG")


def load_images(manifest: DatasetManifest, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Stack every manifest image into one ``(N, 3, H, W)`` tensor, resizing if asked."""
    imgs = [load_image(manifest.root / e.path) for e in manifest.entries]
    out = torch.stack(imgs) if len({tuple(i.shape) for i in imgs}) == 1 else None
    if size is not None:
        if out is None or tuple(out.shape[-2:]) != tuple(size):
            out = torch.stack([
                torch.nn.functional.interpolate(i[None], size=size, mode="bilinear",
                                                align_corners=False, antialias=True)[0]
                for i in imgs
            ]).clamp(0, 1)
    if out is None:
        raise ManifestError("images differ in size; pass an explicit size")
    return out


# ----------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SyntheticIdentitySpec:
    identity_seed: int
    torso_hue: float
    leg_hue: float
    head_hue: float
    body_proportions: tuple[float, float, float]
    texture_phase: float
    torso_saturation: float
    leg_value: float
    stripe_period: float

    @classmethod
    def from_seed(cls, identity_seed: int) -> "SyntheticIdentitySpec":
        rng = np.random.default_rng([identity_seed, 0x5EED])
        head, torso = rng.uniform(0.14, 0.22), rng.uniform(0.32, 0.46)
        props = np.array([head, torso, 1.0 - head - torso])
        props = props / props.sum()
        return cls(
            identity_seed=identity_seed,
            torso_hue=float(rng.uniform()),
            leg_hue=float(rng.uniform()),
            head_hue=float(rng.uniform()),
            body_proportions=tuple(float(p) for p in props),
            texture_phase=float(rng.uniform(0, 2 * math.pi)),
            torso_saturation=float(rng.uniform(0.35, 0.8)),
            leg_value=float(rng.uniform(0.35, 0.8)),
            stripe_period=float(rng.uniform(2.5, 6.0)),
        )


@dataclass(frozen=True)
class Geometry:
    height: int = 64
    width: int = 32


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def camera_style(camera: int) -> tuple[float, float]:
    """(background hue, brightness offset in [-0.1, 0.1]) for a camera index."""
    rng = np.random.default_rng([camera, 0xCA3])
    return float(rng.uniform()), float(rng.uniform(-0.1, 0.1))


def band_rows(spec: SyntheticIdentitySpec, height: int, jitter: np.ndarray) -> list[tuple[int, int]]:
    """Row spans of head, torso and legs. ``jitter`` shifts the two inner boundaries."""
    top, bottom = 0.06 * height, 0.96 * height
    span = bottom - top
    b1 = top + spec.body_proportions[0] * span + jitter[0] * height
    b2 = top + (spec.body_proportions[0] + spec.body_proportions[1]) * span + jitter[1] * height
    edges = [int(round(top)), int(round(b1)), int(round(b2)), int(round(bottom))]
    return [(edges[i], edges[i + 1]) for i in range(3)]


def synth_identity_image(spec: SyntheticIdentitySpec, camera: int, instance_seed: int,
                         geometry: Geometry = Geometry()) -> torch.Tensor:
    H, W = geometry.height, geometry.width
    rng = np.random.default_rng([spec.identity_seed, camera, instance_seed, 0x1A6])
    bg_hue, offset = camera_style(camera)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.empty((H, W, 3))
    bg = _hsv(bg_hue, 0.35, 0.55)
    shade = 1.0 + 0.25 * (yy / H - 0.5) * rng.uniform(-1, 1)
    img[:] = bg * shade[..., None]

    # band boundary jitter, total at most 10% of height
    jitter = rng.uniform(-0.05, 0.05, size=2)
    rows = band_rows(spec, H, jitter)
    shift = rng.uniform(-0.08, 0.08) * W
    left = int(round(0.22 * W + shift))
    right = int(round(0.78 * W + shift))
    left, right = max(left, 0), min(right, W)

    head_l = int(round(left + 0.22 * (right - left)))
    head_r = int(round(right - 0.22 * (right - left)))
    colors = [
        _hsv(spec.head_hue, 0.55, 0.85),
        _hsv(spec.torso_hue, spec.torso_saturation, 0.8),
        _hsv(spec.leg_hue, 0.6, spec.leg_value),
    ]
    for k, (r0, r1) in enumerate(rows):
        c0, c1 = (head_l, head_r) if k == 0 else (left, right)
        region = img[r0:r1, c0:c1]
        region[:] = colors[k]
        if k == 1:
            stripes = 1.0 + 0.18 * np.sin(2 * math.pi * yy[r0:r1, c0:c1] / spec.stripe_period
                                          + spec.texture_phase)
            region *= stripes[..., None]

    img = img * rng.uniform(0.85, 1.15) + offset
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).contiguous()


def build_synthetic_dataset(num_identities: int, images_per_identity: int, num_cameras: int,
                            root_seed: int, out_dir: str | Path,
                            geometry: Geometry = Geometry()) -> DatasetManifest:
    """Render the corpus to PNGs plus ``manifest.csv``. Cameras are assigned round-robin."""
    if min(num_identities, images_per_identity, num_cameras) < 1:
        raise ValueError("counts must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(root_seed).integers(0, 2**31 - 1, size=num_identities)
    entries = []
    for ident in range(num_identities):
        spec = SyntheticIdentitySpec.from_seed(int(seeds[ident]))
        for n in range(images_per_identity):
            cam = n % num_cameras
            rel = f"images/{ident:05d}_c{cam}_{n:03d}.png"
            save_image(synth_identity_image(spec, cam, n, geometry), out_dir / rel)
            entries.append(Entry(rel, ident, cam))
    manifest = DatasetManifest(entries, {i: i for i in range(num_identities)}, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    log.info("wrote %d images to %s", len(entries), out_dir)
    return manifest


def split_by_identity(manifest: DatasetManifest, train_fraction: float = 0.5):
    """Disjoint identity split, lowest labels to train. Each half is relabelled."""
    k = manifest.num_identities
    n_train = int(round(k * train_fraction))
    halves = []
    for keep in (lambda i: i < n_train, lambda i: i >= n_train):
        chosen = [e for e in manifest.entries if keep(e.identity)]
        inverse = {v: o for o, v in manifest.relabel.items()} if manifest.relabel else {}
        orig = [Entry(e.path, inverse.get(e.identity, e.identity), e.camera) for e in chosen]
        entries, mapping = relabel_entries(orig)
        halves.append(DatasetManifest(entries, mapping, manifest.root))
    return halves[0], halves[1]

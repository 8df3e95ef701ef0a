"""Learnable components of the decomposition GAN and the dual-feature identity network.

All modules take ``(N, 3, H, W)`` images in [0, 1] at the geometry fixed by
:class:`~direid.config.NetworkConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetworkConfig, from_dict, to_dict

ADAIN_EPS = 1e-5
CHECKPOINT_FORMAT = "direid-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride, k // 2)


def act():
    return nn.LeakyReLU(0.2)


def _check_geometry(x: torch.Tensor, cfg: NetworkConfig):
    if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (cfg.height, cfg.width):
        raise ShapeError(f"expected (N, 3, {cfg.height}, {cfg.width}) images, got {tuple(x.shape)}")


def _downscale(x, factor):
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    return F.interpolate(x, size=(math.ceil(H / factor), math.ceil(W / factor)), mode="area")


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(conv(ch, ch), act(), conv(ch, ch))

    def forward(self, x):
        return F.leaky_relu(x + self.body(x), 0.2)


# ----------------------------------------------------------------------------
# content / degradation encoders

@dataclass
class ContentFeature:
    map: torch.Tensor       # (N, C_c, H/8, W/8)

    @property
    def pooled(self) -> torch.Tensor:
        return self.map.mean(dim=(2, 3))


class ContentEncoder(nn.Module):
    """Residual CNN with one independent stem per input resolution (1, 1/2, 1/4).

    Branches meet at 1/8 resolution, are summed, and pass through a shared
    residual block. The output has no final activation.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        widths = [w, 2 * w, 4 * w]
        self.branches = nn.ModuleList()
        for s in range(cfg.encoder_scales):
            layers = []
            ch = 3
            for out in widths[s:]:
                layers += [conv(ch, out, stride=2), act()]
                ch = out
            self.branches.append(nn.Sequential(*layers))
        self.trunk = ResBlock(4 * w)
        self.head = conv(4 * w, cfg.content_dim, k=1)

    def forward(self, x) -> ContentFeature:
        _check_geometry(x, self.cfg)
        feats = [b(_downscale(x, 2 ** s)) for s, b in enumerate(self.branches)]
        size = feats[0].shape[-2:]
        fused = feats[0]
        for f in feats[1:]:
            if f.shape[-2:] != size:
                f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
            fused = fused + f
        return ContentFeature(self.head(self.trunk(fused)))


@dataclass
class DegradationCode:
    vector: torch.Tensor    # (N, C_d)
    source: str             # "real_encoder" | "self_encoder"


class DegradationEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig, source: str):
        super().__init__()
        self.cfg, self.source = cfg, source
        w = cfg.base_width
        self.features = nn.Sequential(
            conv(3, w, stride=2), act(),
            conv(w, 2 * w, stride=2), act(),
            conv(2 * w, 4 * w, stride=2), act(),
        )
        self.fc = nn.Linear(4 * w, cfg.degradation_dim)

    def forward(self, x) -> DegradationCode:
        _check_geometry(x, self.cfg)
        return DegradationCode(self.fc(self.features(x).mean(dim=(2, 3))), self.source)


# ----------------------------------------------------------------------------
# decoder

def adain(feature_map: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor,
          eps: float = ADAIN_EPS) -> torch.Tensor:
    """Per-channel instance normalisation followed by an affine map from ``scale``/``bias``.

    ``feature_map`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``scale`` and ``bias``
    are ``(C,)`` or ``(N, C)`` to match.
    """
    # moments in double precision: a float32 mean of a constant channel is off by an ulp,
    # which the 1/sqrt(eps) factor would blow up to ~1e-5 instead of exactly zero
    x = feature_map.double()
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    normed = ((x - mu) / torch.sqrt(var + eps)).to(feature_map.dtype)
    return scale[..., None, None] * normed + bias[..., None, None]


class AdaINResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c1, self.c2 = conv(ch, ch), conv(ch, ch)
        self.channels = [ch, ch]

    def forward(self, x, params):
        (s1, b1), (s2, b2) = params
        h = F.leaky_relu(adain(self.c1(x), s1, b1), 0.2)
        h = adain(self.c2(h), s2, b2)
        return x + h


class Decoder(nn.Module):
    """Upsamples a content map to a full image; the degradation code sets every AdaIN affine."""

    def __init__(self, cfg: NetworkConfig, n_res=2):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.inp = conv(cfg.content_dim, 4 * w)
        self.res = nn.ModuleList(AdaINResBlock(4 * w) for _ in range(n_res))
        last = max(w // 2, 1)
        ups = [(4 * w, 2 * w), (2 * w, w), (w, last)]
        self.ups = nn.ModuleList(conv(a, b) for a, b in ups)
        self.out = conv(last, 3)
        self.adain_channels = [c for r in self.res for c in r.channels] + [b for _, b in ups]
        hidden = max(cfg.degradation_dim, 2 * w)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.degradation_dim, hidden), act(),
            nn.Linear(hidden, 2 * sum(self.adain_channels)),
        )

    def adain_params(self, code: torch.Tensor):
        raw = self.mlp(code)
        params, i = [], 0
        for ch in self.adain_channels:
            scale = 1.0 + raw[:, i:i + ch]
            bias = raw[:, i + ch:i + 2 * ch]
            params.append((scale, bias))
            i += 2 * ch
        return params

    def forward(self, f_c: ContentFeature, f_d: DegradationCode) -> torch.Tensor:
        m, code = f_c.map, f_d.vector
        exp = (self.cfg.content_dim, math.ceil(self.cfg.height / 8), math.ceil(self.cfg.width / 8))
        if tuple(m.shape[1:]) != exp or code.shape[-1] != self.cfg.degradation_dim \
                or code.shape[0] != m.shape[0]:
            raise ShapeError(f"decoder got content {tuple(m.shape)} and code {tuple(code.shape)}")
        params = self.adain_params(code)
        h = self.inp(m)
        k = 0
        for blk in self.res:
            h = blk(h, params[k:k + 2])
            k += 2
        H, W = self.cfg.height, self.cfg.width
        for j, up in enumerate(self.ups):
            f = 2 ** (2 - j)
            h = F.interpolate(h, size=(math.ceil(H / f), math.ceil(W / f)), mode="nearest")
            s, b = params[k]
            h = F.leaky_relu(adain(up(h), s, b), 0.2)
            k += 1
        return torch.sigmoid(self.out(h))


# ----------------------------------------------------------------------------
# discriminators

class PatchDiscriminator(nn.Module):
    def __init__(self, w, penult):
        super().__init__()
        self.features = nn.Sequential(
            conv(3, w, stride=2), act(),
            conv(w, 2 * w, stride=2), act(),
            conv(2 * w, penult, stride=2), act(),
        )
        self.logit = conv(penult, 1)

    def forward(self, x):
        h = self.features(x)
        return self.logit(h), h


class MultiScaleDiscriminator(nn.Module):
    """One PatchGAN per scale; scale ``s`` sees the input down-scaled by ``2**s``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList(
            PatchDiscriminator(cfg.base_width, cfg.cue_dim) for _ in range(cfg.discriminator_scales))

    def forward(self, x, with_cue=False):
        _check_geometry(x, self.cfg)
        maps, cues = [], []
        for s, d in enumerate(self.scales):
            logit, feat = d(_downscale(x, 2 ** s))
            maps.append(logit)
            cues.append(feat.mean(dim=(2, 3)))
        if with_cue:
            return maps, torch.stack(cues).mean(dim=0)
        return maps


@dataclass
class DegradationScore:
    score: torch.Tensor     # (N,)
    cue: torch.Tensor       # (N, C_cue)


def aggregate_patch_maps(maps: list[torch.Tensor]) -> torch.Tensor:
    """Mean over every patch logit of every scale, per sample."""
    flat = torch.cat([m.flatten(1) for m in maps], dim=1)
    return flat.mean(dim=1)


# ----------------------------------------------------------------------------
# identity branch

class IdentityEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.features = nn.Sequential(
            conv(3, w, stride=2), act(),
            conv(w, w), act(),
            conv(w, 2 * w, stride=2), act(),
            conv(2 * w, 4 * w, stride=2), act(),
            ResBlock(4 * w),
        )
        self.embed = nn.Linear(4 * w, cfg.sensitive_dim)
        self.classifier = nn.Linear(cfg.sensitive_dim, cfg.num_identities)

    def forward(self, x, with_logits=False):
        _check_geometry(x, self.cfg)
        emb = self.embed(self.features(x).mean(dim=(2, 3)))
        if with_logits:
            return emb, self.classifier(emb)
        return emb


class AttentionHead(nn.Module):
    """Degradation cue -> per-channel weights in (0, 1) for the sensitive features."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.cue_dim, cfg.attention_hidden)
        self.fc2 = nn.Linear(cfg.attention_hidden, cfg.sensitive_dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, cue):
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(cue))))
        # sigmoid rounds to exactly 0/1 once saturated; keep the weights strictly inside (0, 1)
        fi = torch.finfo(w.dtype)
        return w.clamp(fi.tiny, 1.0 - fi.eps / 2)


@dataclass
class IdentityRepresentation:
    f_inv: torch.Tensor
    f_sen: torch.Tensor
    weights: torch.Tensor
    fused: torch.Tensor


def fuse_identity(f_inv, f_sen, weights):
    return torch.cat([f_inv, f_sen * weights], dim=-1)


# ----------------------------------------------------------------------------
# container

GROUPS = {
    "E_c": "content_encoder",
    "E_d": "degradation_encoder",
    "E_d_self": "self_degradation_encoder",
    "G": "decoder",
    "D_r": "reality_disc",
    "D_d": "degradation_disc",
    "E_id": "identity_encoder",
    "Att": "attention",
    "classifiers": "classifiers",
}


class DIReID(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.degradation_encoder = DegradationEncoder(cfg, "real_encoder")
        self.self_degradation_encoder = DegradationEncoder(cfg, "self_encoder")
        self.decoder = Decoder(cfg)
        self.reality_disc = MultiScaleDiscriminator(cfg)
        self.degradation_disc = MultiScaleDiscriminator(cfg)
        self.identity_encoder = IdentityEncoder(cfg)
        self.attention = AttentionHead(cfg)
        k, cc, cs = cfg.num_identities, cfg.content_dim, cfg.sensitive_dim
        self.classifiers = nn.ModuleDict({
            "content_id": nn.Linear(cc, k),   # identification head used while training the GAN
            "inv": nn.Linear(cc, k),
            "sen": nn.Linear(cs, k),
            "both": nn.Linear(cc + cs, k),
        })

    def group(self, name: str) -> nn.Module:
        return getattr(self, GROUPS[name])

    def encode_content(self, x) -> ContentFeature:
        return self.content_encoder(x)

    def encode_degradation(self, x, source="real_encoder") -> DegradationCode:
        if source == "real_encoder":
            return self.degradation_encoder(x)
        if source == "self_encoder":
            return self.self_degradation_encoder(x)
        raise ValueError(f"unknown degradation encoder {source!r}")

    def decode(self, f_c, f_d) -> torch.Tensor:
        return self.decoder(f_c, f_d)

    def discriminate_reality(self, x) -> list[torch.Tensor]:
        return self.reality_disc(x)

    def degradation_score(self, x) -> DegradationScore:
        maps, cue = self.degradation_disc(x, with_cue=True)
        return DegradationScore(aggregate_patch_maps(maps), cue)

    def encode_identity(self, x) -> torch.Tensor:
        return self.identity_encoder(x)

    def attention_weights(self, cue) -> torch.Tensor:
        return self.attention(cue)

    def identity_representation(self, x, use_attention=True, weights=None) -> IdentityRepresentation:
        f_inv = self.encode_content(x).pooled
        f_sen = self.encode_identity(x)
        if weights is None:
            if use_attention:
                weights = self.attention_weights(self.degradation_score(x).cue)
            else:
                weights = torch.ones_like(f_sen)
        return IdentityRepresentation(f_inv, f_sen, weights, fuse_identity(f_inv, f_sen, weights))


def parameter_groups(model: DIReID) -> dict[str, list[nn.Parameter]]:
    return {name: list(model.group(name).parameters()) for name in GROUPS}


def save_checkpoint(path, model: DIReID, stage: int, iteration: int, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": to_dict(model.cfg),
        "stage": stage,
        "iteration": iteration,
        "params": {name: model.group(name).state_dict() for name in GROUPS},
    }
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"{path} is not a direid checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


# config fields a group's weights depend on; groups not listed depend on all of them
GROUP_CONFIG_FIELDS = {
    "E_id": ("height", "width", "base_width", "sensitive_dim", "num_identities"),
}


def load_checkpoint(path, model: DIReID | None = None, groups=None):
    """Load weights into ``model`` (or a fresh one).

    The network configs must agree on every field the loaded groups depend on
    (all fields unless ``groups`` is restricted, e.g. to ``["E_id"]``).
    """
    payload = read_checkpoint(path)
    cfg = from_dict(NetworkConfig, payload["network_config"])
    if model is None:
        model = DIReID(cfg)
    else:
        ours, theirs = to_dict(model.cfg), to_dict(cfg)
        fields = set()
        for name in groups or GROUPS:
            fields.update(GROUP_CONFIG_FIELDS.get(name, theirs))
        diff = sorted(k for k in fields if ours[k] != theirs[k])
        if diff:
            raise StateError(f"checkpoint config differs in {diff}")
    for name in groups or GROUPS:
        model.group(name).load_state_dict(payload["params"][name])
    return model, payload

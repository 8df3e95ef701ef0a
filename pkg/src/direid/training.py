"""Stage 0 (identity encoder), Stage 1 (decomposition GAN) and Stage 2 (dual-feature network).

Every batch is a pure function of ``(seed, stage, iteration)`` so a resumed run
replays the same data as an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .config import TrainConfig, to_dict
from .data import DatasetManifest, load_images
from .degradations import MLR_RATIOS, apply_degradation, degrade_queries, sample_degradation_param
from .networks import DIReID, StateError, load_checkpoint, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGE_INDEX = {"pretrain_id": 0, "ddgan": 1, "dfen": 2}


class SamplerError(ValueError):
    pass


# ----------------------------------------------------------------------------
# data

@dataclass
class Corpus:
    images: torch.Tensor
    ids: np.ndarray
    cams: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def num_identities(self):
        return int(self.ids.max()) + 1 if len(self.ids) else 0

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, size=None, degrade_camera: int | None = None,
                      seed: int = 0) -> "Corpus":
        """Load images; optionally down-sample one camera with ratios drawn from {2, 3, 4}."""
        images = load_images(manifest, size)
        cams = manifest.cams
        if degrade_camera is not None:
            sel = np.flatnonzero(cams == degrade_camera)
            rng = np.random.default_rng([seed, 0xD06])
            ratios = [int(r) for r in rng.choice(MLR_RATIOS, size=len(sel))]
            images[sel] = degrade_queries(images[sel], ratios)
        return cls(images, manifest.ids, cams)


def step_rng(seed: int, stage: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, iteration])


def sample_pk(ids: np.ndarray, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """P identities x K instances; instances repeat only if an identity has fewer than K."""
    uniq = np.unique(ids)
    if len(uniq) < P:
        raise SamplerError(f"need {P} identities per batch, corpus has {len(uniq)}")
    chosen = rng.choice(uniq, size=P, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(ids == pid)
        out.append(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.concatenate(out)


@dataclass
class PairBatch:
    x_i: torch.Tensor
    x_j: torch.Tensor
    params: list[float]
    self_ids: torch.Tensor
    real_i: torch.Tensor
    real_k: torch.Tensor
    y_i: torch.Tensor
    y_k: torch.Tensor
    kind: str


def sample_pair_batch(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator) -> PairBatch:
    if len(corpus) == 0:
        raise SamplerError("empty corpus")
    B = cfg.batch_size
    self_idx = rng.integers(0, len(corpus), size=B)
    params = [sample_degradation_param(cfg.degradation, rng) for _ in range(B)]
    x_i = corpus.images[self_idx]
    x_j = torch.stack([apply_degradation(x_i[n], cfg.degradation.kind, p)
                       for n, p in enumerate(params)])
    idx_i = sample_pk(corpus.ids, cfg.ids_per_batch, cfg.instances_per_id, rng)
    idx_k = sample_pk(corpus.ids, cfg.ids_per_batch, cfg.instances_per_id, rng)
    idx_k = idx_k[rng.permutation(len(idx_k))]
    as_t = lambda a: torch.as_tensor(corpus.ids[a], dtype=torch.long)
    return PairBatch(x_i, x_j, params, as_t(self_idx),
                     corpus.images[idx_i], corpus.images[idx_k], as_t(idx_i), as_t(idx_k),
                     cfg.degradation.kind)


# ----------------------------------------------------------------------------
# helpers

def set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def param_digest(modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for p in m.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


class JsonlLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict):
        self.records.append(record)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _checkpoint_name(out_dir, stage, it):
    return Path(out_dir) / f"stage{stage}_iter{it}.ckpt"


def _rng_state():
    return {"torch": torch.get_rng_state()}


# ----------------------------------------------------------------------------
# Stage 0

def identity_step_loss(model: DIReID, x, y, margin):
    emb, logits = model.identity_encoder(x, with_logits=True)
    ce = L.identification_loss(logits, y)
    tri = L.triplet_hard_loss(emb, y, margin)
    return ce + tri, {"ce": _f(ce), "triplet": _f(tri)}, logits


@torch.no_grad()
def classification_accuracy(model: DIReID, corpus: Corpus, batch=256) -> float:
    model.identity_encoder.eval()
    hits = 0
    for s in range(0, len(corpus), batch):
        _, logits = model.identity_encoder(corpus.images[s:s + batch], with_logits=True)
        hits += int((logits.argmax(1).numpy() == corpus.ids[s:s + batch]).sum())
    return hits / max(len(corpus), 1)


def lr_scheduler(opt: torch.optim.Optimizer, cfg: TrainConfig):
    """Per-iteration schedule; ``None`` for a constant learning rate."""
    if cfg.lr_schedule == "constant":
        return None
    total = max(cfg.iterations, 1)
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda it: 0.5 * (1 + math.cos(math.pi * it / total)))


def pretrain_identity_encoder(cfg: TrainConfig, corpus: Corpus, model: DIReID,
                              out_dir: str | Path | None = None, logger=None) -> dict:
    if cfg.stage != "pretrain_id":
        raise StateError(f"stage must be pretrain_id, got {cfg.stage}")
    _check_labels(corpus, model)
    logger = logger or JsonlLogger(None)
    enc = model.identity_encoder
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr_head, betas=cfg.betas)
    sched = lr_scheduler(opt, cfg)
    enc.train()
    for it in range(cfg.iterations):
        rng = step_rng(cfg.seed, 0, it)
        idx = sample_pk(corpus.ids, cfg.ids_per_batch, cfg.instances_per_id, rng)
        x, y = corpus.images[idx], torch.as_tensor(corpus.ids[idx])
        loss, parts, _ = identity_step_loss(model, x, y, cfg.weights.triplet_margin)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            logger({"stage": 0, "phase": "id", "iteration": it, "terms": parts, "total": _f(loss)})
    acc = classification_accuracy(model, corpus)
    result = {"accuracy": acc, "iterations": cfg.iterations}
    if out_dir is not None:
        path = _checkpoint_name(out_dir, 0, cfg.iterations)
        save_checkpoint(path, model, 0, cfg.iterations, {"train_config": to_dict(cfg), "result": result})
        result["checkpoint"] = str(path)
    return result


def _check_labels(corpus: Corpus, model: DIReID):
    if corpus.num_identities > model.cfg.num_identities:
        raise SamplerError(f"corpus has {corpus.num_identities} identities, "
                           f"network is built for {model.cfg.num_identities}")


# ----------------------------------------------------------------------------
# Stage 1

def gen_modules(model: DIReID):
    return [model.content_encoder, model.degradation_encoder, model.self_degradation_encoder,
            model.decoder, model.classifiers["content_id"]]


def disc_modules(model: DIReID):
    return [model.reality_disc, model.degradation_disc]


def self_phase_forward(model: DIReID, x_i, x_j) -> dict:
    fc_i, fc_j = model.encode_content(x_i), model.encode_content(x_j)
    fd_i = model.encode_degradation(x_i, "real_encoder")
    fd_j = model.encode_degradation(x_j, "self_encoder")
    return {
        "fc_i": fc_i, "fc_j": fc_j,
        "x_ii": model.decode(fc_i, fd_i), "x_ij": model.decode(fc_i, fd_j),
        "x_jj": model.decode(fc_j, fd_j), "x_ji": model.decode(fc_j, fd_i),
    }


def cross_phase_forward(model: DIReID, x_i, x_k) -> dict:
    fc_i, fc_k = model.encode_content(x_i), model.encode_content(x_k)
    fd_i = model.encode_degradation(x_i, "real_encoder")
    fd_k = model.encode_degradation(x_k, "real_encoder")
    return {
        "fc_i": fc_i, "fc_k": fc_k,
        "x_ii": model.decode(fc_i, fd_i), "x_kk": model.decode(fc_k, fd_k),
        "x_ik": model.decode(fc_i, fd_k), "x_ki": model.decode(fc_k, fd_i),
    }


def _identity_embed_pair(model, generated, reference):
    with torch.no_grad():
        ref = model.encode_identity(reference)
    return L.identity_preserving_loss(model.encode_identity(generated), ref)


def self_generator_terms(model: DIReID, x_i, x_j, gen: dict, margin: float) -> dict:
    terms = {}
    terms["invc"] = L.invariable_content_loss(gen["fc_i"], gen["fc_j"])
    # x_ij and x_jj carry the self-encoder's code and get no pixel target
    terms["recon"] = L.reconstruction_loss(gen["x_ii"], x_i) + L.reconstruction_loss(gen["x_ji"], x_i)
    terms["pre"] = (_identity_embed_pair(model, gen["x_ij"], x_i)
                    + _identity_embed_pair(model, gen["x_ji"], x_j))
    terms["real"] = (L.reality_adversarial_loss(None, model.discriminate_reality(gen["x_ij"]), "generator")
                     + L.reality_adversarial_loss(None, model.discriminate_reality(gen["x_jj"]), "generator"))
    s = lambda x: model.degradation_score(x).score
    terms["deg"] = (L.degradation_ranking_loss(s(x_i), s(gen["x_ij"]), 1, margin).mean()
                    + L.degradation_ranking_loss(s(gen["x_ji"]), s(x_j), 1, margin).mean())
    return terms


def self_discriminator_loss(model: DIReID, x_i, x_j, x_k, x_ij, x_jj, margin: float) -> dict:
    real = (L.reality_adversarial_loss(model.discriminate_reality(x_i),
                                       model.discriminate_reality(x_ij), "discriminator")
            + L.reality_adversarial_loss(model.discriminate_reality(x_k),
                                         model.discriminate_reality(x_jj), "discriminator"))
    # the synthetic member of each pair is the more degraded one
    deg = L.degradation_ranking_loss(model.degradation_score(x_i).score,
                                     model.degradation_score(x_j).score, 1, margin).mean()
    return {"real": real, "deg": deg}


def cross_generator_terms(model: DIReID, x_i, y_i, x_k, y_k, gen: dict, margin: float):
    terms = {}
    cls = model.classifiers["content_id"]
    terms["id"] = (L.identification_loss(cls(gen["fc_i"].pooled), y_i)
                   + L.identification_loss(cls(gen["fc_k"].pooled), y_k))
    terms["recon"] = L.reconstruction_loss(gen["x_ii"], x_i) + L.reconstruction_loss(gen["x_kk"], x_k)
    terms["pre"] = (_identity_embed_pair(model, gen["x_ik"], x_i)
                    + _identity_embed_pair(model, gen["x_ki"], x_k))
    terms["real"] = (L.reality_adversarial_loss(None, model.discriminate_reality(gen["x_ik"]), "generator")
                     + L.reality_adversarial_loss(None, model.discriminate_reality(gen["x_ki"]), "generator"))
    s_i = model.degradation_score(x_i).score
    s_k = model.degradation_score(x_k).score
    gamma = L.rank_label_from_scores(s_i, s_k)
    mask = gamma != 0
    s_ik = model.degradation_score(gen["x_ik"]).score
    s_ki = model.degradation_score(gen["x_ki"]).score
    terms["deg"] = (L.masked_mean(L.degradation_ranking_loss(s_i, s_ik, gamma, margin), mask)
                    + L.masked_mean(L.degradation_ranking_loss(s_ki, s_k, gamma, margin), mask))
    aux = {"score_i": s_i.detach(), "score_k": s_k.detach(), "gamma": gamma}
    return terms, aux


def cross_discriminator_loss(model: DIReID, x_i, x_k, x_ik, x_ki) -> dict:
    real = (L.reality_adversarial_loss(model.discriminate_reality(x_i),
                                       model.discriminate_reality(x_ik), "discriminator")
            + L.reality_adversarial_loss(model.discriminate_reality(x_k),
                                         model.discriminate_reality(x_ki), "discriminator"))
    return {"real": real}


class DDGANTrainer:
    """Holds the two optimizers of the decomposition GAN and performs half-steps."""

    def __init__(self, model: DIReID, cfg: TrainConfig):
        self.model, self.cfg, self.w = model, cfg, cfg.weights
        self.opt_g = torch.optim.Adam([p for m in gen_modules(model) for p in m.parameters()],
                                      lr=cfg.lr_gan, betas=cfg.betas)
        self.opt_d = torch.optim.Adam([p for m in disc_modules(model) for p in m.parameters()],
                                      lr=cfg.lr_gan, betas=cfg.betas)
        set_requires_grad([model.identity_encoder], False)
        model.identity_encoder.eval()
        for m in gen_modules(model) + disc_modules(model):
            m.train()

    def _d_update(self, loss_fn) -> dict:
        set_requires_grad(disc_modules(self.model), True)
        out = {}
        for _ in range(self.cfg.d_steps):
            parts = loss_fn()
            total = sum(parts.values())
            self.opt_d.zero_grad()
            total.backward()
            self.opt_d.step()
            out = {k: _f(v) for k, v in parts.items()}
        return out

    def _g_update(self, total):
        set_requires_grad(disc_modules(self.model), False)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        set_requires_grad(disc_modules(self.model), True)

    def self_step(self, x_i, x_j, x_k) -> dict:
        m, margin = self.model, self.w.rank_margin
        gen = self_phase_forward(m, x_i, x_j)
        d = self._d_update(lambda: self_discriminator_loss(
            m, x_i, x_j, x_k, gen["x_ij"].detach(), gen["x_jj"].detach(), margin))
        set_requires_grad(disc_modules(m), False)
        terms = self_generator_terms(m, x_i, x_j, gen, margin)
        total = L.total_objective("self", terms, self.w)
        self._g_update(total)
        return {"phase": "self", "terms": {k: _f(v) for k, v in terms.items()},
                "total": _f(total), "disc": d}

    def cross_step(self, x_i, y_i, x_k, y_k) -> dict:
        m, margin = self.model, self.w.rank_margin
        gen = cross_phase_forward(m, x_i, x_k)
        d = self._d_update(lambda: cross_discriminator_loss(
            m, x_i, x_k, gen["x_ik"].detach(), gen["x_ki"].detach()))
        set_requires_grad(disc_modules(m), False)
        terms, aux = cross_generator_terms(m, x_i, y_i, x_k, y_k, gen, margin)
        total = L.total_objective("cross", terms, self.w)
        self._g_update(total)
        gamma = aux["gamma"].tolist()
        if any(g == 0 for g in gamma):
            log.info("tied degradation scores: %d pair(s) skipped", sum(g == 0 for g in gamma))
        return {"phase": "cross", "terms": {k: _f(v) for k, v in terms.items()},
                "total": _f(total), "disc": d,
                "scores": [[float(a), float(b)] for a, b in zip(aux["score_i"], aux["score_k"])],
                "gamma": [int(g) for g in gamma]}

    def state_dict(self):
        return {"opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict()}

    def load_state_dict(self, state):
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])


def ddgan_self_step(trainer: DDGANTrainer, batch: PairBatch) -> dict:
    return trainer.self_step(batch.x_i, batch.x_j, batch.real_k)


def ddgan_cross_step(trainer: DDGANTrainer, batch: PairBatch) -> dict:
    return trainer.cross_step(batch.real_i, batch.y_i, batch.real_k, batch.y_k)


def train_ddgan(cfg: TrainConfig, corpus: Corpus, model: DIReID, stage0_checkpoint=None,
                out_dir=None, logger=None, resume=None,
                callback: Callable[[int, DIReID], None] | None = None) -> dict:
    """Alternate self- and cross-degradation steps for ``cfg.iterations`` rounds."""
    if cfg.stage != "ddgan":
        raise StateError(f"stage must be ddgan, got {cfg.stage}")
    _check_labels(corpus, model)
    if stage0_checkpoint is None and resume is None:
        raise StateError("train_ddgan needs a Stage-0 identity encoder checkpoint")
    logger = logger or JsonlLogger(None)
    start = 0
    if stage0_checkpoint is not None:
        load_checkpoint(stage0_checkpoint, model, groups=["E_id"])
    trainer = DDGANTrainer(model, cfg)
    if resume is not None:
        _, payload = load_checkpoint(resume, model)
        if payload["stage"] != 1:
            raise StateError("resume checkpoint is not a Stage-1 checkpoint")
        trainer.load_state_dict(payload["optimizers"])
        start = payload["iteration"]
        trainer = _refresh(trainer)
    for it in range(start, cfg.iterations):
        batch = sample_pair_batch(corpus, cfg, step_rng(cfg.seed, 1, it))
        for rep in (ddgan_self_step(trainer, batch), ddgan_cross_step(trainer, batch)):
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                logger({"stage": 1, "iteration": it, **rep})
        done = it + 1
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            _save_stage1(out_dir, model, trainer, cfg, done)
        if callback is not None:
            callback(done, model)
    result = {"iterations": cfg.iterations}
    if out_dir is not None:
        result["checkpoint"] = str(_save_stage1(out_dir, model, trainer, cfg, cfg.iterations))
    return result


def _refresh(trainer):
    # keep frozen/train flags consistent after a state load
    set_requires_grad([trainer.model.identity_encoder], False)
    trainer.model.identity_encoder.eval()
    return trainer


def _save_stage1(out_dir, model, trainer, cfg, it):
    path = _checkpoint_name(out_dir, 1, it)
    save_checkpoint(path, model, 1, it, {"optimizers": trainer.state_dict(),
                                         "train_config": to_dict(cfg), "rng": _rng_state()})
    return path


# ----------------------------------------------------------------------------
# Stage 2

def dfen_features(model: DIReID, x, use_attention=True):
    f_inv = model.encode_content(x).pooled
    f_sen = model.encode_identity(x)
    if use_attention:
        with torch.no_grad():
            cue = model.degradation_score(x).cue
        weights = model.attention_weights(cue)
    else:
        weights = torch.ones_like(f_sen)
    f_sen_w = f_sen * weights
    return f_inv, f_sen_w, torch.cat([f_inv, f_sen_w], dim=1)


def dfen_terms(model: DIReID, x, y, margin, use_attention=True) -> dict:
    f_inv, f_sen_w, fused = dfen_features(model, x, use_attention)
    c = model.classifiers
    terms = {}
    for name, feat in (("inv", f_inv), ("sen", f_sen_w), ("both", fused)):
        terms[name] = L.identification_loss(c[name](feat), y) + L.triplet_hard_loss(feat, y, margin)
    return terms


class DFENTrainer:
    def __init__(self, model: DIReID, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        base = cfg.lr_head
        groups = [
            {"params": list(model.identity_encoder.parameters()), "lr": base * cfg.finetune_scale},
            {"params": [p for n in ("inv", "sen", "both") for p in model.classifiers[n].parameters()],
             "lr": base},
        ]
        if not cfg.freeze_content:
            groups.append({"params": list(model.content_encoder.parameters()),
                           "lr": base * cfg.finetune_scale})
        if cfg.use_attention:
            groups.append({"params": list(model.attention.parameters()), "lr": base})
        self.opt = torch.optim.Adam(groups, betas=cfg.betas)
        self.sched = lr_scheduler(self.opt, cfg)
        set_requires_grad([model.degradation_disc], False)
        set_requires_grad([model.content_encoder], not cfg.freeze_content)
        set_requires_grad([model.attention], cfg.use_attention)
        set_requires_grad([model.identity_encoder, model.classifiers], True)
        model.train()

    def step(self, x, y) -> dict:
        terms = dfen_terms(self.model, x, y, self.cfg.weights.triplet_margin, self.cfg.use_attention)
        total = L.total_objective("dfen", terms, self.cfg.weights)
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        if self.sched is not None:
            self.sched.step()
        return {"phase": "dfen", "terms": {k: _f(v) for k, v in terms.items()}, "total": _f(total)}


def train_dfen(cfg: TrainConfig, corpus: Corpus, model: DIReID, stage1_checkpoint=None,
               stage0_checkpoint=None, out_dir=None, logger=None, skip_stage1=False) -> dict:
    """Train the three classifier heads and the attention module.

    ``skip_stage1`` keeps the content encoder at its current (random) weights;
    this is the configuration without degradation invariance learning.
    """
    if cfg.stage != "dfen":
        raise StateError(f"stage must be dfen, got {cfg.stage}")
    _check_labels(corpus, model)
    if stage0_checkpoint is None:
        raise StateError("train_dfen needs a Stage-0 checkpoint")
    if stage1_checkpoint is None and not skip_stage1:
        raise StateError("train_dfen needs a Stage-1 checkpoint")
    if stage1_checkpoint is not None and not skip_stage1:
        payload = read_checkpoint(stage1_checkpoint)
        if payload["stage"] < 1:
            raise StateError("Stage-1 checkpoint expected")
        load_checkpoint(stage1_checkpoint, model, groups=["E_c", "E_d", "E_d_self", "G", "D_r", "D_d"])
    load_checkpoint(stage0_checkpoint, model, groups=["E_id"])
    logger = logger or JsonlLogger(None)
    trainer = DFENTrainer(model, cfg)
    rep = None
    for it in range(cfg.iterations):
        rng = step_rng(cfg.seed, 2, it)
        idx = sample_pk(corpus.ids, cfg.ids_per_batch, cfg.instances_per_id, rng)
        rep = trainer.step(corpus.images[idx], torch.as_tensor(corpus.ids[idx]))
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            logger({"stage": 2, "iteration": it, **rep})
    result = {"iterations": cfg.iterations, "final_total": rep["total"] if rep else None,
              "use_attention": cfg.use_attention}
    if out_dir is not None:
        path = _checkpoint_name(out_dir, 2, cfg.iterations)
        save_checkpoint(path, model, 2, cfg.iterations,
                        {"train_config": to_dict(cfg), "use_attention": cfg.use_attention,
                         "result": result})
        result["checkpoint"] = str(path)
    model.eval()
    return result

"""End-to-end pipelines shared by the CLI, the scripts and the acceptance suite."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, dump_config
from .data import (Geometry, build_synthetic_dataset, load_manifest, split_by_identity,
                   write_manifest)
from .degradations import (apply_degradation, build_mlr_split, degrade_queries,
                           sample_degradation_param)
from .evaluation import distance_matrix, extract_features, metrics_report, single_shot_eval
from .networks import DIReID, load_checkpoint, read_checkpoint
from .training import (Corpus, JsonlLogger, pretrain_identity_encoder, train_ddgan,
                       train_dfen)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preset:
    skip_stage1: bool = False
    use_attention: bool = True
    encoder_scales: int | None = None
    variant: str = "fused"


PRESETS = {
    "full": Preset(),
    "no-dil": Preset(skip_stage1=True, use_attention=False),
    "no-multiscale": Preset(encoder_scales=1),
    "no-attention": Preset(use_attention=False),
    "finv-only": Preset(variant="f_inv"),
    "fsen-only": Preset(variant="f_sen_weighted"),
}


def apply_preset(cfg: ExperimentConfig, name: str) -> tuple[ExperimentConfig, Preset]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]
    cfg = copy.deepcopy(cfg)
    if preset.encoder_scales is not None:
        cfg.network = dataclasses.replace(cfg.network, encoder_scales=preset.encoder_scales)
    cfg.train.dfen.use_attention = preset.use_attention
    cfg.eval.variant = preset.variant
    return cfg, preset


# ----------------------------------------------------------------------------
# data

def generate_dataset(cfg: ExperimentConfig, out_dir=None):
    """Write the synthetic corpus plus its identity split (train.csv / test.csv)."""
    root = Path(out_dir or cfg.data.root)
    d = cfg.data
    manifest = build_synthetic_dataset(d.num_identities, d.images_per_identity, d.num_cameras,
                                       d.seed, root, Geometry(cfg.network.height, cfg.network.width))
    train, test = split_by_identity(manifest, d.train_fraction)
    write_manifest(train, root / "train.csv")
    write_manifest(test, root / "test.csv")
    return train, test


def dataset_split(cfg: ExperimentConfig):
    """Read the train/test manifests under ``data.root``; never writes to the dataset.

    Without split files the full manifest is split in memory by identity.
    """
    root = Path(cfg.data.root)
    if (root / "train.csv").exists() and (root / "test.csv").exists():
        return load_manifest(root / "train.csv"), load_manifest(root / "test.csv")
    if not (root / "manifest.csv").exists():
        raise FileNotFoundError(f"no dataset under {root} (expected manifest.csv); "
                                "run `direid generate-data` first")
    return split_by_identity(load_manifest(root / "manifest.csv"), cfg.data.train_fraction)


def ensure_dataset(cfg: ExperimentConfig):
    """Generate the synthetic corpus under ``data.root`` unless it already exists."""
    if not (Path(cfg.data.root) / "manifest.csv").exists():
        return generate_dataset(cfg)
    return dataset_split(cfg)


def train_corpus(cfg: ExperimentConfig, manifest=None) -> Corpus:
    if manifest is None:
        manifest, _ = dataset_split(cfg)
    cam = cfg.data.query_camera if cfg.data.degrade_train_query_camera else None
    return Corpus.from_manifest(manifest, (cfg.network.height, cfg.network.width),
                                degrade_camera=cam, seed=cfg.data.seed)


@dataclass
class EvalSet:
    query: torch.Tensor
    gallery: torch.Tensor
    q_ids: np.ndarray
    g_ids: np.ndarray
    q_cams: np.ndarray
    g_cams: np.ndarray
    ratios: list[int] = field(default_factory=list)


def mlr_eval_set(cfg: ExperimentConfig, manifest=None) -> EvalSet:
    """Down-sampled query camera against the untouched gallery of held-out identities."""
    if manifest is None:
        _, manifest = dataset_split(cfg)
    split = build_mlr_split(manifest, np.random.default_rng([cfg.eval.seed, 0x31B]),
                            cfg.data.query_camera)
    size = (cfg.network.height, cfg.network.width)
    q = Corpus.from_manifest(split.query, size).images
    g = Corpus.from_manifest(split.gallery, size).images
    return EvalSet(degrade_queries(q, split.query_ratios), g, split.query.ids, split.gallery.ids,
                   split.query.cams, split.gallery.cams, split.query_ratios)


def evaluate_model(model: DIReID, es: EvalSet, variant: str, use_attention: bool, trials: int,
                   seed: int, max_rank: int, checkpoint: str | None = None) -> dict:
    qf = extract_features(model, es.query, es.q_ids, es.q_cams, variant, use_attention)
    gf = extract_features(model, es.gallery, es.g_ids, es.g_cams, variant, use_attention)
    res = single_shot_eval(distance_matrix(qf, gf), es.q_ids, es.g_ids, es.q_cams, es.g_cams,
                           trials, np.random.default_rng([seed, 0x55]), max_rank)
    report = metrics_report(res, variant, trials, seed, checkpoint)
    report["trial_cmc"] = [[float(v) for v in c] for c in res.trial_cmc]
    return report


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str, variant: str | None = None) -> dict:
    payload = read_checkpoint(checkpoint)
    if payload["stage"] < 2:
        raise ValueError(f"{checkpoint} is a Stage-{payload['stage']} checkpoint; "
                         "evaluation needs a Stage-2 checkpoint")
    model, _ = load_checkpoint(checkpoint)
    es = mlr_eval_set(cfg)
    return evaluate_model(model, es, variant or cfg.eval.variant, payload.get("use_attention", True),
                          cfg.eval.trials, cfg.eval.seed, cfg.eval.max_rank, str(checkpoint))


@dataclass
class DegradationPairs:
    clean: torch.Tensor
    degraded: torch.Tensor
    params: np.ndarray


def heldout_degradation_pairs(cfg: ExperimentConfig, manifest=None) -> DegradationPairs:
    """Clean held-out images next to a synthetically degraded copy (Stage-1 operator)."""
    if manifest is None:
        _, manifest = dataset_split(cfg)
    clean = Corpus.from_manifest(manifest, (cfg.network.height, cfg.network.width)).images
    kind = cfg.train.ddgan.degradation
    rng = np.random.default_rng([cfg.eval.seed, 0xD1])
    params = np.array([sample_degradation_param(kind, rng) for _ in range(len(clean))])
    degraded = torch.cat([apply_degradation(clean[i:i + 1], kind.kind, float(p))
                          for i, p in enumerate(params)])
    return DegradationPairs(clean, degraded, params)


@torch.no_grad()
def disentanglement_stats(model: DIReID, pairs: DegradationPairs, batch: int = 64) -> dict:
    """How well D_d orders clean/degraded pairs, and how similar their pooled content features are.

    ``score_order``: fraction of pairs where the degraded copy scores strictly higher.
    ``content_cosine``: mean cosine similarity of E_c's pooled features per pair.
    Diagnostics: ``unrelated_cosine`` is the same statistic for clean images of a fixed
    random pairing, ``relative_shift`` the median of |clean - degraded| / |clean - other|.
    """
    model.eval()
    wins, fc, fd = [], [], []
    for i in range(0, len(pairs.clean), batch):
        c, d = pairs.clean[i:i + batch], pairs.degraded[i:i + batch]
        wins.append((model.degradation_score(d).score > model.degradation_score(c).score).numpy())
        fc.append(model.encode_content(c).pooled)
        fd.append(model.encode_content(d).pooled)
    wins, fc, fd = np.concatenate(wins), torch.cat(fc), torch.cat(fd)
    other = fc[np.random.default_rng(0).permutation(len(fc))]
    cos = torch.nn.functional.cosine_similarity
    shift = (fc - fd).norm(dim=1) / (fc - other).norm(dim=1).clamp_min(1e-12)
    return {"score_order": float(wins.mean()), "content_cosine": float(cos(fc, fd, dim=1).mean()),
            "unrelated_cosine": float(cos(fc, other, dim=1).mean()),
            "relative_shift": float(shift.median()), "pairs": int(len(wins))}


# ----------------------------------------------------------------------------
# stages

def new_model(cfg: ExperimentConfig) -> DIReID:
    torch.manual_seed(cfg.seed)
    return DIReID(cfg.network)


def run_stage0(cfg: ExperimentConfig, corpus: Corpus, out_dir: Path, model=None) -> dict:
    model = model or new_model(cfg)
    return pretrain_identity_encoder(cfg.train.pretrain_id, corpus, model, out_dir,
                                     JsonlLogger(out_dir / "stage0.jsonl"))


def run_stage1(cfg: ExperimentConfig, corpus: Corpus, out_dir: Path, stage0_ckpt, model=None,
               resume=None) -> dict:
    model = model or new_model(cfg)
    return train_ddgan(cfg.train.ddgan, corpus, model, stage0_ckpt, out_dir,
                       JsonlLogger(out_dir / "stage1.jsonl"), resume=resume)


def run_stage2(cfg: ExperimentConfig, corpus: Corpus, out_dir: Path, stage0_ckpt, stage1_ckpt,
               model=None, skip_stage1=False) -> dict:
    model = model or new_model(cfg)
    return train_dfen(cfg.train.dfen, corpus, model, stage1_ckpt, stage0_ckpt, out_dir,
                      JsonlLogger(out_dir / "stage2.jsonl"), skip_stage1=skip_stage1)


def run_preset(cfg: ExperimentConfig, preset_name: str, out_dir: str | Path,
               stage0_ckpt=None, stage1_ckpt=None, variants=None) -> dict:
    """Train whatever the preset needs and evaluate it.

    Stage-0/Stage-1 checkpoints may be passed in to share work between presets
    built on the same configuration. Returns ``{variant: metrics report}``.
    """
    cfg, preset = apply_preset(cfg, preset_name)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "resolved_config.yaml")
    train_m, test_m = ensure_dataset(cfg)
    corpus = train_corpus(cfg, train_m)
    if stage0_ckpt is None:
        stage0_ckpt = run_stage0(cfg, corpus, out_dir)["checkpoint"]
    if not preset.skip_stage1 and stage1_ckpt is None:
        stage1_ckpt = run_stage1(cfg, corpus, out_dir, stage0_ckpt)["checkpoint"]
    model = new_model(cfg)
    res = run_stage2(cfg, corpus, out_dir, stage0_ckpt,
                     None if preset.skip_stage1 else stage1_ckpt, model,
                     skip_stage1=preset.skip_stage1)
    es = mlr_eval_set(cfg, test_m)
    reports = {}
    for variant in variants or [preset.variant]:
        rep = evaluate_model(model, es, variant, preset.use_attention, cfg.eval.trials,
                             cfg.eval.seed, cfg.eval.max_rank, res["checkpoint"])
        rep["preset"] = preset_name
        (out_dir / f"metrics_{preset_name}_{variant}.json").write_text(json.dumps(rep, indent=2))
        reports[variant] = rep
    return {"reports": reports, "stage0": stage0_ckpt, "stage1": stage1_ckpt,
            "stage2": res["checkpoint"]}


# ----------------------------------------------------------------------------
# desk-scale experiment shared by scripts/run_acceptance.py and the acceptance suite

DESK_PRESETS = ("full", "no-dil")
DESK_VARIANTS = ("fused", "f_inv", "f_sen_weighted")


def config_digest(cfg: ExperimentConfig) -> str:
    """Hash of everything that influences training (output location excluded)."""
    import hashlib

    import yaml

    from .config import to_dict

    d = to_dict(cfg)
    d.pop("out_dir", None)
    d["data"].pop("root", None)
    return hashlib.sha256(yaml.safe_dump(d, sort_keys=True).encode()).hexdigest()[:12]


def train_desk_seed(cfg: ExperimentConfig, run_dir: str | Path) -> dict:
    """Train Stage 0/1 once plus one Stage 2 per desk preset; reuse finished runs.

    A run directory is reused only when its recorded config digest matches, so
    cached checkpoints always correspond to the current configuration.
    """
    run_dir = Path(run_dir)
    done = run_dir / "checkpoints.json"
    digest = config_digest(cfg)
    if done.exists():
        record = json.loads(done.read_text())
        if record.get("digest") == digest and all(Path(p).exists() for p in record["stage2"].values()):
            log.info("reusing %s", run_dir)
            return record
    record = {"digest": digest, "stage2": {}}
    stage0 = stage1 = None
    for name in DESK_PRESETS:
        res = run_preset(cfg, name, run_dir / name, stage0, stage1, variants=list(DESK_VARIANTS))
        stage0 = stage0 or res["stage0"]
        stage1 = stage1 or res["stage1"]
        record["stage2"][name] = str(res["stage2"])
    record["stage0"], record["stage1"] = str(stage0), str(stage1)
    done.write_text(json.dumps(record, indent=2))
    return record


def evaluate_desk_seed(cfg: ExperimentConfig, record: dict) -> dict:
    """Recompute every acceptance statistic from the checkpoints of one seed."""
    _, test_m = dataset_split(cfg)
    es = mlr_eval_set(cfg, test_m)
    out = {"rank1": {}, "map": {}}
    for name, ckpt in record["stage2"].items():
        model, payload = load_checkpoint(ckpt)
        for variant in DESK_VARIANTS:
            rep = evaluate_model(model, es, variant, payload.get("use_attention", True),
                                 cfg.eval.trials, cfg.eval.seed, cfg.eval.max_rank, ckpt)
            out["rank1"][f"{name}/{variant}"] = rep["cmc"][0]
            out["map"][f"{name}/{variant}"] = rep["map"]
    pairs = heldout_degradation_pairs(cfg, test_m)
    trained, _ = load_checkpoint(record["stage1"])
    out["stage1"] = disentanglement_stats(trained, pairs)
    out["init"] = disentanglement_stats(new_model(cfg), pairs)
    out["stage0_accuracy"] = read_checkpoint(record["stage0"])["result"]["accuracy"]
    return out

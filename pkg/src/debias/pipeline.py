"""End-to-end desk experiment: synthesize a biased pair, train, generate, evaluate.

Every stage writes into one run directory::

    X/ Y/            biased source and target domains
    train/           checkpoint and train_log.csv
    Z/               intermediate domain with provenance.csv
    retention.csv    ground-truth audit rows
    embedding.csv    t-SNE points tagged by domain
    results.json     everything numeric and deterministic
    timing.json      wall-clock seconds per stage (kept apart so results stay bit-stable)
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from skimage.color import rgb2hsv

from .config import RunConfig
from .data import BiasSpec, DomainDataset, render_digit_set, save_dataset, synth_biased_pair
from .eval import (
    ClassifierConfig,
    centroid_gap,
    cross_accuracy_trials,
    embed_domains,
    label_retention_audit,
    oracle_training_set,
    train_classifier,
    trial_seeds,
    write_embedding_csv,
    write_results_json,
    write_retention_csv,
)
from .tensor_core import RngState
from .trainer import epoch_means, generate_intermediate, read_train_log, steps_per_epoch, train_augmenter

log = logging.getLogger(__name__)

DEFAULT_SOURCE_BIAS = "noise_sigma=4,seed=1"
DEFAULT_TARGET_BIAS = "hue_shift=180,background=texture1,contrast=0.8,noise_sigma=8,seed=2"
MIN_CHROMA = 60


def split_stratified(ds: DomainDataset, seed: int, name_a: str, name_b: str) -> tuple[DomainDataset, DomainDataset]:
    """Per-class alternating halves of a shuffled order."""
    gen = RngState(seed).child("split", ds.name).generator()
    labels = ds.labels
    a, b = [], []
    for c in range(ds.n_classes):
        idx = gen.permutation(np.flatnonzero(labels == c))
        a.extend(idx[0::2])
        b.extend(idx[1::2])
    sa, sb = ds.subset(sorted(a)), ds.subset(sorted(b))
    return (DomainDataset(name_a, sa.images, ds.n_classes, dict(ds.meta)),
            DomainDataset(name_b, sb.images, ds.n_classes, dict(ds.meta)))


def mean_hue(ds: DomainDataset, min_chroma: int = MIN_CHROMA) -> float:
    """Circular mean hue in degrees over strongly coloured pixels."""
    px = np.concatenate([im.pixels.reshape(im.pixels.shape[0], -1).T for im in ds.images]).astype(np.float64)
    if px.shape[1] == 1:
        return float("nan")
    px = px[px.max(axis=1) - px.min(axis=1) >= min_chroma] / 255.0
    if len(px) == 0:
        return float("nan")
    h = rgb2hsv(px[None])[0, :, 0] * 2 * np.pi
    return float(np.degrees(np.arctan2(np.sin(h).mean(), np.cos(h).mean())) % 360.0)


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def three_way_accuracy(X: DomainDataset, Z: DomainDataset, Y_train: DomainDataset, Y_test: DomainDataset,
                       clf_cfg: ClassifierConfig, n_trials: int) -> dict:
    """Source-only, debiased and target-trained accuracy on the same held-out target images."""
    seeds = trial_seeds(clf_cfg.seed, n_trials)
    rows = {
        "source_only": cross_accuracy_trials(X, Y_test, clf_cfg, seeds),
        "debiased": cross_accuracy_trials(Z, Y_test, clf_cfg, seeds),
        "target_trained": cross_accuracy_trials(Y_train, Y_test, clf_cfg, seeds),
    }
    return {k: v.to_dict() for k, v in rows.items()}


@dataclass(frozen=True)
class PipelineOptions:
    n_images: int = 1000
    source_bias: str = DEFAULT_SOURCE_BIAS
    target_bias: str = DEFAULT_TARGET_BIAS
    n_trials: int = 15
    n_embed: int = 100
    classifier: ClassifierConfig = ClassifierConfig()
    workers: int = 1


def run_pipeline(out_dir: str | Path, cfg: RunConfig = RunConfig(), opts: PipelineOptions = PipelineOptions()
                 ) -> dict:
    """Run every stage with all randomness derived from ``cfg.train.seed``; returns results."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed
    clf_cfg = ClassifierConfig(**{**asdict(opts.classifier), "seed": seed})
    timing: dict[str, float] = {}
    t = time.perf_counter()

    def lap(stage: str) -> None:
        nonlocal t
        now = time.perf_counter()
        timing[stage] = now - t
        t = now
        log.info("%s done in %.1fs", stage, timing[stage])

    base = render_digit_set(opts.n_images, cfg.generator.image_size, seed)
    X, Y = synth_biased_pair(base, BiasSpec.parse(opts.source_bias), BiasSpec.parse(opts.target_bias), opts.workers)
    save_dataset(X, out / "X")
    save_dataset(Y, out / "Y")
    lap("synth")

    state, _ = train_augmenter(X, Y, cfg.train, out / "train", cfg.generator, cfg.discriminator, cfg.ssim)
    lap("train")
    Z = generate_intermediate(state, X, out / "Z")
    lap("generate")

    Y_train, Y_test = split_stratified(Y, seed, "Y_train", "Y_test")
    accuracy = three_way_accuracy(X, Z, Y_train, Y_test, clf_cfg, opts.n_trials)
    lap("eval")

    oracle, oracle_train_acc = train_classifier(oracle_training_set(base, X, Y), clf_cfg)
    retention = label_retention_audit(X, Z, "ground_truth", oracle=oracle)
    proxy = label_retention_audit(X, Z, "ssim_proxy")
    write_retention_csv(out / "retention.csv", retention)
    lap("audit")

    source_clf, _ = train_classifier(X, clf_cfg)
    points = embed_domains(source_clf, X, Z, Y, opts.n_embed, "tsne", RngState(seed).child("embed"))
    write_embedding_csv(out / "embedding.csv", points)
    d_st, d_it = centroid_gap(points)
    lap("embed")

    train_log = read_train_log(out / "train" / "train_log.csv")
    cycle_epochs = epoch_means(train_log["cycle"], steps_per_epoch(len(X), cfg.train.batch_size))
    results = {
        "seed": seed,
        "config": {"preset": cfg.preset, "train": asdict(cfg.train), "generator": asdict(cfg.generator),
                   "discriminator": asdict(cfg.discriminator), "ssim": asdict(cfg.ssim),
                   "classifier": asdict(clf_cfg)},
        "data": {"n_base": len(base), "n_source": len(X), "n_target": len(Y), "n_target_train": len(Y_train),
                 "n_target_test": len(Y_test), "source_bias": opts.source_bias, "target_bias": opts.target_bias},
        "cycle_epoch_means": cycle_epochs.tolist(),
        "accuracy": accuracy,
        "retention": {"ground_truth": retention.to_dict(), "ssim_proxy": proxy.to_dict(),
                      "oracle_train_accuracy": oracle_train_acc},
        "embedding": {"method": "tsne", "n_per_domain": opts.n_embed, "feature_dim": source_clf.feature_dim,
                      "d_source_target": d_st, "d_intermediate_target": d_it},
        "hue": {"source": mean_hue(X), "intermediate": mean_hue(Z), "target": mean_hue(Y)},
    }
    write_results_json(out / "results.json", results)
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return results


def ablation_retention(out_dir: str | Path, cfg: RunConfig, opts: PipelineOptions = PipelineOptions()) -> dict:
    """Retrain with ``cfg`` on the same synthesized pair and audit Z with the same oracle."""
    out = Path(out_dir)
    seed = cfg.train.seed
    clf_cfg = ClassifierConfig(**{**asdict(opts.classifier), "seed": seed})
    base = render_digit_set(opts.n_images, cfg.generator.image_size, seed)
    X, Y = synth_biased_pair(base, BiasSpec.parse(opts.source_bias), BiasSpec.parse(opts.target_bias), opts.workers)
    state, _ = train_augmenter(X, Y, cfg.train, out / "train", cfg.generator, cfg.discriminator, cfg.ssim)
    Z = generate_intermediate(state, X, out / "Z")
    oracle, _ = train_classifier(oracle_training_set(base, X, Y), clf_cfg)
    report = label_retention_audit(X, Z, "ground_truth", oracle=oracle)
    write_retention_csv(out / "retention.csv", report)
    res = {"train": asdict(cfg.train), "retention": report.to_dict(),
           "ssim_proxy": label_retention_audit(X, Z, "ssim_proxy").to_dict()}
    write_results_json(out / "results.json", res)
    return res

"""``debias`` command line: synth, train, generate, eval, audit, embed, ssim and pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage or invalid input.
Set ``DEBIAS_LOG`` to ``error``, ``info`` or ``debug`` for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ConfigFileError, RunConfig, load_config
from .data import BiasSpec, DataError, DomainDataset, load_dataset, render_digit_set, save_dataset, synth_biased_pair
from .eval import (
    ClassifierConfig,
    EvalError,
    centroid_gap,
    embed_domains,
    label_retention_audit,
    oracle_training_set,
    train_classifier,
    write_embedding_csv,
    write_results_json,
    write_retention_csv,
)
from .pipeline import (
    DEFAULT_SOURCE_BIAS,
    DEFAULT_TARGET_BIAS,
    PipelineOptions,
    run_pipeline,
    split_stratified,
    three_way_accuracy,
)
from .tensor_core import RngState
from .tensor_core.serialize import CheckpointError
from .trainer import ConfigMismatchError, TrainingError, config_hash, generate_intermediate, train_augmenter

log = logging.getLogger("debias")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# -- manifest ----------------------------------------------------------------------------

def describe_version() -> str:
    """``git describe``-style version of the source tree, or the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    seed: int
    started: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    finished: str = ""

    def write(self, out_dir: Path) -> None:
        self.finished = _now()
        (Path(out_dir) / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- helpers --------------------------------------------------------------------------------

def _load(path: str, n_classes: int, name: str) -> DomainDataset:
    return load_dataset(Path(path), n_classes, name)


def _clf_cfg(args) -> ClassifierConfig:
    return ClassifierConfig(epochs=args.clf_epochs, seed=args.seed)


def _staged_output(out: Path) -> Path:
    """Fresh sibling directory; renamed onto ``out`` only after the command succeeds."""
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _commit(tmp: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


# -- commands ----------------------------------------------------------------------------

def cmd_synth(args) -> RunManifest:
    try:
        src, tgt = BiasSpec.parse(args.source_bias), BiasSpec.parse(args.target_bias)
    except DataError as e:
        raise UsageError(str(e)) from e
    if args.base:
        base = _load(args.base, args.n_classes, "base")
    else:
        base = render_digit_set(args.n_images, seed=args.seed)
    out = Path(args.out)
    tmp = _staged_output(out)
    try:
        X, Y = synth_biased_pair(base, src, tgt, args.workers)
        save_dataset(X, tmp / "X")
        save_dataset(Y, tmp / "Y")
        with open(tmp / "correspondence.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["filename", "domain", "label"])
            for ds in (X, Y):
                for im in ds.images:
                    w.writerow([im.id, ds.name, im.label])
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, out)
    return RunManifest("synth", _hash_dict({"source": src.to_string(), "target": tgt.to_string(),
                                            "n_images": args.n_images}),
                       describe_version(), args.seed, "", {"base": args.base or "builtin-digits"},
                       {"X": str(out / "X"), "Y": str(out / "Y")})


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_train(args) -> RunManifest:
    cfg = _run_config(args)
    X = _load(args.source, args.n_classes, "X")
    Y = _load(args.target, args.n_classes, "Y")
    out = Path(args.out)
    train_augmenter(X, Y, cfg.train, out, cfg.generator, cfg.discriminator, cfg.ssim,
                    resume=Path(args.resume) if args.resume else None, max_steps=args.max_steps)
    return RunManifest("train", config_hash(cfg.train, cfg.generator, cfg.discriminator, cfg.ssim),
                       describe_version(), cfg.train.seed, "",
                       {"source": args.source, "target": args.target, "config": args.config or "default",
                        "resume": args.resume or ""},
                       {"checkpoint": str(out / "checkpoint"), "train_log": str(out / "train_log.csv")})


def cmd_generate(args) -> RunManifest:
    X = _load(args.source, args.n_classes, "X")
    out = Path(args.out)
    tmp = _staged_output(out)
    try:
        Z = generate_intermediate(Path(args.checkpoint), X, tmp, name="Z")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, out)
    return RunManifest("generate", Z.meta["config_hash"], describe_version(), args.seed or 0, "",
                       {"checkpoint": args.checkpoint, "source": args.source},
                       {"Z": str(out), "provenance": str(out / "provenance.csv")})


def cmd_eval(args) -> RunManifest:
    X = _load(args.source, args.n_classes, "X")
    Z = _load(args.intermediate, args.n_classes, "Z")
    Y = _load(args.target, args.n_classes, "Y")
    Y_train, Y_test = split_stratified(Y, args.seed, "Y_train", "Y_test")
    clf_cfg = _clf_cfg(args)
    acc = three_way_accuracy(X, Z, Y_train, Y_test, clf_cfg, args.trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_json(out / "results.json", {"accuracy": acc, "classifier": asdict(clf_cfg), "trials": args.trials})
    labels = {"source_only": "Source only", "debiased": "Debiased (train on Z)", "target_trained": "Trained on target"}
    print(f"{'setting':<24}{'mean':>8}{'std':>8}   (test: {len(Y_test)} held-out target images)")
    for k, title in labels.items():
        print(f"{title:<24}{acc[k]['mean']:>8.4f}{acc[k]['std']:>8.4f}")
    return RunManifest("eval", _hash_dict(asdict(clf_cfg)), describe_version(), args.seed, "",
                       {"source": args.source, "intermediate": args.intermediate, "target": args.target},
                       {"results": str(out / "results.json")})


def cmd_audit(args) -> RunManifest:
    X = _load(args.source, args.n_classes, "X")
    Z = _load(args.intermediate, args.n_classes, "Z")
    prov = Path(args.intermediate) / "provenance.csv"
    mean_ssim = None
    if prov.exists():
        from .trainer import read_provenance
        rows = read_provenance(prov)
        if [g for g, _, _ in rows] != Z.ids or [s for _, s, _ in rows] != X.ids:
            raise EvalError(f"missing provenance: {prov} does not link Z to the given source one-to-one")
        mean_ssim = {g: s for g, _, s in rows}
    oracle = None
    if args.mode == "ground_truth":
        if not args.oracle_train:
            raise UsageError("--mode ground_truth needs --oracle-train with at least one labelled directory")
        doms = [_load(p, args.n_classes, f"oracle{i}") for i, p in enumerate(args.oracle_train)]
        oracle, _ = train_classifier(oracle_training_set(*doms), _clf_cfg(args))
    report = label_retention_audit(X, Z, args.mode, args.threshold, oracle, mean_ssim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_retention_csv(out / "retention.csv", report)
    write_results_json(out / "results.json", {"retention": report.to_dict()})
    print(f"retention ({args.mode}): {report.retention:.4f} over {len(report.rows)} images")
    return RunManifest("audit", _hash_dict({"mode": args.mode, "threshold": args.threshold}), describe_version(),
                       args.seed, "", {"source": args.source, "intermediate": args.intermediate,
                                       "oracle_train": ",".join(args.oracle_train or [])},
                       {"retention": str(out / "retention.csv")})


def cmd_embed(args) -> RunManifest:
    X = _load(args.source, args.n_classes, "X")
    Z = _load(args.intermediate, args.n_classes, "Z")
    Y = _load(args.target, args.n_classes, "Y")
    clf, _ = train_classifier(X, _clf_cfg(args))
    pts = embed_domains(clf, X, Z, Y, args.n_samples, args.method, RngState(args.seed).child("embed"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(out / "embedding.csv", pts)
    d_st, d_it = centroid_gap(pts)
    write_results_json(out / "results.json", {"embedding": {"method": args.method, "n_per_domain": args.n_samples,
                                                            "feature_dim": clf.feature_dim,
                                                            "d_source_target": d_st,
                                                            "d_intermediate_target": d_it}})
    print(f"centroid distance source-target {d_st:.4f}, intermediate-target {d_it:.4f}")
    return RunManifest("embed", _hash_dict({"method": args.method, "n": args.n_samples}), describe_version(),
                       args.seed, "", {"source": args.source, "intermediate": args.intermediate,
                                       "target": args.target}, {"embedding": str(out / "embedding.csv")})


def cmd_ssim(args) -> None:
    from .data import read_ppm
    from .ssim import mean_ssim
    try:
        a, b = read_ppm(Path(args.a)), read_ppm(Path(args.b))
    except (OSError, DataError) as e:
        raise DataError(f"cannot read image: {e}") from e
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    print(f"{mean_ssim(a.astype(np.float64), b.astype(np.float64)):.6f}")
    return None


def cmd_pipeline(args) -> RunManifest:
    cfg = _run_config(args)
    opts = PipelineOptions(n_images=args.n_images, source_bias=args.source_bias, target_bias=args.target_bias,
                           n_trials=args.trials, classifier=ClassifierConfig(epochs=args.clf_epochs),
                           workers=args.workers)
    try:
        BiasSpec.parse(opts.source_bias), BiasSpec.parse(opts.target_bias)
    except DataError as e:
        raise UsageError(str(e)) from e
    res = run_pipeline(args.out, cfg, opts)
    acc = res["accuracy"]
    print(f"source only {acc['source_only']['mean']:.4f}  debiased {acc['debiased']['mean']:.4f}  "
          f"target trained {acc['target_trained']['mean']:.4f}")
    print(f"retention {res['retention']['ground_truth']['retention']:.4f}  centroid gap "
          f"{res['embedding']['d_source_target']:.3f} -> {res['embedding']['d_intermediate_target']:.3f}")
    return RunManifest("pipeline", config_hash(cfg.train, cfg.generator, cfg.discriminator, cfg.ssim),
                       describe_version(), cfg.train.seed, "", {"config": args.config or "default"},
                       {"results": str(Path(args.out) / "results.json")})


# -- parser ---------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed_default: int | None = 0) -> None:
    p.add_argument("--seed", type=int, default=seed_default,
                   help="root seed for every random choice made by this command"
                        + (" (default: %(default)s)" if seed_default is not None else
                           " (default: train.seed from the config)"))
    p.add_argument("--workers", type=int, default=1, help="parallel workers for data preparation (default: 1)")
    p.add_argument("--n-classes", type=int, default=10, help="size of the label space (default: 10)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="debias", description="Dataset debiasing through a generated intermediate domain.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="write a biased source/target pair", description="Split a base set into "
                       "disjoint halves and bias each one, writing X/, Y/ and correspondence.csv.")
    s.add_argument("--base", help="labelled base directory (default: render the built-in digit set)")
    s.add_argument("--n-images", type=int, default=1000, help="size of the built-in digit set (default: 1000)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--source-bias", default=DEFAULT_SOURCE_BIAS, help="bias spec for X (default: %(default)s)")
    s.add_argument("--target-bias", default=DEFAULT_TARGET_BIAS, help="bias spec for Y (default: %(default)s)")
    _common(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the augmentation networks", description="Train G1: X->Y and G2: Y->X "
                       "with their discriminators; writes checkpoint/ and train_log.csv.")
    t.add_argument("--source", required=True, help="labelled source directory X")
    t.add_argument("--target", required=True, help="target directory Y (labels ignored)")
    t.add_argument("--config", help="key = value config file (default: desk preset)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--max-steps", type=int, help="stop at this absolute step count")
    _common(t, None)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="map X to the intermediate domain", description="Run G1 over every "
                       "source image (batch size 1) and keep labels; writes the domain and provenance.csv.")
    g.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    g.add_argument("--source", required=True, help="labelled source directory X")
    g.add_argument("--out", required=True, help="output directory for Z")
    _common(g)
    g.set_defaults(func=cmd_generate)

    def eval_args(q, target=True):
        q.add_argument("--source", required=True, help="labelled source directory X")
        q.add_argument("--intermediate", required=True, help="generated directory Z")
        if target:
            q.add_argument("--target", required=True, help="labelled target directory Y")
        q.add_argument("--out", required=True, help="output directory")
        q.add_argument("--clf-epochs", type=int, default=ClassifierConfig().epochs,
                       help="classifier training epochs (default: %(default)s)")
        _common(q)

    e = sub.add_parser("eval", help="three-way cross-domain accuracy", description="Mean and stdev accuracy on "
                       "held-out target images for classifiers trained on X, on Z and on target images.")
    eval_args(e)
    e.add_argument("--trials", type=int, default=15, help="classifier trials per setting (default: %(default)s)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="label-retention audit of Z", description="Check that generated images "
                       "still show their carried labels.")
    eval_args(a, target=False)
    a.add_argument("--mode", choices=("ground_truth", "ssim_proxy"), default="ground_truth",
                   help="oracle re-classification or SSIM threshold (default: %(default)s)")
    a.add_argument("--threshold", type=float, default=0.3, help="ssim_proxy suspect threshold (default: 0.3)")
    a.add_argument("--oracle-train", nargs="+", metavar="DIR",
                   help="labelled directories the ground-truth oracle is trained on")
    a.set_defaults(func=cmd_audit)

    m = sub.add_parser("embed", help="2-D embedding of the three domains", description="Penultimate features of "
                       "a source-trained classifier reduced to 2-D; writes embedding.csv.")
    eval_args(m)
    m.add_argument("--method", choices=("tsne", "pca"), default="tsne", help="reduction (default: %(default)s)")
    m.add_argument("--n-samples", type=int, default=100, help="points per domain (default: %(default)s)")
    m.set_defaults(func=cmd_embed)

    q = sub.add_parser("ssim", help="mean SSIM of two images", description="Print the mean SSIM (11x11 Gaussian "
                       "window, sigma 1.5) of two same-sized PPM/PGM images to 6 decimals. Writes no files.")
    q.add_argument("--a", required=True, help="first image")
    q.add_argument("--b", required=True, help="second image")
    q.set_defaults(func=cmd_ssim)

    f = sub.add_parser("pipeline", help="synth, train, generate, eval, audit and embed in one run",
                       description="The full desk experiment written into one directory.")
    f.add_argument("--out", required=True, help="run directory")
    f.add_argument("--config", help="key = value config file (default: desk preset)")
    f.add_argument("--n-images", type=int, default=1000, help="size of the built-in digit set (default: 1000)")
    f.add_argument("--source-bias", default=DEFAULT_SOURCE_BIAS, help="bias spec for X (default: %(default)s)")
    f.add_argument("--target-bias", default=DEFAULT_TARGET_BIAS, help="bias spec for Y (default: %(default)s)")
    f.add_argument("--trials", type=int, default=15, help="classifier trials per setting (default: %(default)s)")
    f.add_argument("--clf-epochs", type=int, default=ClassifierConfig().epochs,
                   help="classifier training epochs (default: %(default)s)")
    _common(f, None)
    f.set_defaults(func=cmd_pipeline)
    return p


def _setup_logging() -> None:
    level = os.environ.get("DEBIAS_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print(f"debias: warning: DEBIAS_LOG={level!r} is not one of error, info, debug", file=sys.stderr)
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


USAGE_ERRORS: tuple[type[BaseException], ...] = (UsageError, ConfigFileError)
RUNTIME_ERRORS: tuple[type[BaseException], ...] = (DataError, EvalError, TrainingError, ConfigMismatchError,
                                                    CheckpointError, ValueError, OSError)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _now()
    func: Callable[..., RunManifest | None] = args.func
    try:
        manifest = func(args)
    except USAGE_ERRORS as e:
        print(f"debias {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        print(f"debias {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if manifest is None:
        return 0
    manifest.started = started
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

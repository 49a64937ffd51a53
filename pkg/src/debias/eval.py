"""Downstream evaluation: cross-domain accuracy, label-retention audits and domain embeddings."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataError, DomainDataset
from .tensor_core import Adam, NonFiniteError, RngState, Tensor, backward, no_grad, ops
from .tensor_core.layers import ParamSet

N_TRIALS = 15
SSIM_PROXY_THRESHOLD = 0.3
DOMAIN_TAGS = ("source", "intermediate", "target")


class EvalError(ValueError):
    pass


class DegenerateLabelsError(EvalError):
    pass


class ClassSpaceMismatchError(EvalError):
    pass


# -- classifier ------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    """Two conv blocks (conv, ReLU, 2x2 max-pool) then a hidden layer and the class head."""

    channels: tuple[int, int] = (16, 32)
    kernel: int = 5
    hidden: int = 64
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 2:
            raise EvalError("the classifier has exactly two conv blocks")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise EvalError("classifier kernel must be odd")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.hidden < 1:
            raise EvalError("invalid classifier training settings")


@dataclass
class ClassifierParams:
    cfg: ClassifierConfig
    params: ParamSet
    n_classes: int
    image_size: int
    in_channels: int = 3

    @property
    def feature_dim(self) -> int:
        return self.cfg.hidden


def _he(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(gen.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32), requires_grad=True)


def build_classifier(cfg: ClassifierConfig, n_classes: int, image_size: int, in_channels: int = 3,
                     seed: int | None = None) -> ClassifierParams:
    if image_size % 4:
        raise EvalError("classifier image size must be divisible by 4")
    gen = RngState(cfg.seed if seed is None else seed).child("classifier").generator()
    c1, c2 = cfg.channels
    k = cfg.kernel
    p = ParamSet()
    p.tensors["conv1.weight"] = _he(gen, (c1, in_channels, k, k), in_channels * k * k)
    p.tensors["conv1.bias"] = Tensor(np.zeros(c1, np.float32), requires_grad=True)
    p.tensors["conv2.weight"] = _he(gen, (c2, c1, k, k), c1 * k * k)
    p.tensors["conv2.bias"] = Tensor(np.zeros(c2, np.float32), requires_grad=True)
    flat = c2 * (image_size // 4) ** 2
    p.tensors["fc1.weight"] = _he(gen, (cfg.hidden, flat), flat)
    p.tensors["fc1.bias"] = Tensor(np.zeros(cfg.hidden, np.float32), requires_grad=True)
    p.tensors["fc2.weight"] = _he(gen, (n_classes, cfg.hidden), cfg.hidden)
    p.tensors["fc2.bias"] = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)
    return ClassifierParams(cfg, p, n_classes, image_size, in_channels)


def classifier_features(clf: ClassifierParams, x: Tensor) -> Tensor:
    """Penultimate-layer activations, N x hidden."""
    p = clf.params
    pad = clf.cfg.kernel // 2
    h = x * (1.0 / 255.0) - 0.5
    h = ops.max_pool2d(ops.relu(ops.conv2d(h, p["conv1.weight"], p["conv1.bias"], padding=pad)))
    h = ops.max_pool2d(ops.relu(ops.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=pad)))
    h = ops.reshape(h, (h.shape[0], -1))
    return ops.relu(ops.linear(h, p["fc1.weight"], p["fc1.bias"]))


def classifier_logits(clf: ClassifierParams, x: Tensor) -> Tensor:
    p = clf.params
    return ops.linear(classifier_features(clf, x), p["fc2.weight"], p["fc2.bias"])


def _check_images(clf: ClassifierParams, arr: np.ndarray) -> None:
    if arr.ndim != 4 or arr.shape[1:] != (clf.in_channels, clf.image_size, clf.image_size):
        raise EvalError(f"classifier expects N,{clf.in_channels},{clf.image_size},{clf.image_size} images, "
                        f"got {arr.shape}")


def train_classifier(train: DomainDataset, cfg: ClassifierConfig = ClassifierConfig(), seed: int | None = None
                     ) -> tuple[ClassifierParams, float]:
    """Cross-entropy training with Adam; returns the classifier and its final training accuracy."""
    if len(train) == 0:
        raise EvalError("train_classifier: empty training set")
    labels = train.labels
    if len(np.unique(labels)) < 2:
        raise DegenerateLabelsError(f"train_classifier: {train.name!r} has fewer than two distinct labels")
    xs = train.arrays()
    seed = cfg.seed if seed is None else seed
    clf = build_classifier(cfg, train.n_classes, xs.shape[2], xs.shape[1], seed)
    opt = Adam(clf.params.parameters(), lr=cfg.lr)
    order_rng = RngState(seed).child("order")
    for epoch in range(cfg.epochs):
        perm = order_rng.generator().permutation(len(xs))
        for lo in range(0, len(xs), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            opt.zero_grad()
            try:
                loss = ops.cross_entropy(classifier_logits(clf, Tensor(xs[idx])), labels[idx])
                backward(loss)
            except NonFiniteError as e:
                raise EvalError(f"classifier training diverged in epoch {epoch}: {e}") from e
            opt.step()
        opt.zero_grad()
    return clf, float(np.mean(predict(clf, xs) == labels))


def predict(clf: ClassifierParams, images: np.ndarray, batch: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    _check_images(clf, images)
    out = []
    with no_grad():
        for lo in range(0, len(images), batch):
            out.append(classifier_logits(clf, Tensor(images[lo:lo + batch])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def extract_features(clf: ClassifierParams, images: np.ndarray, batch: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    _check_images(clf, images)
    with no_grad():
        return np.concatenate([classifier_features(clf, Tensor(images[lo:lo + batch])).data
                               for lo in range(0, len(images), batch)]).astype(np.float64)


def cross_accuracy(clf: ClassifierParams, test: DomainDataset) -> float:
    """Fraction of ``test`` whose argmax prediction equals the label."""
    if len(test) == 0:
        raise EvalError("cross_accuracy: empty test set")
    if test.n_classes != clf.n_classes:
        raise ClassSpaceMismatchError(f"classifier has {clf.n_classes} classes, {test.name!r} has {test.n_classes}")
    return float(np.mean(predict(clf, test.arrays()) == test.labels))


@dataclass
class TrialResult:
    train: str
    test: str
    accuracies: list[float]
    seeds: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"train": self.train, "test": self.test, "mean": self.mean, "std": self.std,
                "accuracies": self.accuracies, "seeds": self.seeds}


def trial_seeds(seed: int, n: int = N_TRIALS) -> list[int]:
    """The pinned list of classifier-training seeds; trials differ only in this seed."""
    return [int(RngState(seed).child("trial", i).seed % (2 ** 31)) for i in range(n)]


def cross_accuracy_trials(train: DomainDataset, test: DomainDataset, cfg: ClassifierConfig = ClassifierConfig(),
                          seeds: Sequence[int] | None = None) -> TrialResult:
    seeds = list(trial_seeds(cfg.seed) if seeds is None else seeds)
    accs = [cross_accuracy(train_classifier(train, cfg, s)[0], test) for s in seeds]
    return TrialResult(train.name, test.name, accs, seeds)


# -- label retention -------------------------------------------------------------------

@dataclass
class RetentionRow:
    id: str
    carried_label: int
    oracle_label: int | None
    mean_ssim: float
    suspect: bool


@dataclass
class RetentionReport:
    mode: str
    retention: float
    threshold: float | None
    rows: list[RetentionRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "retention": self.retention, "threshold": self.threshold, "n": len(self.rows)}


def label_retention_audit(X: DomainDataset, Z: DomainDataset, mode: str = "ground_truth",
                          threshold: float = SSIM_PROXY_THRESHOLD, oracle: ClassifierParams | None = None,
                          mean_ssim: dict[str, float] | None = None) -> RetentionReport:
    """How many generated images still show the class they carry.

    ``ground_truth`` re-labels Z with ``oracle``; ``ssim_proxy`` flags pairs whose
    mean SSIM to their source falls below ``threshold``. Provenance is the
    shared id between each Z image and its X source.
    """
    if mode not in ("ground_truth", "ssim_proxy"):
        raise EvalError(f"unknown audit mode {mode!r}")
    if len(X) != len(Z) or X.ids != Z.ids:
        raise EvalError("missing provenance: Z images do not correspond one-to-one (by id) with X")
    if mean_ssim is None:
        mean_ssim = Z.meta.get("mean_ssim")
    if mean_ssim is None:
        from .ssim import pairwise_mean_ssim
        vals = pairwise_mean_ssim([im.pixels for im in X.images], [im.pixels for im in Z.images])
        mean_ssim = dict(zip(Z.ids, map(float, vals)))
    missing = [i for i in Z.ids if i not in mean_ssim]
    if missing:
        raise EvalError(f"missing provenance SSIM for {missing[0]}")
    carried = Z.labels
    ssim = np.array([mean_ssim[i] for i in Z.ids])
    if mode == "ground_truth":
        if oracle is None:
            raise EvalError("ground_truth audit needs an oracle classifier")
        if oracle.n_classes != Z.n_classes:
            raise ClassSpaceMismatchError("oracle class space differs from Z")
        pred = predict(oracle, Z.arrays()) if len(Z) else np.zeros(0, np.int64)
        suspect = pred != carried
        rows = [RetentionRow(i, int(c), int(p), float(s), bool(b))
                for i, c, p, s, b in zip(Z.ids, carried, pred, ssim, suspect)]
        thr = None
    else:
        suspect = ssim < threshold
        rows = [RetentionRow(i, int(c), None, float(s), bool(b)) for i, c, s, b in zip(Z.ids, carried, ssim, suspect)]
        thr = threshold
    retention = 1.0 - float(np.mean(suspect)) if len(Z) else 1.0
    return RetentionReport(mode, retention, thr, rows)


def oracle_training_set(*domains: DomainDataset, name: str = "oracle") -> DomainDataset:
    """Union of labelled domains; ids are prefixed with the domain name to stay unique."""
    from dataclasses import replace
    ims = tuple(replace(im, id=f"{d.name}/{im.id}") for d in domains for im in d.images)
    return DomainDataset(name, ims, max(d.n_classes for d in domains))


# -- embeddings ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingPoint:
    domain: str
    x: float
    y: float


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Projection on the two leading principal axes (variance along dim 0 >= dim 1)."""
    f = np.asarray(features, dtype=np.float64)
    f = f - f.mean(axis=0)
    _, _, vt = np.linalg.svd(f, full_matrices=False)
    out = f @ vt[:2].T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def _row_entropy_probs(d2_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    p = np.exp(-(d2_row - d2_row.min()) * beta)
    s = p.sum()
    p /= s
    h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
    return p, h


def tsne_affinities(features: np.ndarray, perplexity: float = 30.0, tol: float = 1e-5) -> np.ndarray:
    """Symmetrised joint probabilities P with per-point Gaussian widths matched to ``perplexity``."""
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    if n < 2:
        raise EvalError("t-SNE needs at least two points")
    perplexity = min(perplexity, (n - 1) / 3.0)
    sq = np.sum(f * f, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * f @ f.T, 0.0)
    target = math.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(100):
            p, h = _row_entropy_probs(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
    P = (P + P.T) / (2 * n)
    return np.maximum(P, 1e-12)


def tsne_kl(Y: np.ndarray, P: np.ndarray) -> float:
    """KL(P || Q) with Student-t similarities Q in the embedding."""
    sq = np.sum(Y * Y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * Y @ Y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = ~np.eye(len(Y), dtype=bool)
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_grad(Y: np.ndarray, P: np.ndarray) -> np.ndarray:
    """d KL / d Y = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)."""
    sq = np.sum(Y * Y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * Y @ Y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    W = (P - Q) * num
    np.fill_diagonal(W, 0.0)
    return 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y


def tsne(features: np.ndarray, rng: RngState, perplexity: float = 30.0, n_iter: int = 1000,
         learning_rate: float = 200.0, exaggeration: float = 12.0, exaggeration_iters: int = 250) -> np.ndarray:
    """Exact t-SNE by gradient descent with momentum, adaptive gains and early exaggeration."""
    P = tsne_affinities(features, perplexity)
    n = len(P)
    Y = rng.generator().normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(n_iter):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        g = tsne_grad(Y, P * exag)
        gains = np.where(np.sign(g) != np.sign(update), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * g
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    return Y


def embed_domains(clf: ClassifierParams, X: DomainDataset, Z: DomainDataset, Y: DomainDataset, n_samples: int = 100,
                  method: str = "tsne", rng: RngState | None = None, perplexity: float = 30.0,
                  n_iter: int = 1000) -> list[EmbeddingPoint]:
    """Penultimate features of ``n_samples`` random images per domain, reduced to 2-D."""
    if method not in ("tsne", "pca"):
        raise EvalError(f"unknown embedding method {method!r}")
    if n_samples < 1 or n_samples > min(len(X), len(Z), len(Y)):
        raise EvalError(f"insufficient samples: need {n_samples} per domain, smallest domain has "
                        f"{min(len(X), len(Z), len(Y))}")
    rng = rng or RngState(0)
    feats = []
    for tag, ds in zip(DOMAIN_TAGS, (X, Z, Y)):
        idx = np.sort(rng.child("sample", tag).generator().choice(len(ds), size=n_samples, replace=False))
        feats.append(extract_features(clf, ds.arrays()[idx]))
    f = np.concatenate(feats)
    coords = pca_2d(f) if method == "pca" else tsne(f, rng.child("tsne"), perplexity, n_iter)
    tags = [t for t in DOMAIN_TAGS for _ in range(n_samples)]
    return [EmbeddingPoint(t, float(a), float(b)) for t, (a, b) in zip(tags, coords)]


def centroid_gap(points: Sequence[EmbeddingPoint]) -> tuple[float, float]:
    """(d(source, target), d(intermediate, target)) between tag centroids."""
    cents = {}
    for tag in DOMAIN_TAGS:
        pts = np.array([(p.x, p.y) for p in points if p.domain == tag])
        if len(pts) == 0:
            raise EvalError(f"centroid_gap: no points tagged {tag!r}")
        cents[tag] = pts.mean(axis=0)
    return (float(np.linalg.norm(cents["source"] - cents["target"])),
            float(np.linalg.norm(cents["intermediate"] - cents["target"])))


# -- output files ------------------------------------------------------------------------

def write_embedding_csv(path: Path, points: Sequence[EmbeddingPoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["domain", "x", "y"])
        for p in points:
            w.writerow([p.domain, repr(float(p.x)), repr(float(p.y))])


def read_embedding_csv(path: Path) -> list[EmbeddingPoint]:
    with open(path, newline="") as f:
        return [EmbeddingPoint(r["domain"], float(r["x"]), float(r["y"])) for r in csv.DictReader(f)]


def write_retention_csv(path: Path, report: RetentionReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "carried_label", "oracle_label", "mean_ssim", "suspect"])
        for r in report.rows:
            w.writerow([r.id, r.carried_label, "" if r.oracle_label is None else r.oracle_label,
                        repr(r.mean_ssim), int(r.suspect)])


def write_results_json(path: Path, results: dict) -> None:
    Path(path).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


def classifier_config_dict(cfg: ClassifierConfig) -> dict:
    return asdict(cfg)

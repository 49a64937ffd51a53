import math
from dataclasses import replace

import numpy as np
import pytest

from debias.data import DomainDataset, LabeledImage, render_digit_set
from debias.eval import (
    ClassifierConfig,
    ClassSpaceMismatchError,
    DegenerateLabelsError,
    EmbeddingPoint,
    EvalError,
    build_classifier,
    centroid_gap,
    cross_accuracy,
    cross_accuracy_trials,
    embed_domains,
    label_retention_audit,
    pca_2d,
    predict,
    read_embedding_csv,
    train_classifier,
    tsne,
    tsne_affinities,
    tsne_grad,
    tsne_kl,
    write_embedding_csv,
    write_retention_csv,
)
from debias.tensor_core import RngState

from oracles import kl_tsne_objective

FAST = ClassifierConfig(epochs=3)


def toy_two_class(n=80, size=16, seed=0):
    """Bright blob on the left for class 0, on the right for class 1."""
    g = np.random.default_rng(seed)
    ims = []
    for i in range(n):
        label = i % 2
        px = g.uniform(0, 60, size=(3, size, size))
        cols = slice(0, size // 2) if label == 0 else slice(size // 2, size)
        px[:, :, cols] += 150
        ims.append(LabeledImage(np.clip(px, 0, 255).astype(np.uint8), label, f"t{i}"))
    return DomainDataset("toy", tuple(ims), 2)


@pytest.fixture(scope="module")
def digits():
    return render_digit_set(200, seed=5)


@pytest.fixture(scope="module")
def oracle(digits):
    # trained until it fits its own images exactly, so Z == X must audit clean
    clf, acc = train_classifier(digits, ClassifierConfig(epochs=10))
    assert acc == 1.0
    return clf


# -- classifier ----------------------------------------------------------------------

def test_toy_set_learned_within_five_epochs():
    clf, acc = train_classifier(toy_two_class(), ClassifierConfig(epochs=5))
    assert acc > 0.95


def test_same_seed_same_params():
    ds = toy_two_class(20)
    a, _ = train_classifier(ds, replace(FAST, epochs=1), seed=4)
    b, _ = train_classifier(ds, replace(FAST, epochs=1), seed=4)
    for k in a.params.tensors:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_single_class_rejected():
    ds = toy_two_class(10)
    one = DomainDataset("one", tuple(im for im in ds.images if im.label == 0), 2)
    with pytest.raises(DegenerateLabelsError):
        train_classifier(one)


def test_architecture_has_two_conv_blocks():
    clf = build_classifier(ClassifierConfig(), 10, 32)
    assert sorted(k for k in clf.params.tensors if k.startswith("conv")) == [
        "conv1.bias", "conv1.weight", "conv2.bias", "conv2.weight"]
    assert clf.params["fc1.weight"].shape == (64, 32 * 8 * 8)
    with pytest.raises(EvalError):
        ClassifierConfig(channels=(8, 8, 8))


def test_accuracy_on_own_training_set_matches_snapshot():
    ds = toy_two_class(40)
    clf, acc = train_classifier(ds, FAST)
    assert cross_accuracy(clf, ds) >= acc


def test_untrained_classifier_is_at_chance(digits):
    clf = build_classifier(ClassifierConfig(), 10, 32, seed=1)
    assert abs(cross_accuracy(clf, digits) - 0.1) <= 0.05


def test_class_space_mismatch(digits):
    clf = build_classifier(ClassifierConfig(), 2, 32)
    with pytest.raises(ClassSpaceMismatchError):
        cross_accuracy(clf, digits)


def test_trials_reproducible_with_spread():
    ds = toy_two_class(24)
    a = cross_accuracy_trials(ds, ds, replace(FAST, epochs=1), seeds=[1, 2, 3])
    b = cross_accuracy_trials(ds, ds, replace(FAST, epochs=1), seeds=[1, 2, 3])
    assert a.accuracies == b.accuracies and a.mean == b.mean
    assert len(a.accuracies) == 3 and a.std >= 0
    assert a.to_dict()["seeds"] == [1, 2, 3]


# -- label retention -------------------------------------------------------------------

def test_identical_domains_retain_everything(digits, oracle):
    assert label_retention_audit(digits, digits, "ground_truth", oracle=oracle).retention == 1.0
    assert label_retention_audit(digits, digits, "ssim_proxy").retention == 1.0


def test_permuted_labels_detected(digits, oracle):
    perm = np.random.default_rng(0).permutation(digits.labels)
    broken = DomainDataset("Zbad", tuple(replace(im, label=int(l)) for im, l in zip(digits.images, perm)), 10)
    report = label_retention_audit(digits, broken, "ground_truth", oracle=oracle)
    assert report.retention <= 2 / 10
    assert sum(r.suspect for r in report.rows) == round((1 - report.retention) * len(digits))


def test_ssim_proxy_flags_noise(digits):
    g = np.random.default_rng(1)
    noise = DomainDataset("N", tuple(replace(im, pixels=g.integers(0, 256, im.pixels.shape).astype(np.uint8))
                                     for im in digits.images[:20]), 10)
    report = label_retention_audit(digits.subset(range(20)), noise, "ssim_proxy", threshold=0.3)
    assert report.retention < 0.1 and report.threshold == 0.3


def test_missing_provenance(digits, oracle):
    with pytest.raises(EvalError, match="provenance"):
        label_retention_audit(digits, digits.subset(range(10)), oracle=oracle)
    with pytest.raises(EvalError, match="provenance"):
        label_retention_audit(digits, digits, "ssim_proxy", mean_ssim={})


def test_retention_csv(digits, tmp_path):
    report = label_retention_audit(digits.subset(range(3)), digits.subset(range(3)), "ssim_proxy")
    write_retention_csv(tmp_path / "r.csv", report)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,carried_label,oracle_label,mean_ssim,suspect" and len(lines) == 4


# -- t-SNE --------------------------------------------------------------------------------

@pytest.mark.parametrize("n,dim,seed", [(10, 2, 0), (6, 2, 1), (12, 3, 2)])
def test_tsne_gradient_matches_finite_differences(n, dim, seed):
    g = np.random.default_rng(seed)
    P = tsne_affinities(g.normal(size=(n, 5)), perplexity=3.0)
    Y = g.normal(size=(n, dim))
    assert tsne_kl(Y, P) == pytest.approx(kl_tsne_objective(Y, P), rel=1e-10)
    num = np.zeros_like(Y)
    h = 1e-6
    for idx in np.ndindex(*Y.shape):
        Yp, Ym = Y.copy(), Y.copy()
        Yp[idx] += h
        Ym[idx] -= h
        num[idx] = (kl_tsne_objective(Yp, P) - kl_tsne_objective(Ym, P)) / (2 * h)
    ana = tsne_grad(Y, P)
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-3


def test_affinities_normalised_and_local():
    g = np.random.default_rng(3)
    f = np.vstack([g.normal(0, 1, (20, 4)), g.normal(20, 1, (20, 4))])
    P = tsne_affinities(f, perplexity=10.0)
    assert P.sum() == pytest.approx(1.0) and np.allclose(P, P.T)
    assert P[:20, :20].sum() + P[20:, 20:].sum() > 0.99
    # a smaller perplexity concentrates each row on fewer neighbours
    sharp = tsne_affinities(f, perplexity=3.0)
    assert np.sort(sharp[0])[-3:].sum() > np.sort(P[0])[-3:].sum()


def test_tsne_separates_two_clusters():
    g = np.random.default_rng(7)
    a = g.normal(0, 1, size=(15, 10))
    b = g.normal(8, 1, size=(15, 10))
    Y = tsne(np.vstack([a, b]), RngState(0), perplexity=5.0)
    ya, yb = Y[:15], Y[15:]
    inter = np.linalg.norm(ya.mean(0) - yb.mean(0))
    intra = np.mean([np.linalg.norm(ya - ya.mean(0), axis=1).mean(), np.linalg.norm(yb - yb.mean(0), axis=1).mean()])
    assert inter > 3 * intra


def test_pca_variance_ordering():
    f = np.random.default_rng(0).normal(size=(50, 6)) * np.array([1, 5, 0.5, 3, 0.1, 2])
    out = pca_2d(f)
    assert out.shape == (50, 2) and out[:, 0].var() >= out[:, 1].var()
    eig = np.linalg.eigvalsh(np.cov(f.T, bias=True))
    np.testing.assert_allclose([out[:, 0].var(), out[:, 1].var()], eig[::-1][:2], rtol=1e-9)


# -- embeddings ----------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["pca", "tsne"])
def test_identical_domains_share_centroids(digits, method):
    clf = build_classifier(ClassifierConfig(), 10, 32, seed=0)
    pts = embed_domains(clf, digits, digits, digits, 30, method, RngState(1), n_iter=300)
    assert [p.domain for p in pts].count("intermediate") == 30 and len(pts) == 90
    xy = np.array([(p.x, p.y) for p in pts])
    spread = np.linalg.norm(xy - xy.mean(0), axis=1).mean()
    d_st, d_it = centroid_gap(pts)
    # each domain draws its own 30-sample subset, so only sampling noise separates them
    assert d_st < 0.5 * spread and d_it < 0.5 * spread


def test_embed_insufficient_samples(digits):
    clf = build_classifier(ClassifierConfig(), 10, 32)
    with pytest.raises(EvalError, match="insufficient"):
        embed_domains(clf, digits, digits.subset(range(5)), digits, 10, "pca")


def _points(src, inter, tgt):
    return ([EmbeddingPoint("source", *p) for p in src] + [EmbeddingPoint("intermediate", *p) for p in inter]
            + [EmbeddingPoint("target", *p) for p in tgt])


def test_centroid_gap_cases():
    g = np.random.default_rng(0)
    src, tgt = g.normal(0, 1, (20, 2)), g.normal(5, 1, (20, 2))
    d_st, d_it = centroid_gap(_points(src, tgt, tgt))
    assert d_it == pytest.approx(0.0, abs=1e-12) and d_st > 3
    d_st, d_it = centroid_gap(_points(src, src, tgt))
    assert d_st == pytest.approx(d_it)
    with pytest.raises(EvalError, match="target"):
        centroid_gap([EmbeddingPoint("source", 0, 0), EmbeddingPoint("intermediate", 1, 1)])


@pytest.mark.parametrize("angle,shift", [(0.3, (4.0, -2.0)), (2.0, (0.0, 0.0)), (-1.1, (100.0, 7.0))])
def test_centroid_gap_rigid_invariance(angle, shift):
    g = np.random.default_rng(1)
    pts = [g.normal(0, 1, (10, 2)), g.normal(2, 1, (10, 2)), g.normal(4, 1, (10, 2))]
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    moved = [p @ R.T + np.array(shift) for p in pts]
    np.testing.assert_allclose(centroid_gap(_points(*moved)), centroid_gap(_points(*pts)), rtol=1e-9)


def test_embedding_csv_round_trip(tmp_path):
    pts = _points(np.ones((2, 2)), np.zeros((2, 2)), np.full((2, 2), 0.1))
    write_embedding_csv(tmp_path / "e.csv", pts)
    assert read_embedding_csv(tmp_path / "e.csv") == pts
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "domain,x,y"


def test_predict_shape_check():
    clf = build_classifier(ClassifierConfig(), 10, 32)
    with pytest.raises(EvalError):
        predict(clf, np.zeros((1, 3, 16, 16)))

from dataclasses import replace

import numpy as np
import pytest

from debias.data import BiasSpec, DataError, DomainDataset, LabeledImage, render_digit_set, synth_biased_pair
from debias.networks import DiscriminatorConfig, GeneratorConfig, identity_generator
from debias.ssim import SsimConfig
from debias.tensor_core import RngState
from debias.trainer import (
    ConfigMismatchError,
    ImageBuffer,
    TrainConfig,
    TrainingError,
    generate_intermediate,
    init_state,
    load_checkpoint,
    read_provenance,
    read_train_log,
    save_checkpoint,
    train_augmenter,
)

GEN = GeneratorConfig(base_channels=4, n_residual_blocks=1, image_size=16)
DISC = DiscriminatorConfig(base_channels=4)
SSIM = SsimConfig(window_size=7)


@pytest.fixture(scope="module")
def pair():
    base = render_digit_set(40, size=16, seed=0)
    return synth_biased_pair(base, BiasSpec(seed=1), BiasSpec(hue_shift=90, noise_sigma=4, seed=2))


def small(**kw):
    return TrainConfig(**{"epochs": 1, "batch_size": 4, **kw})


def train(pair, cfg, out=None, **kw):
    return train_augmenter(*pair, cfg, out, GEN, DISC, SSIM, **kw)


def state_arrays(state):
    out = {}
    for name in ("g1", "g2", "d1", "d2"):
        out.update(getattr(state, name).params.state_arrays(f"{name}/"))
    for name in ("opt_g", "opt_d"):
        st = getattr(state, name).state
        out.update({f"{name}/m{i}": m for i, m in enumerate(st.m)})
        out.update({f"{name}/v{i}": v for i, v in enumerate(st.v)})
    return out


def assert_states_equal(a, b):
    sa, sb = state_arrays(a), state_arrays(b)
    assert sa.keys() == sb.keys()
    for k in sa:
        assert sa[k].tobytes() == sb[k].tobytes(), k
    assert a.step == b.step and a.rng == b.rng
    for buf in ("buf1", "buf2"):
        ba, bb = getattr(a, buf), getattr(b, buf)
        assert ba.rng == bb.rng and len(ba.slots) == len(bb.slots)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(ba.slots, bb.slots))


# -- image buffer -----------------------------------------------------------------------

def test_first_push_returns_same_image():
    buf = ImageBuffer(50, RngState(0))
    img = np.ones((3, 2, 2), np.float32)
    assert buf.push_sample(img) is img and len(buf.slots) == 1


def test_buffer_never_exceeds_capacity():
    buf = ImageBuffer(50, RngState(1))
    for i in range(1000):
        buf.push_sample(np.full((1,), i, np.float32))
        assert len(buf.slots) == min(i + 1, 50)


def test_buffer_stale_rate_is_one_half():
    buf = ImageBuffer(50, RngState(2))
    for i in range(50):
        buf.push_sample(np.full((1,), -1.0 - i))
    stale = 0
    n = 10_000
    for i in range(n):
        img = np.full((1,), float(i))
        out = buf.push_sample(img)
        stale += out is not img
        assert len(buf.slots) == 50
    assert abs(stale / n - 0.5) < 0.02


def test_buffer_returns_a_stored_image_when_stale():
    buf = ImageBuffer(2, RngState(3))
    a, b = np.zeros(1), np.ones(1)
    buf.push_sample(a)
    buf.push_sample(b)
    for i in range(20):
        img = np.full(1, 10.0 + i)
        before = [s.copy() for s in buf.slots]
        out = buf.push_sample(img)
        if out is not img:
            assert any(np.array_equal(out, s) for s in before)
            assert any(np.array_equal(img, s) for s in buf.slots)


# -- configuration and errors ---------------------------------------------------------

@pytest.mark.parametrize("kw", [{"lam": -1}, {"lambda_ssim": -0.1}, {"lr": 0}, {"buffer_capacity": 0}])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_empty_domain_rejected(pair):
    empty = DomainDataset("E", (), 10)
    with pytest.raises(DataError, match="non-empty"):
        train_augmenter(empty, pair[1], small(), None, GEN, DISC, SSIM)


def test_image_size_mismatch_rejected(pair):
    with pytest.raises(ConfigMismatchError):
        train_augmenter(*pair, small(), None, replace(GEN, image_size=32), DISC, SSIM)


# -- training ----------------------------------------------------------------------------

def test_zero_epochs_gives_initialization(pair, tmp_path):
    state, reports = train(pair, small(epochs=0), tmp_path)
    assert reports == [] and state.step == 0
    assert_states_equal(load_checkpoint(tmp_path / "checkpoint"), init_state(small(epochs=0), GEN, DISC, SSIM))


def test_same_seed_identical_log(pair, tmp_path):
    train(pair, small(), tmp_path / "a")
    train(pair, small(), tmp_path / "b")
    a = (tmp_path / "a" / "train_log.csv").read_bytes()
    assert a == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert len(a.splitlines()) == 1 + 5
    train(pair, small(seed=1), tmp_path / "c")
    assert a != (tmp_path / "c" / "train_log.csv").read_bytes()


def test_resume_k_plus_k_equals_2k(pair, tmp_path):
    cfg = small(epochs=2)
    full, _ = train(pair, cfg, tmp_path / "full")
    train(pair, cfg, tmp_path / "split", max_steps=3)
    resumed, _ = train(pair, cfg, tmp_path / "split", resume=tmp_path / "split" / "checkpoint")
    assert resumed.step == full.step == 10
    assert_states_equal(resumed, full)
    assert ((tmp_path / "split" / "train_log.csv").read_bytes()
            == (tmp_path / "full" / "train_log.csv").read_bytes())


def test_checkpoint_round_trip_bit_exact(pair, tmp_path):
    state, _ = train(pair, small())
    save_checkpoint(state, tmp_path / "ck")
    assert_states_equal(load_checkpoint(tmp_path / "ck"), state)


def test_resume_with_other_config_rejected(pair, tmp_path):
    train(pair, small(), tmp_path)
    with pytest.raises(ConfigMismatchError):
        train(pair, small(lam=3.0), tmp_path, resume=tmp_path / "checkpoint")


def test_non_finite_aborts_and_keeps_last_checkpoint(pair, tmp_path):
    state, _ = train(pair, small(epochs=2), tmp_path, max_steps=5)
    state.g1.params["in.weight"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="step 6"):
        train(pair, small(epochs=2), tmp_path, resume=state)
    kept = load_checkpoint(tmp_path / "checkpoint")
    assert kept.step == 5 and np.all(np.isfinite(kept.g1.params["in.weight"].data))


def test_large_cycle_weight_halves_reconstruction_error(pair):
    # 200 steps with a heavy cycle weight on a small pair
    _, reports = train(pair, TrainConfig(lam=100.0, epochs=40, batch_size=4, augment=False), max_steps=200)
    cycle = np.array([r.cycle for r in reports])
    assert len(cycle) == 200
    assert cycle[-10:].mean() <= 0.5 * cycle[:10].mean()


def test_log_columns_sum_to_total(pair, tmp_path):
    train(pair, small(), tmp_path)
    log = read_train_log(tmp_path / "train_log.csv")
    np.testing.assert_allclose(log["adv_g"] + log["cycle"] + log["ssim"], log["total"], rtol=1e-5)
    assert list(log["step"]) == [1, 2, 3, 4, 5]


# -- generation -----------------------------------------------------------------------

def test_generation_carries_labels_and_order(pair, tmp_path):
    X = pair[0]
    state, _ = train(pair, small())
    Z = generate_intermediate(state, X, tmp_path / "Z")
    assert len(Z) == len(X) and Z.ids == X.ids
    assert list(Z.labels) == list(X.labels)
    prov = read_provenance(tmp_path / "Z" / "provenance.csv")
    assert [(g, s) for g, s, _ in prov] == [(i, i) for i in X.ids]
    assert all(-1 <= m <= 1 for _, _, m in prov)
    assert all(im.pixels.dtype == np.uint8 for im in Z.images)


def test_identity_generator_reproduces_source(pair):
    X = pair[0]
    state = init_state(small(), GEN, DISC, SSIM)
    state.g1 = identity_generator(GEN)
    Z = generate_intermediate(state, X)
    for a, b in zip(X.images, Z.images):
        np.testing.assert_array_equal(a.pixels, b.pixels)
    assert all(v == pytest.approx(1.0) for v in Z.meta["mean_ssim"].values())


def test_generation_size_mismatch(pair):
    state = init_state(small(), GEN, DISC, SSIM)
    big = DomainDataset("B", (LabeledImage(np.zeros((3, 32, 32), np.uint8), 0, "b"),), 10)
    with pytest.raises(ConfigMismatchError, match="b"):
        generate_intermediate(state, big)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debias.losses import CycleTerms, discriminator_loss, generator_objective
from debias.networks import (
    PRESETS,
    ConfigError,
    DiscriminatorConfig,
    DiscriminatorParams,
    GeneratorConfig,
    GeneratorParams,
    build_discriminator,
    build_generator,
    discriminator_forward,
    discriminator_logits,
    generate,
    generator_forward,
)
from debias.ssim import SsimConfig
from debias.tensor_core import RngState, ShapeError, Tensor, check_gradients, no_grad

from oracles import receptive_field_by_perturbation


def images(n, size, seed=0):
    return np.random.default_rng(seed).uniform(0, 255, size=(n, 3, size, size)).astype(np.float32)


# -- configs --------------------------------------------------------------------

@pytest.mark.parametrize("kwargs,field", [
    ({"image_size": 30}, "image_size"),
    ({"n_residual_blocks": 0}, "n_residual_blocks"),
    ({"base_channels": 0}, "base_channels"),
    ({"pad_mode": "wrap"}, "pad_mode"),
])
def test_generator_config_errors_name_field(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        GeneratorConfig(**kwargs)


def test_discriminator_config_errors():
    with pytest.raises(ConfigError, match="n_layers"):
        DiscriminatorConfig(n_layers=0)


def test_desk_bottleneck_matches_paper_ratio():
    # 256 -> 64 at full scale is a factor of 4; the desk preset keeps it
    g, _ = PRESETS["desk"]
    assert g.image_size == 32 and g.bottleneck_size == 8
    assert PRESETS["paper-256"][0].bottleneck_size == 64


# -- generator ----------------------------------------------------------------------

@settings(max_examples=8, deadline=None)
@given(n_down=st.integers(0, 2), blocks=st.integers(1, 2), mult=st.integers(1, 3), n=st.integers(1, 2))
def test_generator_preserves_shape(n_down, blocks, mult, n):
    size = mult * 2 ** n_down * 2
    cfg = GeneratorConfig(base_channels=2, n_residual_blocks=blocks, n_down=n_down, image_size=size)
    g = build_generator(cfg, RngState(3))
    out = generate(g, images(n, size), training=True)
    assert out.shape == (n, 3, size, size)


def test_generator_output_range_and_eval_determinism():
    g = build_generator(GeneratorConfig(), RngState(0))
    x = images(2, 32)
    a, b = generate(g, x), generate(g, x)
    np.testing.assert_array_equal(a, b)
    assert np.all(a > 0) and np.all(a < 255) and np.all(np.isfinite(a))


def test_generator_rejects_bad_input():
    g = build_generator(GeneratorConfig(), RngState(0))
    with pytest.raises(ShapeError):
        generate(g, np.zeros((1, 1, 32, 32)))
    with pytest.raises(ShapeError, match="divisible"):
        generate(g, np.zeros((1, 3, 30, 30)))


def test_same_seed_same_bytes():
    cfg = GeneratorConfig()
    a, b = build_generator(cfg, RngState(5)), build_generator(cfg, RngState(5))
    for (ka, ta), (kb, tb) in zip(a.params.tensors.items(), b.params.tensors.items()):
        assert ka == kb and ta.data.tobytes() == tb.data.tobytes()
    c = build_generator(cfg, RngState(6))
    assert c.params["in.weight"].data.tobytes() != a.params["in.weight"].data.tobytes()


def test_init_statistics():
    g = build_generator(GeneratorConfig(), RngState(1))
    w = np.concatenate([t.data.ravel() for k, t in g.params.tensors.items() if k.endswith("weight")])
    assert abs(w.std() - 0.02) < 0.001 and abs(w.mean()) < 0.001


def _expected_generator_params(c, cin=3, blocks=3):
    conv = lambda i, o, k: i * o * k * k + o
    n = conv(cin, c, 7) + 2 * c
    n += conv(c, 2 * c, 3) + 4 * c + conv(2 * c, 4 * c, 3) + 8 * c
    n += blocks * 2 * (conv(4 * c, 4 * c, 3) + 8 * c)
    n += conv(4 * c, 2 * c, 4) + 4 * c + conv(2 * c, c, 4) + 2 * c
    return n + conv(c, cin, 7)


def _expected_discriminator_params(c, cin=3):
    conv = lambda i, o, k: i * o * k * k + o
    return conv(cin, c, 4) + conv(c, 2 * c, 4) + 4 * c + conv(2 * c, 4 * c, 4) + 8 * c + conv(4 * c, 1, 4)


@pytest.mark.parametrize("base,g_count,d_count", [(16, 291_523, 43_057), (8, 74_467, 11_289)])
def test_parameter_count_golden(base, g_count, d_count):
    g = build_generator(GeneratorConfig(base_channels=base), RngState(0))
    d = build_discriminator(DiscriminatorConfig(base_channels=base), RngState(0))
    assert g.params.num_parameters() == g_count == _expected_generator_params(base)
    assert d.params.num_parameters() == d_count == _expected_discriminator_params(base)


# -- discriminator ------------------------------------------------------------------

def test_paper_preset_receptive_field_is_70():
    assert PRESETS["paper-256"][1].receptive_field == 70


@pytest.mark.parametrize("n_layers,size", [(1, 32), (2, 64), (3, 96)])
def test_receptive_field_matches_perturbation_probe(n_layers, size):
    cfg = DiscriminatorConfig(n_layers=n_layers, base_channels=3)
    d = build_discriminator(cfg, RngState(n_layers))
    d64 = DiscriminatorParams(cfg, d.params.astype(np.float64))

    def fwd(x):
        with no_grad():
            return discriminator_logits(d64, Tensor(x * 255.0), training=False).data

    ext = receptive_field_by_perturbation(fwd, 3, size)
    assert ext == [cfg.receptive_field, cfg.receptive_field]


def test_desk_patch_grid_and_range():
    d = build_discriminator(DiscriminatorConfig(), RngState(0))
    with no_grad():
        out = discriminator_forward(d, Tensor(images(2, 32))).data
    assert out.shape == (2, 1, 6, 6)
    assert np.all(out > 0) and np.all(out < 1)
    assert d.receptive_field == 34


def test_discriminator_rejects_channels():
    d = build_discriminator(DiscriminatorConfig(), RngState(0))
    with pytest.raises(ShapeError):
        discriminator_forward(d, Tensor(np.zeros((1, 1, 32, 32))))


# -- end-to-end gradient of the full objective -------------------------------------

def test_full_objective_gradcheck_at_8x8():
    rng = RngState(11)
    gcfg = GeneratorConfig(base_channels=2, n_residual_blocks=1, n_down=1, image_size=8)
    dcfg = DiscriminatorConfig(n_layers=1, base_channels=2)
    g1, g2 = (GeneratorParams(gcfg, build_generator(gcfg, rng.child(k)).params.astype(np.float64))
              for k in ("g1", "g2"))
    d1, d2 = (DiscriminatorParams(dcfg, build_discriminator(dcfg, rng.child(k)).params.astype(np.float64))
              for k in ("d1", "d2"))
    gen = np.random.default_rng(0)
    # larger weights so every layer carries signal; the small step keeps differences
    # from straddling ReLU and L1 kinks
    for p in (g1, g2, d1, d2):
        for k, t in p.params.tensors.items():
            if k.endswith("weight"):
                t.data *= 10.0
    x = Tensor(gen.uniform(0, 255, size=(2, 3, 8, 8)))
    y = Tensor(gen.uniform(0, 255, size=(2, 3, 8, 8)))
    ssim_cfg = SsimConfig(window_size=5)

    def g_objective():
        fy, fx = generator_forward(g1, x), generator_forward(g2, y)
        terms = CycleTerms(x, y, fy, fx, generator_forward(g2, fy), generator_forward(g1, fx),
                           discriminator_forward(d1, fy), discriminator_forward(d2, fx))
        return generator_objective(terms, 10.0, 0.02, ssim_cfg).total

    def d_objective():
        fy = generator_forward(g1, x)
        return discriminator_loss(discriminator_forward(d1, y), discriminator_forward(d1, fy))

    g_params = g1.parameters() + g2.parameters()
    assert check_gradients(g_objective, g_params, h=1e-6, max_entries=6) < 1e-3
    assert check_gradients(d_objective, d1.parameters(), h=1e-6, max_entries=6) < 1e-3

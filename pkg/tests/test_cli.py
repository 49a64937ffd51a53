import json
import re

import numpy as np
import pytest

from debias.cli import build_parser, main
from debias.config import ConfigFileError, RunConfig, format_config, load_config, parse_config
from debias.data import load_dataset, save_dataset
from debias.networks import GeneratorConfig, identity_generator
from debias.trainer import generate_intermediate, init_state

COMMANDS = ["synth", "train", "generate", "eval", "audit", "embed", "pipeline"]
ALL_COMMANDS = COMMANDS + ["ssim"]
TINY_CFG = """\
preset = desk
generator.base_channels = 4   # small nets keep the test quick
generator.n_residual_blocks = 1
discriminator.base_channels = 4
train.epochs = 1
train.batch_size = 10
train.lambda = 5
"""


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "pair"
    assert main(["synth", "--out", str(out), "--n-images", "60", "--seed", "3"]) == 0
    return out


# -- config files ----------------------------------------------------------------------

def test_config_parse_and_round_trip():
    cfg = parse_config(TINY_CFG)
    assert cfg.train.lam == 5.0 and cfg.generator.base_channels == 4 and cfg.train.epochs == 1
    assert parse_config(format_config(cfg)) == cfg
    assert load_config(None) == RunConfig()


def test_paper_preset():
    cfg = parse_config("preset = paper-256\n")
    assert cfg.generator.image_size == 256 and cfg.discriminator.receptive_field == 70


@pytest.mark.parametrize("text,match", [
    ("train.lambda = -1", "lambda"),
    ("train.bogus = 1", "train.bogus"),
    ("lambda = 1", "unknown key"),
    ("train.epochs = ten", "train.epochs"),
    ("train.lr", "key = value"),
    ("preset = huge", "preset"),
    ("train.lr = 1\ntrain.lr = 2", "duplicate"),
    ("generator.image_size = 30", "image_size"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigFileError, match=match):
        parse_config(text)


# -- help and usage -----------------------------------------------------------------------

@pytest.mark.parametrize("cmd", ALL_COMMANDS)
def test_help_exits_zero_and_lists_every_flag(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    flags = [s for a in sub._actions for s in a.option_strings if s.startswith("--")]
    if cmd in COMMANDS:
        assert "--seed" in flags and "--workers" in flags
    for flag in flags:
        assert flag in text


def test_missing_required_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--source", "x"])
    assert e.value.code == 2


# -- synth ---------------------------------------------------------------------------------

def test_synth_default_specs(synth_dir):
    X, Y = load_dataset(synth_dir / "X", 10), load_dataset(synth_dir / "Y", 10)
    np.testing.assert_array_equal(X.label_histogram(), Y.label_histogram())
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    assert re.match(r"\d+\.\d+\.\d+", manifest["version"])
    rows = (synth_dir / "correspondence.csv").read_text().splitlines()
    assert rows[0] == "filename,domain,label" and len(rows) == 61


def test_synth_malformed_spec_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "bad"
    assert main(["synth", "--out", str(out), "--n-images", "20", "--target-bias", "hue=4"]) == 2
    assert "hue=4" in capsys.readouterr().err
    assert not out.exists() and list(tmp_path.iterdir()) == []


def test_synth_rerun_bit_identical(synth_dir, tmp_path):
    again = tmp_path / "pair"
    assert main(["synth", "--out", str(again), "--n-images", "60", "--seed", "3", "--workers", "2"]) == 0
    assert tree_bytes(again) == tree_bytes(synth_dir)


# -- train / generate / audit / embed -------------------------------------------------------

@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    (root / "tiny.cfg").write_text(TINY_CFG)
    args = ["train", "--source", str(synth_dir / "X"), "--target", str(synth_dir / "Y"),
            "--config", str(root / "tiny.cfg"), "--out", str(root / "train")]
    assert main(args) == 0
    assert main(["generate", "--checkpoint", str(root / "train" / "checkpoint"), "--source", str(synth_dir / "X"),
                 "--out", str(root / "Z")]) == 0
    return root


def test_train_and_generate_outputs(trained, synth_dir):
    assert (trained / "train" / "train_log.csv").read_text().count("\n") == 1 + 3
    for d in ("train", "Z"):
        assert json.loads((trained / d / "manifest.json").read_text())["command"] in ("train", "generate")
    Z = load_dataset(trained / "Z", 10)
    X = load_dataset(synth_dir / "X", 10)
    assert Z.ids == X.ids and list(Z.labels) == list(X.labels)
    assert (trained / "Z" / "provenance.csv").exists()


def test_train_rejects_bad_config(trained, synth_dir, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("train.lr = 0\n")
    code = main(["train", "--source", str(synth_dir / "X"), "--target", str(synth_dir / "Y"),
                 "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")])
    assert code == 2 and "lr" in capsys.readouterr().err


def test_runtime_failure_exit_one(tmp_path, synth_dir, capsys):
    code = main(["generate", "--checkpoint", str(tmp_path / "nothing"), "--source", str(synth_dir / "X"),
                 "--out", str(tmp_path / "Z")])
    assert code == 1 and "error" in capsys.readouterr().err
    assert not (tmp_path / "Z").exists()


def test_audit_ssim_proxy_uses_provenance(trained, synth_dir, capsys):
    out = trained / "audit"
    assert main(["audit", "--source", str(synth_dir / "X"), "--intermediate", str(trained / "Z"),
                 "--mode", "ssim_proxy", "--out", str(out)]) == 0
    assert "retention (ssim_proxy)" in capsys.readouterr().out
    assert len((out / "retention.csv").read_text().splitlines()) == 31


def test_audit_ground_truth_needs_oracle_data(trained, synth_dir):
    assert main(["audit", "--source", str(synth_dir / "X"), "--intermediate", str(trained / "Z"),
                 "--out", str(trained / "a2")]) == 2


def test_embed_pca_row_count(trained, synth_dir):
    out = trained / "emb"
    assert main(["embed", "--source", str(synth_dir / "X"), "--intermediate", str(trained / "Z"), "--target",
                 str(synth_dir / "Y"), "--method", "pca", "--n-samples", "12", "--clf-epochs", "1",
                 "--out", str(out)]) == 0
    lines = (out / "embedding.csv").read_text().splitlines()
    assert lines[0] == "domain,x,y" and len(lines) == 1 + 3 * 12


def test_eval_null_pipeline(synth_dir, tmp_path, capsys):
    # the identity generator makes Z a copy of X, so debiasing changes nothing
    X = load_dataset(synth_dir / "X", 10, "X")
    state = init_state(parse_config(TINY_CFG).train, GeneratorConfig(base_channels=4, n_residual_blocks=1))
    state.g1 = identity_generator(state.g1.cfg)
    save_dataset(generate_intermediate(state, X), tmp_path / "Z")
    assert main(["eval", "--source", str(synth_dir / "X"), "--intermediate", str(tmp_path / "Z"), "--target",
                 str(synth_dir / "Y"), "--trials", "3", "--clf-epochs", "2", "--out", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert "Source only" in out and "Trained on target" in out
    acc = json.loads((tmp_path / "ev" / "results.json").read_text())["accuracy"]
    assert abs(acc["debiased"]["mean"] - acc["source_only"]["mean"]) <= max(acc["source_only"]["std"], 1e-12)


def test_ssim_command(synth_dir, capsys):
    from debias.data import read_ppm
    from debias.ssim import mean_ssim
    X = synth_dir / "X" / "images"
    a, b = sorted(X.iterdir())[:2]
    assert main(["ssim", "--a", str(a), "--b", str(a)]) == 0
    assert capsys.readouterr().out.strip() == "1.000000"
    assert main(["ssim", "--a", str(a), "--b", str(b)]) == 0
    expected = mean_ssim(read_ppm(a).astype(float), read_ppm(b).astype(float))
    assert capsys.readouterr().out.strip() == f"{expected:.6f}"

"""Augmentation-network training (two generators, two PatchGAN critics) and intermediate-domain generation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .data import DataError, DomainDataset, LabeledImage, sample_augmentation, save_dataset
from .losses import CycleTerms, LossReport, discriminator_loss, generator_objective
from .networks import (
    DiscriminatorConfig,
    DiscriminatorParams,
    GeneratorConfig,
    GeneratorParams,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generate,
    generator_forward,
)
from .ssim import SsimConfig, pairwise_mean_ssim
from .tensor_core import (
    Adam,
    AdamState,
    CheckpointError,
    NonFiniteError,
    RngState,
    Tensor,
    backward,
    load_arrays,
    save_arrays,
)

log = logging.getLogger(__name__)

TRAIN_LOG = "train_log.csv"
CHECKPOINT_DIR = "checkpoint"
PIXEL_MAX = 255.0


class TrainingError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 10.0
    lambda_ssim: float = 0.02
    lr: float = 0.001
    epochs: int = 30
    batch_size: int = 4
    buffer_capacity: int = 50
    seed: int = 0
    d_steps_per_g_step: int = 1
    beta1: float = 0.5
    beta2: float = 0.999
    augment: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.lambda_ssim < 0:
            raise ValueError("train.lambda and train.lambda_ssim must be >= 0")
        if self.lr <= 0:
            raise ValueError("train.lr must be > 0")
        if self.buffer_capacity < 1:
            raise ValueError("train.buffer_capacity must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.d_steps_per_g_step < 1:
            raise ValueError("train.epochs >= 0, train.batch_size >= 1 and train.d_steps_per_g_step >= 1 required")


# -- replay buffer ----------------------------------------------------------------------

@dataclass
class ImageBuffer:
    """Pool of past generator outputs shown to the discriminator instead of the newest ones."""

    capacity: int
    rng: RngState
    slots: list[np.ndarray] = field(default_factory=list)

    def push_sample(self, img: np.ndarray) -> np.ndarray:
        """Until full, store and return ``img``. Then, with p = 0.5, swap it for a random stored image."""
        gen = self.rng.generator()
        if len(self.slots) < self.capacity:
            self.slots.append(img.copy())
            return img
        if gen.random() < 0.5:
            i = int(gen.integers(self.capacity))
            old = self.slots[i]
            self.slots[i] = img.copy()
            return old
        return img

    def push_sample_batch(self, batch: np.ndarray) -> np.ndarray:
        return np.stack([self.push_sample(im) for im in batch])


# -- trainer state and checkpoints ---------------------------------------------------

def config_hash(*cfgs) -> str:
    blob = json.dumps([asdict(c) for c in cfgs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainerState:
    """Everything needed to continue training bit-exactly: the checkpoint contents."""

    cfg: TrainConfig
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    ssim_cfg: SsimConfig
    g1: GeneratorParams
    g2: GeneratorParams
    d1: DiscriminatorParams
    d2: DiscriminatorParams
    opt_g: Adam
    opt_d: Adam
    buf1: ImageBuffer
    buf2: ImageBuffer
    rng: RngState
    step: int = 0

    @property
    def hash(self) -> str:
        return config_hash(self.cfg, self.gen_cfg, self.disc_cfg, self.ssim_cfg)


def init_state(cfg: TrainConfig, gen_cfg: GeneratorConfig = GeneratorConfig(),
               disc_cfg: DiscriminatorConfig = DiscriminatorConfig(), ssim_cfg: SsimConfig = SsimConfig()
               ) -> TrainerState:
    root = RngState(cfg.seed)
    g1 = build_generator(gen_cfg, root.child("g1"))
    g2 = build_generator(gen_cfg, root.child("g2"))
    d1 = build_discriminator(disc_cfg, root.child("d1"))
    d2 = build_discriminator(disc_cfg, root.child("d2"))
    adam = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    return TrainerState(
        cfg, gen_cfg, disc_cfg, ssim_cfg, g1, g2, d1, d2,
        Adam(g1.parameters() + g2.parameters(), **adam), Adam(d1.parameters() + d2.parameters(), **adam),
        ImageBuffer(cfg.buffer_capacity, root.child("buffer1")), ImageBuffer(cfg.buffer_capacity, root.child("buffer2")),
        root.child("steps"),
    )


_NETS = ("g1", "g2", "d1", "d2")


def save_checkpoint(state: TrainerState, path: Path) -> Path:
    arrays: dict[str, np.ndarray] = {}
    for name in _NETS:
        arrays.update(getattr(state, name).params.state_arrays(f"{name}/"))
    for name in ("opt_g", "opt_d"):
        st = getattr(state, name).state
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"{name}/m/{i}"] = m
            arrays[f"{name}/v/{i}"] = v
    for name in ("buf1", "buf2"):
        for i, img in enumerate(getattr(state, name).slots):
            arrays[f"{name}/{i}"] = img
    meta = {
        "config_hash": state.hash,
        "train": asdict(state.cfg),
        "generator": asdict(state.gen_cfg),
        "discriminator": asdict(state.disc_cfg),
        "ssim": asdict(state.ssim_cfg),
        "opt_steps": {"opt_g": state.opt_g.state.step, "opt_d": state.opt_d.state.step},
        "buffers": {n: {"size": len(getattr(state, n).slots), "rng": getattr(state, n).rng.to_dict()}
                    for n in ("buf1", "buf2")},
    }
    return save_arrays(path, arrays, state.rng, state.step, meta)


def load_checkpoint(path: Path) -> TrainerState:
    arrays, rng, step, meta = load_arrays(path)
    try:
        cfg = TrainConfig(**meta["train"])
        state = init_state(cfg, GeneratorConfig(**meta["generator"]), DiscriminatorConfig(**meta["discriminator"]),
                           SsimConfig(**meta["ssim"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: checkpoint metadata incomplete ({e})") from e
    if state.hash != meta.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    try:
        for name in _NETS:
            getattr(state, name).params.load_state_arrays(arrays, f"{name}/")
        for name in ("opt_g", "opt_d"):
            opt = getattr(state, name)
            n = len(opt.params)
            opt.state = AdamState([arrays[f"{name}/m/{i}"].copy() for i in range(n)],
                                  [arrays[f"{name}/v/{i}"].copy() for i in range(n)], int(meta["opt_steps"][name]))
        for name in ("buf1", "buf2"):
            info = meta["buffers"][name]
            buf = getattr(state, name)
            buf.slots = [arrays[f"{name}/{i}"].copy() for i in range(info["size"])]
            buf.rng = RngState.from_dict(info["rng"])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing array {e}") from e
    state.rng = rng
    state.step = step
    return state


# -- training ------------------------------------------------------------------------

def steps_per_epoch(n_source: int, batch_size: int) -> int:
    return math.ceil(n_source / batch_size)


def _augment(px: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    angle, flip = sample_augmentation(gen)
    out = ndimage.rotate(px, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    if flip:
        out = out[:, :, ::-1]
    return np.clip(out, 0, 255)


def _sample_batches(state: TrainerState, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source batch from this epoch's permutation, target batch drawn independently and uniformly."""
    cfg = state.cfg
    spe = steps_per_epoch(len(xs), cfg.batch_size)
    epoch, pos = divmod(state.step, spe)
    perm = RngState(cfg.seed).child("epoch", epoch).generator().permutation(len(xs))
    xi = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
    gen = state.rng.generator()
    yi = gen.integers(len(ys), size=len(xi))
    x, y = xs[xi], ys[yi]
    if cfg.augment:
        seeds = gen.integers(0, 2 ** 63, size=2 * len(xi))
        x = np.stack([_augment(im, np.random.default_rng(s)) for im, s in zip(x, seeds[:len(xi)])])
        y = np.stack([_augment(im, np.random.default_rng(s)) for im, s in zip(y, seeds[len(xi):])])
    return x.astype(np.float32), y.astype(np.float32)


def train_step(state: TrainerState, x_np: np.ndarray, y_np: np.ndarray) -> LossReport:
    """One generator update followed by ``d_steps_per_g_step`` discriminator updates."""
    cfg = state.cfg
    x, y = Tensor(x_np), Tensor(y_np)
    fake_y = generator_forward(state.g1, x)
    fake_x = generator_forward(state.g2, y)
    terms = CycleTerms(x, y, fake_y, fake_x,
                       generator_forward(state.g2, fake_y), generator_forward(state.g1, fake_x),
                       discriminator_forward(state.d1, fake_y), discriminator_forward(state.d2, fake_x))
    obj = generator_objective(terms, cfg.lam, cfg.lambda_ssim, state.ssim_cfg, PIXEL_MAX)
    state.opt_g.zero_grad()
    state.opt_d.zero_grad()
    backward(obj.total)
    state.opt_g.step()

    pool_y = Tensor(state.buf1.push_sample_batch(fake_y.data))
    pool_x = Tensor(state.buf2.push_sample_batch(fake_x.data))
    for _ in range(cfg.d_steps_per_g_step):
        state.opt_d.zero_grad()
        l1 = discriminator_loss(discriminator_forward(state.d1, y), discriminator_forward(state.d1, pool_y))
        l2 = discriminator_loss(discriminator_forward(state.d2, x), discriminator_forward(state.d2, pool_x))
        backward(l1 + l2)
        state.opt_d.step()
    state.opt_g.zero_grad()
    state.opt_d.zero_grad()
    state.step += 1
    return LossReport(adv_g=obj.adv.item(), adv_d1=l1.item(), adv_d2=l2.item(), cycle=obj.cycle.item(),
                      ssim=obj.ssim.item() if obj.ssim is not None else 0.0, total=obj.total.item())


def _read_log(path: Path, upto_step: int) -> list[str]:
    if not path.exists():
        return []
    rows = path.read_text().splitlines()[1:]
    return [r for r in rows if r and int(r.split(",", 1)[0]) <= upto_step]


def train_augmenter(X: DomainDataset, Y: DomainDataset, cfg: TrainConfig, out_dir: Path | None = None,
                    gen_cfg: GeneratorConfig = GeneratorConfig(), disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
                    ssim_cfg: SsimConfig = SsimConfig(), resume: Path | TrainerState | None = None,
                    max_steps: int | None = None, progress: Callable[[int, LossReport], None] | None = None
                    ) -> tuple[TrainerState, list[LossReport]]:
    """Train G1: X -> Y and G2: Y -> X with their critics.

    Y's labels are never read. With ``out_dir`` the checkpoint (replaced each
    epoch and at the end) and ``train_log.csv`` are written there. ``max_steps``
    stops early at an absolute step count, which together with ``resume`` gives
    split runs identical to uninterrupted ones.
    """
    if len(X) == 0 or len(Y) == 0:
        raise DataError("train_augmenter: source and target domains must be non-empty")
    xs, ys = X.arrays(), Y.arrays()
    size = gen_cfg.image_size
    for name, arr in (("source", xs), ("target", ys)):
        if arr.shape[1:] != (gen_cfg.in_channels, size, size):
            raise ConfigMismatchError(f"{name} images have shape {arr.shape[1:]}, generator expects "
                                      f"{(gen_cfg.in_channels, size, size)}")
    if isinstance(resume, TrainerState):
        state = resume
    elif resume is not None:
        state = load_checkpoint(Path(resume))
    else:
        state = init_state(cfg, gen_cfg, disc_cfg, ssim_cfg)
    if state.hash != config_hash(cfg, gen_cfg, disc_cfg, ssim_cfg):
        raise ConfigMismatchError("resume checkpoint was trained with a different configuration")

    spe = steps_per_epoch(len(X), cfg.batch_size)
    total = cfg.epochs * spe if max_steps is None else min(max_steps, cfg.epochs * spe)
    ckpt_path = Path(out_dir) / CHECKPOINT_DIR if out_dir is not None else None
    log_path = Path(out_dir) / TRAIN_LOG if out_dir is not None else None
    log_rows = _read_log(log_path, state.step) if log_path is not None else []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    reports: list[LossReport] = []
    t0 = time.time()

    def flush() -> None:
        if out_dir is None:
            return
        save_checkpoint(state, ckpt_path)
        log_path.write_text("\n".join([LossReport.CSV_HEADER] + log_rows) + "\n")

    while state.step < total:
        x, y = _sample_batches(state, xs, ys)
        try:
            rep = train_step(state, x, y)
        except NonFiniteError as e:
            where = f"; last good checkpoint kept at {ckpt_path}" if ckpt_path is not None else ""
            raise TrainingError(f"non-finite value at step {state.step + 1} ({e}){where}") from e
        reports.append(rep)
        log_rows.append(rep.csv_row(state.step))
        if progress is not None:
            progress(state.step, rep)
        if state.step % spe == 0:
            log.info("epoch %d/%d done, step %d, cycle %.4f, %.1fs", state.step // spe, cfg.epochs, state.step,
                     rep.cycle, time.time() - t0)
            flush()
    flush()
    return state, reports


def read_train_log(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in LossReport.CSV_HEADER.split(",")}


def epoch_means(values: np.ndarray, steps_in_epoch: int) -> np.ndarray:
    n = math.ceil(len(values) / steps_in_epoch)
    return np.array([values[i * steps_in_epoch:(i + 1) * steps_in_epoch].mean() for i in range(n)])


# -- generation ------------------------------------------------------------------------

def generate_intermediate(state: TrainerState | Path, X: DomainDataset, out_dir: Path | None = None,
                          name: str = "Z") -> DomainDataset:
    """Z = G1(X), one image at a time, with labels carried over and ids kept.

    Outputs are rounded to 8-bit like every stored image. With ``out_dir`` the
    domain is written with ``provenance.csv`` (generated id, source id, mean SSIM).
    """
    if not isinstance(state, TrainerState):
        state = load_checkpoint(Path(state))
    g1 = state.g1
    size = g1.cfg.image_size
    images = []
    for im in X.images:
        if im.pixels.shape != (g1.cfg.in_channels, size, size):
            raise ConfigMismatchError(f"{im.id}: shape {im.pixels.shape} differs from training size "
                                      f"{(g1.cfg.in_channels, size, size)}")
        out = generate(g1, im.pixels[None].astype(np.float32), training=False)[0]
        images.append(LabeledImage(np.clip(np.round(out), 0, 255).astype(np.uint8), im.label, im.id))
    Z = DomainDataset(name, tuple(images), X.n_classes, {"source": X.name, "config_hash": state.hash})
    ssim = pairwise_mean_ssim([im.pixels for im in X.images], [im.pixels for im in Z.images], state.ssim_cfg)
    Z.meta["mean_ssim"] = {im.id: float(s) for im, s in zip(Z.images, ssim)}
    if out_dir is not None:
        save_dataset(Z, Path(out_dir))
        write_provenance(Path(out_dir) / "provenance.csv", Z, X, ssim)
    return Z


def write_provenance(path: Path, Z: DomainDataset, X: DomainDataset, ssim: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["generated_id", "source_id", "mean_ssim"])
        for z, x, s in zip(Z.images, X.images, ssim):
            w.writerow([z.id, x.id, repr(float(s))])


def read_provenance(path: Path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as f:
        return [(r["generated_id"], r["source_id"], float(r["mean_ssim"])) for r in csv.DictReader(f)]

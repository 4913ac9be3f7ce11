"""Training procedures: CycleGAN baseline, SPGAN, eSPGAN (and its naive
fixed-learner ablation), plus source pretraining and fine-tuning of the
feature learner on translated images.

A step runs its sub-steps in a fixed order and touches exactly one network
group per sub-step:

* CycleGAN: generators, discriminators
* SPGAN: generators, discriminators, SiaNet
* eSPGAN: generators, discriminators, learner (skipped by the naive variant)
"""

from __future__ import annotations

import copy
import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from . import losses
from .datamodel import (SPLIT_DIRS, Augment, IdentityMap, ReIDDataset, ReIDSample, denormalize,
                        epoch_rngs, augment_batch, load_images, make_batches, num_batches)
from .losses import AdversarialForm, LossRecord, LossWeights, NonFiniteLossError
from .networks import (FeatureLearner, NetworkBundle, frozen, load_checkpoint, module_device, save_checkpoint)
from .pairs import build_pairs

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    CYCLEGAN = "cyclegan"
    SPGAN = "spgan"
    ESPGAN = "espgan"
    NAIVE_ESPGAN = "naive_espgan"


class FinetuneStrategy(int, enum.Enum):
    TRANSLATED_ONLY = 1
    ORIGINAL_AND_TRANSLATED = 2
    FINETUNE_SOURCE_MODEL = 3


class PreconditionError(RuntimeError):
    pass


@dataclass
class AdamSettings:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class SGDSettings:
    lr_backbone: float = 1e-3
    lr_head: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_every: int = 40
    decay_factor: float = 0.1


@dataclass
class LearnerTraining:
    """Supervised identity classification (pretraining or fine-tuning)."""

    epochs: int = 60
    batch_size: int = 16
    sgd: SGDSettings = field(default_factory=SGDSettings)
    freeze_bn: bool = False
    flip: bool = True
    crop: bool = True


@dataclass
class TrainConfig:
    mode: Mode = Mode.SPGAN
    weights: LossWeights = field(default_factory=LossWeights)
    adversarial_form: AdversarialForm = AdversarialForm.LEAST_SQUARES
    batch_size: int = 1
    epochs: int = 6
    translator: AdamSettings = field(default_factory=AdamSettings)
    sianet: AdamSettings = field(default_factory=AdamSettings)
    lr_constant_epochs: int = 6
    lr_decay_epochs: int = 0
    learner: SGDSettings = field(default_factory=lambda: SGDSettings(decay_every=10))
    learner_real_fraction: float = 0.5
    learner_freeze_bn: bool = True
    espgan_contrastive: bool = False
    image_pool_size: int = 50
    seed: int = 0
    image_size: tuple[int, int] = (256, 128)
    flip: bool = True
    crop: bool = True
    checkpoint_every: int = 0
    max_iterations: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.adversarial_form = AdversarialForm(self.adversarial_form)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.learner_real_fraction < 1.0:
            raise ValueError("learner_real_fraction must lie in [0, 1)")

    @classmethod
    def spgan_defaults(cls, **overrides) -> "TrainConfig":
        """Batch 1, Adam(2e-4, 0.5, 0.999), 6 epochs at a constant rate."""
        return cls(**{"mode": Mode.SPGAN, **overrides})

    @classmethod
    def espgan_defaults(cls, **overrides) -> "TrainConfig":
        """Batch 16; translator Adam 1e-4 for 10 epochs then linear decay to 0
        over 5; learner SGD 1e-3 / 1e-2 divided by 10 after epoch 10."""
        base = dict(mode=Mode.ESPGAN, batch_size=16, epochs=15, translator=AdamSettings(lr=1e-4),
                    lr_constant_epochs=10, lr_decay_epochs=5, learner=SGDSettings(decay_every=10))
        base.update(overrides)
        return cls(**base)

    @property
    def augment(self) -> Augment:
        return Augment(self.flip, self.crop)


# ---------------------------------------------------------------------------
# small helpers

class ImagePool:
    """History of generated images; with probability 1/2 a query returns a
    stored image (and stores the new one in its place)."""

    def __init__(self, size: int = 50, seed: int = 0):
        self.size = size
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng([seed, 97])

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return images
        out = []
        for img in images.detach():
            img = img.clone()
            if len(self.images) < self.size:
                self.images.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                k = int(self.rng.integers(0, self.size))
                out.append(self.images[k].clone())
                self.images[k] = img
            else:
                out.append(img)
        return torch.stack(out)

    def state_dict(self) -> dict:
        return {"size": self.size, "images": [t.clone() for t in self.images],
                "rng": copy.deepcopy(self.rng.bit_generator.state)}

    def load_state_dict(self, state: dict) -> None:
        self.size = state["size"]
        self.images = [t.clone() for t in state["images"]]
        self.rng.bit_generator.state = copy.deepcopy(state["rng"])


class TrainLog:
    """Line-delimited ``iter<TAB>name<TAB>value`` records."""

    def __init__(self, path=None, keep: int = 10):
        self.path = Path(path) if path is not None else None
        self.recent: deque = deque(maxlen=keep)
        self.records: list[tuple[int, str, float]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, iteration: int, values: dict[str, float]) -> None:
        rows = [(iteration, name, float(v)) for name, v in values.items()]
        self.records.extend(rows)
        self.recent.append((iteration, dict(values)))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.writelines(f"{i}\t{n}\t{v!r}\n" for i, n, v in rows)


def read_train_log(path) -> list[tuple[int, str, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        i, name, value = line.split("\t")
        out.append((int(i), name, float(value)))
    return out


def _set_lr(optimizer: torch.optim.Optimizer, factor: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = group["initial_lr"] * factor


def translator_lr_factor(progress_epochs: float, constant: int, decay: int) -> float:
    """1 for the first ``constant`` epochs, then linear to 0 over ``decay`` epochs."""
    if decay <= 0 or progress_epochs < constant:
        return 1.0
    return max(0.0, 1.0 - (progress_epochs - constant) / decay)


def step_lr_factor(epoch: int, every: int, factor: float) -> float:
    return factor ** (epoch // every) if every > 0 else 1.0


def _adam(params, s: AdamSettings) -> torch.optim.Adam:
    opt = torch.optim.Adam(params, lr=s.lr, betas=(s.beta1, s.beta2))
    for g in opt.param_groups:
        g["initial_lr"] = g["lr"]
    return opt


def learner_optimizer(C: FeatureLearner, s: SGDSettings) -> torch.optim.SGD:
    groups = [
        {"params": [p for p in C.backbone_parameters() if p.requires_grad], "lr": s.lr_backbone},
        {"params": C.head_parameters(), "lr": s.lr_head},
    ]
    opt = torch.optim.SGD(groups, momentum=s.momentum, weight_decay=s.weight_decay)
    for g in opt.param_groups:
        g["initial_lr"] = g["lr"]
    return opt


def _step(optimizer: torch.optim.Optimizer, loss: torch.Tensor, params) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# state

GAN_GROUPS = {
    Mode.CYCLEGAN: ("generators", "discriminators"),
    Mode.SPGAN: ("generators", "discriminators", "sianet"),
    Mode.ESPGAN: ("generators", "discriminators", "learner"),
    Mode.NAIVE_ESPGAN: ("generators", "discriminators"),
}


@dataclass
class TrainState:
    bundle: NetworkBundle
    config: TrainConfig
    optimizers: dict[str, torch.optim.Optimizer]
    pools: dict[str, ImagePool]
    id_map: IdentityMap | None = None
    iteration: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    iters_per_epoch: int = 1
    log: TrainLog = field(default_factory=TrainLog)

    @property
    def mode(self) -> Mode:
        return self.config.mode

    def state_dict(self) -> dict:
        return {
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "pools": {k: p.state_dict() for k, p in self.pools.items()},
            "counters": {"iteration": self.iteration, "epoch": self.epoch,
                         "batch_in_epoch": self.batch_in_epoch, "iters_per_epoch": self.iters_per_epoch},
            "torch_rng": torch.get_rng_state(),
            "config": config_to_dict(self.config),
            "recent_losses": list(self.log.recent),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.bundle, optimizers=self.state_dict(),
                               id_map=self.id_map.index_to_pid if self.id_map else None,
                               extra={"kind": "train_state", "mode": self.mode.value})


def new_train_state(bundle: NetworkBundle, config: TrainConfig, id_map: IdentityMap | None = None,
                    log_path=None) -> TrainState:
    torch.manual_seed(config.seed)
    opts = {
        "generators": _adam(bundle.group_parameters("generators"), config.translator),
        "discriminators": _adam(bundle.group_parameters("discriminators"), config.translator),
    }
    if config.mode is Mode.SPGAN or (config.mode is Mode.ESPGAN and config.espgan_contrastive):
        opts["sianet"] = _adam(bundle.group_parameters("sianet"), config.sianet)
    if config.mode is Mode.ESPGAN:
        bundle.C.freeze_batchnorm(config.learner_freeze_bn)
        opts["learner"] = learner_optimizer(bundle.C, config.learner)
    pools = {"fake_t": ImagePool(config.image_pool_size, config.seed),
             "fake_s": ImagePool(config.image_pool_size, config.seed + 1)}
    return TrainState(bundle, config, opts, pools, id_map, log=TrainLog(log_path))


def load_train_state(path, log_path=None) -> TrainState:
    bundle, payload = load_checkpoint(path)
    saved = payload["optimizers"]
    config = config_from_dict(TrainConfig, saved["config"])
    id_map = IdentityMap(payload["id_map"]) if payload.get("id_map") is not None else None
    state = new_train_state(bundle, config, id_map, log_path)
    for k, o in state.optimizers.items():
        o.load_state_dict(saved["optimizers"][k])
    for k, p in state.pools.items():
        p.load_state_dict(saved["pools"][k])
    c = saved["counters"]
    state.iteration, state.epoch = c["iteration"], c["epoch"]
    state.batch_in_epoch, state.iters_per_epoch = c["batch_in_epoch"], c["iters_per_epoch"]
    for item in saved.get("recent_losses", []):
        state.log.recent.append(tuple(item))
    torch.set_rng_state(saved["torch_rng"])
    return state


# ---------------------------------------------------------------------------
# one iteration

Observer = Callable[[str], None]


def _finite(record: LossRecord, state: TrainState) -> None:
    try:
        losses.check_finite(record, state.iteration, list(state.log.recent))
    except NonFiniteLossError as err:
        log.error("%s; last records: %s", err, err.history)
        raise


def _discriminator_substep(state: TrainState, x_s, x_t, fake_t, fake_s) -> dict[str, torch.Tensor]:
    b, form = state.bundle, state.config.adversarial_form
    pooled_t = state.pools["fake_t"].query(fake_t)
    pooled_s = state.pools["fake_s"].query(fake_s)
    loss_dt = losses.discriminator_loss(b.D_T, x_t, pooled_t, form)
    loss_ds = losses.discriminator_loss(b.D_S, x_s, pooled_s, form)
    _step(state.optimizers["discriminators"], loss_dt + loss_ds, b.group_parameters("discriminators"))
    return {"D_T": loss_dt, "D_S": loss_ds}


def _sianet_substep(state: TrainState, x_s, x_t, fake_t, fake_s) -> torch.Tensor:
    b, w = state.bundle, state.config.weights
    pairs = build_pairs(x_s, x_t, translated=(fake_t.detach(), fake_s.detach()))
    con = losses.contrastive_term(b.M, pairs, w.margin)
    _step(state.optimizers["sianet"], w.gamma * con, b.group_parameters("sianet"))
    return con


def train_step_gan(state: TrainState, batch_s: torch.Tensor, batch_t: torch.Tensor,
                   observer: Observer | None = None) -> dict[str, float]:
    """One CycleGAN or SPGAN iteration (dispatch on ``state.mode``)."""
    if state.mode not in (Mode.CYCLEGAN, Mode.SPGAN):
        raise PreconditionError(f"train_step_gan called in mode {state.mode.value}")
    b, cfg = state.bundle, state.config
    notify = observer or (lambda group: None)
    b.train()

    with frozen(b.D_T, b.D_S, b.M, b.C):
        if cfg.mode is Mode.SPGAN:
            record, tr = losses.spgan_objective(b, batch_s, batch_t, cfg.weights, cfg.adversarial_form)
        else:
            record, tr = losses.cyclegan_objective(b, batch_s, batch_t, cfg.weights, cfg.adversarial_form)
        _finite(record, state)
        _step(state.optimizers["generators"], record.total, b.group_parameters("generators"))
    notify("generators")

    fake_t, fake_s = tr.fake_t.detach(), tr.fake_s.detach()
    d_losses = _discriminator_substep(state, batch_s, batch_t, fake_t, fake_s)
    notify("discriminators")

    values = record.values()
    values.update({k: float(v.detach()) for k, v in d_losses.items()})
    if cfg.mode is Mode.SPGAN:
        values["M_con"] = float(_sianet_substep(state, batch_s, batch_t, fake_t, fake_s).detach())
        notify("sianet")
    return _finish(state, values)


def train_step_spgan(state: TrainState, batch_s, batch_t, observer: Observer | None = None) -> dict[str, float]:
    """Generators (min SPGAN objective) -> discriminators (pooled fakes) -> SiaNet."""
    if state.mode is not Mode.SPGAN:
        raise PreconditionError(f"train_step_spgan needs mode spgan, state is {state.mode.value}")
    return train_step_gan(state, batch_s, batch_t, observer)


def train_step_cyclegan(state: TrainState, batch_s, batch_t, observer: Observer | None = None) -> dict[str, float]:
    if state.mode is not Mode.CYCLEGAN:
        raise PreconditionError(f"train_step_cyclegan needs mode cyclegan, state is {state.mode.value}")
    return train_step_gan(state, batch_s, batch_t, observer)


def split_learner_batch(batch_s: torch.Tensor, labels_s: torch.Tensor, real_fraction: float = 0.5):
    """Indices of the source batch to translate and to keep real."""
    n = batch_s.shape[0]
    n_real = int(round(n * real_fraction))
    if n == 1:
        return slice(0, 1), slice(0, 1)
    n_real = min(max(n_real, 1), n - 1)
    return slice(0, n - n_real), slice(n - n_real, n)


def train_step_espgan(state: TrainState, batch_s: torch.Tensor, labels_s: torch.Tensor, batch_t: torch.Tensor,
                      observer: Observer | None = None) -> dict[str, float]:
    """Translator phase (generators with the learner frozen, then discriminators)
    followed by the learner phase on translated + real source images."""
    if state.mode not in (Mode.ESPGAN, Mode.NAIVE_ESPGAN):
        raise PreconditionError(f"train_step_espgan needs an eSPGAN mode, state is {state.mode.value}")
    b, cfg = state.bundle, state.config
    notify = observer or (lambda group: None)
    b.train()

    with frozen(b.D_T, b.D_S, b.M, b.C):
        record, tr = losses.espgan_objective(b, batch_s, labels_s, batch_t, cfg.weights, cfg.adversarial_form)
        total = record.total
        if cfg.espgan_contrastive:
            pairs = build_pairs(batch_s, batch_t, translated=(tr.fake_t, tr.fake_s))
            record.components["con"] = losses.contrastive_term(b.M, pairs, cfg.weights.margin)
            total = total + cfg.weights.gamma * record.components["con"]
            record.total = total
        _finite(record, state)
        _step(state.optimizers["generators"], total, b.group_parameters("generators"))
    notify("generators")

    fake_t, fake_s = tr.fake_t.detach(), tr.fake_s.detach()
    d_losses = _discriminator_substep(state, batch_s, batch_t, fake_t, fake_s)
    notify("discriminators")

    values = record.values()
    values.update({k: float(v.detach()) for k, v in d_losses.items()})
    if cfg.espgan_contrastive and cfg.mode is Mode.ESPGAN:
        values["M_con"] = float(_sianet_substep(state, batch_s, batch_t, fake_t, fake_s).detach())
        notify("sianet")

    if cfg.mode is Mode.ESPGAN:
        translated_idx, real_idx = split_learner_batch(batch_s, labels_s, cfg.learner_real_fraction)
        with torch.no_grad():
            translated = b.G(batch_s[translated_idx])
        x = torch.cat([translated, batch_s[real_idx]])
        y = torch.cat([labels_s[translated_idx], labels_s[real_idx]])
        b.C.train()
        torch.manual_seed(_step_seed(cfg.seed, state.iteration))
        loss_c = losses.classification_loss(b.C, x, y)
        if not math.isfinite(float(loss_c.detach())):
            losses.check_finite({"C_cls": float(loss_c.detach())}, state.iteration, list(state.log.recent))
        _step(state.optimizers["learner"], loss_c, list(b.C.parameters()))
        values["C_cls"] = float(loss_c.detach())
        notify("learner")
    return _finish(state, values)


def _step_seed(*keys: int) -> int:
    """Per-step torch seed (dropout masks) so resumed runs replay identically."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _finish(state: TrainState, values: dict[str, float]) -> dict[str, float]:
    state.log.write(state.iteration, values)
    state.iteration += 1
    return values


# ---------------------------------------------------------------------------
# loops

def paired_batches(source: Sequence[ReIDSample], target: Sequence[ReIDSample], config: TrainConfig,
                   epoch: int, id_map: IdentityMap | None = None,
                   start: int = 0) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """``(x_s, labels_s, x_t)`` for one epoch; the epoch length is set by the
    source stream, target images are cycled through seeded permutations."""
    bs = config.batch_size
    n_iter = num_batches(len(source), bs, drop_last=True)
    order_s, aug_s = epoch_rngs(config.seed, epoch)
    perm_s = order_s.permutation(len(source))
    order_t, aug_t = epoch_rngs(config.seed + 7919, epoch)
    need = n_iter * bs
    perm_t = np.concatenate([order_t.permutation(len(target)) for _ in range(-(-need // len(target)))])
    size = config.image_size
    for k in range(n_iter):
        chunk_s = [source[i] for i in perm_s[k * bs:(k + 1) * bs]]
        chunk_t = [target[i] for i in perm_t[k * bs:(k + 1) * bs]]
        if k < start:
            # consume the skipped batches' augmentation draws so a resumed stream stays aligned
            _burn(aug_s, len(chunk_s), config.augment)
            _burn(aug_t, len(chunk_t), config.augment)
            continue
        x_s = augment_batch(load_images([s.image_path for s in chunk_s], size), aug_s, config.augment)
        x_t = augment_batch(load_images([s.image_path for s in chunk_t], size), aug_t, config.augment)
        pids = [s.person_id for s in chunk_s]
        labels = torch.tensor(id_map.encode(pids) if id_map is not None else pids, dtype=torch.long)
        yield x_s, labels, x_t


def _burn(rng: np.random.Generator, n: int, augment: Augment) -> None:
    """Consume the augmentation draws of ``n`` images without touching pixels."""
    augment_batch(torch.zeros(n, 3, 32, 32), rng, augment)


def run_translation_training(state: TrainState, source: ReIDDataset, target: ReIDDataset,
                             checkpoint_dir=None, stop_after: int | None = None,
                             observer: Observer | None = None) -> TrainState:
    """Train until ``config.epochs`` (or ``max_iterations``) from wherever
    ``state`` stands; ``stop_after`` interrupts after that many iterations."""
    cfg = state.config
    if cfg.mode in (Mode.ESPGAN, Mode.NAIVE_ESPGAN) and state.id_map is None:
        state.id_map = source.id_map
    state.iters_per_epoch = num_batches(len(source.train), cfg.batch_size, drop_last=True)
    if state.iters_per_epoch == 0:
        raise PreconditionError(f"fewer source images ({len(source.train)}) than one batch ({cfg.batch_size})")
    done = 0
    while state.epoch < cfg.epochs:
        stream = paired_batches(source.train, target.train, cfg, state.epoch, state.id_map,
                                start=state.batch_in_epoch)
        device = module_device(state.bundle.G)
        for x_s, labels, x_t in stream:
            if cfg.max_iterations and state.iteration >= cfg.max_iterations:
                return state
            x_s, labels, x_t = x_s.to(device), labels.to(device), x_t.to(device)
            progress = state.epoch + state.batch_in_epoch / state.iters_per_epoch
            factor = translator_lr_factor(progress, cfg.lr_constant_epochs, cfg.lr_decay_epochs)
            for name in ("generators", "discriminators", "sianet"):
                if name in state.optimizers:
                    _set_lr(state.optimizers[name], factor)
            if "learner" in state.optimizers:
                _set_lr(state.optimizers["learner"],
                        step_lr_factor(state.epoch, cfg.learner.decay_every, cfg.learner.decay_factor))
            if cfg.mode in (Mode.ESPGAN, Mode.NAIVE_ESPGAN):
                train_step_espgan(state, x_s, labels, x_t, observer)
            else:
                train_step_gan(state, x_s, x_t, observer)
            state.batch_in_epoch += 1
            done += 1
            if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                state.save(Path(checkpoint_dir) / f"ckpt_{cfg.mode.value}_{state.iteration}")
            if stop_after is not None and done >= stop_after:
                _roll_epoch(state)
                return state
        _roll_epoch(state)
    return state


def _roll_epoch(state: TrainState) -> None:
    if state.batch_in_epoch >= state.iters_per_epoch:
        state.epoch += 1
        state.batch_in_epoch = 0


# ---------------------------------------------------------------------------
# feature learner

@dataclass
class LearnerState:
    C: FeatureLearner
    config: LearnerTraining
    optimizer: torch.optim.SGD
    seed: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    history: list[float] = field(default_factory=list)


def new_learner_state(C: FeatureLearner, config: LearnerTraining, seed: int = 0) -> LearnerState:
    C.freeze_batchnorm(config.freeze_bn)
    return LearnerState(C, config, learner_optimizer(C, config.sgd), seed)


def run_classifier_training(state: LearnerState, samples: Sequence[ReIDSample], id_map: IdentityMap,
                            image_size=(256, 128), stop_after: int | None = None,
                            log: TrainLog | None = None) -> LearnerState:
    """Minimise identity cross-entropy over ``samples`` (SGD, step decay)."""
    cfg = state.config
    if not samples:
        return state
    done = 0
    augment = Augment(cfg.flip, cfg.crop)
    while state.epoch < cfg.epochs:
        _set_lr(state.optimizer, step_lr_factor(state.epoch, cfg.sgd.decay_every, cfg.sgd.decay_factor))
        stream = make_batches(samples, cfg.batch_size, state.seed, augment, epoch=state.epoch,
                              id_map=id_map, image_size=image_size)
        for k, (x, y) in enumerate(stream):
            if k < state.batch_in_epoch:
                continue
            device = module_device(state.C)
            x, y = x.to(device), y.to(device)
            state.C.train()
            torch.manual_seed(_step_seed(state.seed, state.epoch, k))
            loss = losses.classification_loss(state.C, x, y)
            if not math.isfinite(float(loss.detach())):
                losses.check_finite({"cls": float(loss.detach())}, len(state.history), state.history[-10:])
            _step(state.optimizer, loss, list(state.C.parameters()))
            state.history.append(float(loss.detach()))
            if log is not None:
                log.write(len(state.history) - 1, {"cls": float(loss.detach())})
            state.batch_in_epoch += 1
            done += 1
            if stop_after is not None and done >= stop_after:
                if state.batch_in_epoch >= num_batches(len(samples), cfg.batch_size):
                    state.epoch += 1
                    state.batch_in_epoch = 0
                return state
        state.epoch += 1
        state.batch_in_epoch = 0
    return state


def learner_state_dict(state: LearnerState) -> dict:
    return {"C": state.C.state_dict(), "optimizer": state.optimizer.state_dict(), "seed": state.seed,
            "epoch": state.epoch, "batch_in_epoch": state.batch_in_epoch, "history": list(state.history),
            "config": config_to_dict(state.config), "frozen_bn": state.C.frozen_bn,
            "torch_rng": torch.get_rng_state()}


def load_learner_state(C: FeatureLearner, payload: dict) -> LearnerState:
    C.load_state_dict(payload["C"])
    state = new_learner_state(C, config_from_dict(LearnerTraining, payload["config"]), payload["seed"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch, state.batch_in_epoch = payload["epoch"], payload["batch_in_epoch"]
    state.history = list(payload["history"])
    return state


@torch.no_grad()
def classification_accuracy(C: FeatureLearner, samples: Sequence[ReIDSample], id_map: IdentityMap,
                            image_size=(256, 128), batch_size: int = 64) -> float:
    was_training = C.training
    C.eval()
    correct = 0
    for x, y in make_batches(samples, batch_size, 0, Augment.none(), id_map=id_map,
                             image_size=image_size, shuffle=False):
        correct += int((C(x.to(module_device(C))).argmax(1).cpu() == y).sum())
    C.train(was_training)
    return correct / max(1, len(samples))


def pretrain_learner(C: FeatureLearner, source_train: Sequence[ReIDSample], id_map: IdentityMap,
                     config: LearnerTraining | None = None, seed: int = 0, image_size=(256, 128),
                     log: TrainLog | None = None) -> tuple[FeatureLearner, float]:
    """Supervised source-only training; returns the learner and its training top-1."""
    config = config or LearnerTraining()
    if C.num_classes != len(id_map):
        raise PreconditionError(f"learner has {C.num_classes} classes, source has {len(id_map)} identities")
    state = new_learner_state(C, config, seed)
    run_classifier_training(state, source_train, id_map, image_size, log=log)
    acc = classification_accuracy(C, source_train, id_map, image_size)
    log_msg = f"pretrain: {len(source_train)} images, {len(id_map)} ids, train top-1 {acc:.4f}"
    logging.getLogger(__name__).info(log_msg)
    return C, acc


def finetune_with_translated(C_source: FeatureLearner, translated: Sequence[ReIDSample], id_map: IdentityMap,
                             config: LearnerTraining | None = None, *,
                             strategy: FinetuneStrategy | int = FinetuneStrategy.FINETUNE_SOURCE_MODEL,
                             original: Sequence[ReIDSample] = (), seed: int = 0, image_size=(256, 128),
                             log: TrainLog | None = None) -> FeatureLearner:
    """Train a learner on translated source images (labels kept from the source).

    Strategy 3 (default) fine-tunes ``C_source``; strategy 1 trains a fresh
    learner on translated images only; strategy 2 on original + translated.
    """
    strategy = FinetuneStrategy(strategy)
    config = config or LearnerTraining(freeze_bn=True)
    if not translated:
        return C_source
    if C_source.num_classes != len(id_map):
        raise PreconditionError(f"learner has {C_source.num_classes} classes, translated set has {len(id_map)}")
    unknown = {s.person_id for s in translated} - set(id_map.index_to_pid)
    if unknown:
        raise PreconditionError(f"translated images carry unknown identities {sorted(unknown)[:5]}")
    if strategy is FinetuneStrategy.FINETUNE_SOURCE_MODEL:
        C, samples = C_source, list(translated)
    else:
        torch.manual_seed(seed)
        C = fresh_learner_like(C_source)
        samples = list(translated) + (list(original) if strategy is FinetuneStrategy.ORIGINAL_AND_TRANSLATED else [])
    state = new_learner_state(C, config, seed)
    run_classifier_training(state, samples, id_map, image_size, log=log)
    return C


def fresh_learner_like(C: FeatureLearner, std: float = 0.02, classifier_std: float = 0.001) -> FeatureLearner:
    from .networks import init_weights

    backbone = "resnet50" if C.feat_dim == 2048 else "reference-small"
    fresh = FeatureLearner(C.num_classes, backbone, C.dropout.p)
    init_weights(fresh.backbone, std)
    torch.nn.init.normal_(fresh.classifier.weight, 0.0, classifier_std)
    torch.nn.init.zeros_(fresh.classifier.bias)
    return fresh.to(next(C.parameters()).dtype)


# ---------------------------------------------------------------------------
# translation export

@torch.no_grad()
def translate_directory(generator, in_root, out_root, image_size=(256, 128), batch_size: int = 32) -> int:
    """Translate every image of the three split folders, keeping file names
    (hence labels); output is lossless PNG at ``image_size``."""
    in_root, out_root = Path(in_root), Path(out_root)
    was_training = generator.training
    generator.eval()
    written = 0
    try:
        for folder in SPLIT_DIRS.values():
            src = in_root / folder
            if not src.is_dir():
                continue
            dst = out_root / folder
            dst.mkdir(parents=True, exist_ok=True)
            paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png", ".bmp"))
            for start in range(0, len(paths), batch_size):
                chunk = paths[start:start + batch_size]
                x = load_images(chunk, image_size).to(module_device(generator))
                for path, arr in zip(chunk, denormalize(generator(x).cpu())):
                    Image.fromarray(arr, "RGB").save(dst / (path.stem + ".png"), format="PNG")
                    written += 1
    finally:
        generator.train(was_training)
    return written


# ---------------------------------------------------------------------------
# config <-> plain dicts

def config_to_dict(obj) -> dict:
    def convert(v):
        if isinstance(v, enum.Enum):
            return v.value
        if is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, tuple):
            return list(v)
        return v
    return convert(obj)


def config_from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from nested dicts; unknown keys raise."""
    if data is None:
        return cls()
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise KeyError(f"unknown config key(s) {sorted(path + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = config_from_dict(type(current), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


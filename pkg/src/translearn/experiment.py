"""Experiment configuration and the five pipeline commands.

One YAML document fully determines an experiment; ``resolve_config`` fills
defaults, applies command-line overrides and is written next to the outputs.
The command-line front end in :mod:`translearn.cli` is a thin layer over the
``cmd_*`` functions defined here.
"""

from __future__ import annotations

import copy
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from .datamodel import (DatasetError, IdentityMap, ReIDDataset, SyntheticConfig, generate_synthetic, load_dataset,
                        tree_digest)
from .evaluation import EvalReport, evaluate_tables
from .features import extract_descriptors
from .losses import LossWeights
from .networks import (ArchConfig, FeatureLearner, NetworkBundle, ResNet50Backbone, ReferenceSmallBackbone,
                       bundle_from_arch, load_checkpoint)
from .training import (AdamSettings, FinetuneStrategy, LearnerTraining, Mode, PreconditionError, SGDSettings,
                       TrainConfig, TrainLog, config_from_dict, config_to_dict, finetune_with_translated,
                       fresh_learner_like, load_train_state, new_train_state, pretrain_learner,
                       run_translation_training, translate_directory)

log = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved.yaml"
LEARNER_FORMAT_VERSION = 1


class ExperimentError(RuntimeError):
    """A command cannot run as configured (missing inputs, bad combination)."""


@dataclass
class DatasetSpec:
    root: str = ""
    layout: str = "market"


@dataclass
class PretrainOptions:
    """Source-only learner used by direct transfer, fine-tuning and eSPGAN.

    ``checkpoint`` points at an existing learner; otherwise one is trained
    when ``enabled``.
    """

    enabled: bool = True
    checkpoint: str = ""
    training: LearnerTraining = field(default_factory=LearnerTraining)


@dataclass
class FinetuneOptions:
    strategy: int = 3
    training: LearnerTraining = field(default_factory=lambda: LearnerTraining(freeze_bn=True))


@dataclass
class EvalOptions:
    parts: int = 1
    mode: str = "avg"
    protocol: str = "sq"
    normalize: bool = False
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/experiment"
    image_size: tuple[int, int] = (256, 128)
    source: DatasetSpec = field(default_factory=DatasetSpec)
    target: DatasetSpec = field(default_factory=DatasetSpec)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainOptions = field(default_factory=PretrainOptions)
    finetune: FinetuneOptions = field(default_factory=FinetuneOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        # one image size and one seed drive every stage
        self.arch.image_shape = self.image_size
        self.train.image_size = self.image_size
        self.train.seed = self.seed


# ---------------------------------------------------------------------------
# presets

def toy_config(seed: int = 0, data_root: str = "data/toy") -> ExperimentConfig:
    """Desk-scale settings for the synthetic two-domain set (64x32 images)."""
    sgd = SGDSettings(lr_backbone=0.01, lr_head=0.1, decay_every=20)
    return ExperimentConfig(
        seed=seed,
        out="runs/toy",
        image_size=(64, 32),
        source=DatasetSpec(f"{data_root}/source", "synthetic"),
        target=DatasetSpec(f"{data_root}/target", "synthetic"),
        synthetic=SyntheticConfig(),
        arch=ArchConfig(ngf=16, n_res_blocks=2, ndf=16, disc_layers=2, residual_output=True, identity_init=True),
        train=TrainConfig(mode=Mode.SPGAN, weights=LossWeights(beta=0.5, gamma=0.3, margin=1.0), epochs=8, lr_constant_epochs=8),
        pretrain=PretrainOptions(training=LearnerTraining(epochs=30, sgd=sgd)),
        finetune=FinetuneOptions(training=LearnerTraining(epochs=30, sgd=sgd)),
        eval=EvalOptions(parts=1, mode="avg"),
    )


def toy_espgan_train(seed: int = 0) -> TrainConfig:
    """Translator/learner schedule used for eSPGAN on the toy set."""
    # a learner trained from scratch on 200 images is very sharp on source
    # style, so lambda is scaled down or the CE term pins G to the identity
    return TrainConfig.espgan_defaults(
        weights=LossWeights(beta=0.5, lam=0.05), batch_size=2, epochs=16, lr_constant_epochs=16, lr_decay_epochs=0,
        translator=AdamSettings(lr=2e-4), learner=SGDSettings(lr_backbone=0.01, lr_head=0.1, decay_every=10),
        learner_freeze_bn=False, seed=seed)


# ---------------------------------------------------------------------------
# config files

def config_dict(cfg: ExperimentConfig) -> dict:
    return config_to_dict(cfg)


def load_config(path=None, *, seed: int | None = None, out: str | None = None, mode: str | None = None,
                lmp_parts: int | None = None, lmp_mode: str | None = None,
                protocol: str | None = None) -> ExperimentConfig:
    """Read ``path`` (YAML; unknown keys are errors) and apply overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ExperimentError(f"{path}: expected a mapping at the top level")
    try:
        cfg = config_from_dict(ExperimentConfig, data)
    except KeyError as err:
        raise ExperimentError(f"{path}: {err.args[0]}") from None
    except (TypeError, ValueError) as err:
        raise ExperimentError(f"{path}: {err}") from None
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = str(out)
    if mode is not None:
        cfg.train.mode = Mode(mode)
    if lmp_parts is not None:
        cfg.eval.parts = lmp_parts
    if lmp_mode is not None:
        cfg.eval.mode = lmp_mode
    if protocol is not None:
        cfg.eval.protocol = protocol
    cfg.__post_init__()
    return cfg


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(yaml.safe_dump(config_dict(cfg), sort_keys=False))
    return path


def _prepare_out(out) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ExperimentError(f"output path {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ExperimentError(f"cannot create output directory {out}: {err}") from None
    return out


# ---------------------------------------------------------------------------
# learner checkpoints

def _backbone_name(C: FeatureLearner) -> str:
    if isinstance(C.backbone, ResNet50Backbone):
        return "resnet50"
    if isinstance(C.backbone, ReferenceSmallBackbone):
        return "reference-small"
    raise ExperimentError("only built-in backbones can be saved as learner checkpoints")


def save_learner(path, C: FeatureLearner, id_map: IdentityMap, image_size, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": LEARNER_FORMAT_VERSION, "kind": "learner",
        "backbone": _backbone_name(C), "num_classes": C.num_classes, "dropout": C.dropout.p,
        "image_size": list(image_size), "id_map": list(id_map.index_to_pid),
        "state": C.state_dict(), "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_learner(path) -> tuple[FeatureLearner, IdentityMap, dict]:
    """Learner from a learner checkpoint, or the ``C`` of a translator checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise ExperimentError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") == "learner":
        C = FeatureLearner(payload["num_classes"], payload["backbone"], payload["dropout"])
        C.load_state_dict(payload["state"])
        return C, IdentityMap(payload["id_map"]), payload
    if "networks" in payload:
        bundle, payload = load_checkpoint(path)
        if payload.get("id_map") is None:
            raise ExperimentError(f"{path}: translator checkpoint carries no identity map")
        return bundle.C, IdentityMap(payload["id_map"]), payload
    raise ExperimentError(f"{path}: not a learner or translator checkpoint")


# ---------------------------------------------------------------------------
# datasets

def _dataset(spec: DatasetSpec, domain: str) -> ReIDDataset:
    if not spec.root:
        raise ExperimentError(f"no {domain} dataset root configured")
    return load_dataset(spec.root, spec.layout, domain)


def load_domains(cfg: ExperimentConfig) -> tuple[ReIDDataset, ReIDDataset]:
    return _dataset(cfg.source, "source"), _dataset(cfg.target, "target")


def _device() -> torch.device:
    name = os.environ.get("TRANSLEARN_DEVICE", "cpu")
    try:
        device = torch.device(name)
    except RuntimeError as err:
        raise ExperimentError(f"TRANSLEARN_DEVICE={name!r}: {err}") from None
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ExperimentError(f"TRANSLEARN_DEVICE={name!r} but CUDA is not available")
    return device


# ---------------------------------------------------------------------------
# commands

def cmd_generate_synthetic(cfg: ExperimentConfig, out=None) -> dict:
    """Write the two synthetic domains; rerunning with the same config is a no-op."""
    out = _prepare_out(out or cfg.out)
    records = generate_synthetic(cfg.synthetic, out)
    write_resolved(cfg, out)
    digest = tree_digest(out)
    log.info("synthetic dataset at %s: %d images, digest %s", out, len(records), digest[:12])
    return {"root": out, "images": len(records), "digest": digest}


def new_learner(cfg: ExperimentConfig, num_classes: int) -> FeatureLearner:
    torch.manual_seed(cfg.seed)
    C = FeatureLearner(num_classes, cfg.arch.backbone, cfg.arch.dropout)
    return fresh_learner_like(C, cfg.arch.conv_init_std, cfg.arch.classifier_init_std)


def source_learner(cfg: ExperimentConfig, source: ReIDDataset, out: Path | None = None) -> FeatureLearner:
    """The pretrained source-only learner (loaded or trained, per ``cfg.pretrain``)."""
    device = _device()
    if cfg.pretrain.checkpoint:
        C, id_map, _ = load_learner(cfg.pretrain.checkpoint)
        if id_map.index_to_pid != source.id_map.index_to_pid:
            raise ExperimentError(f"{cfg.pretrain.checkpoint}: identity map does not match the source train set")
        return C.to(device)
    if not cfg.pretrain.enabled:
        raise PreconditionError("a pretrained learner is required: set pretrain.checkpoint or pretrain.enabled")
    C = new_learner(cfg, len(source.id_map)).to(device)
    train_log = TrainLog(out / "pretrain_log.tsv") if out is not None else None
    _, acc = pretrain_learner(C, source.train, source.id_map, cfg.pretrain.training, cfg.seed, cfg.image_size,
                              train_log)
    log.info("pretrained learner: source train top-1 %.4f", acc)
    if out is not None:
        save_learner(out / "pretrained.pt", C, source.id_map, cfg.image_size, {"train_top1": acc})
    return C


def build_translator(cfg: ExperimentConfig, num_classes: int) -> NetworkBundle:
    torch.manual_seed(cfg.seed)
    arch = copy.deepcopy(cfg.arch)
    arch.num_classes = num_classes
    return bundle_from_arch(arch)


def cmd_train(cfg: ExperimentConfig, out=None, *, resume=None, stop_after: int | None = None) -> dict:
    """Train a translator (CycleGAN/SPGAN) or the joint eSPGAN model."""
    out = _prepare_out(out or cfg.out)
    write_resolved(cfg, out)
    source, target = load_domains(cfg)
    device = _device()
    mode = cfg.train.mode
    if resume is not None:
        state = load_train_state(resume, out / "train_log.tsv")
        state.bundle.to(device)
    else:
        bundle = build_translator(cfg, len(source.id_map))
        if mode in (Mode.ESPGAN, Mode.NAIVE_ESPGAN):
            C = source_learner(cfg, source, out)
            bundle.C.load_state_dict(C.state_dict())
        bundle.to(device)
        state = new_train_state(bundle, cfg.train, source.id_map, out / "train_log.tsv")
    start = time.time()
    run_translation_training(state, source, target, checkpoint_dir=out / "checkpoints", stop_after=stop_after)
    final = state.save(out / "translator.pt")
    result = {"translator": final, "iterations": state.iteration, "seconds": time.time() - start}
    if mode in (Mode.ESPGAN, Mode.NAIVE_ESPGAN):
        result["learner"] = save_learner(out / "learner.pt", state.bundle.C, source.id_map, cfg.image_size,
                                         {"mode": mode.value})
    return result


def cmd_translate(checkpoint, in_root, out_root, direction: str = "s2t", *, identity: bool = False,
                  image_size=None, arch: ArchConfig | None = None) -> int:
    """Translate every image under ``in_root`` with G (s2t) or F (t2s).

    With ``identity`` no checkpoint is read: an untrained identity-initialised
    generator is used (outputs equal inputs up to 8-bit rounding).
    """
    direction = direction.lower()
    if direction not in ("s2t", "t2s"):
        raise ExperimentError(f"direction must be s2t or t2s, got {direction!r}")
    in_root = Path(in_root)
    if not in_root.is_dir():
        raise ExperimentError(f"input root {in_root} is not a directory")
    if identity:
        arch = copy.deepcopy(arch or ArchConfig(ngf=8, n_res_blocks=1))
        arch.residual_output, arch.identity_init = True, True
        if image_size is not None:
            arch.image_shape = tuple(image_size)
        arch.num_classes = max(arch.num_classes, 2)
        bundle = bundle_from_arch(arch)
    else:
        if checkpoint is None:
            raise ExperimentError("translate needs a translator checkpoint (or the identity flag)")
        payload = torch.load(Path(checkpoint), map_location="cpu", weights_only=False)
        if payload.get("kind") == "learner" or "networks" not in payload:
            raise ExperimentError(f"{checkpoint}: not a translator checkpoint, it has no generators")
        bundle, payload = load_checkpoint(checkpoint)
    generator = bundle.G if direction == "s2t" else bundle.F
    generator.to(_device())
    size = tuple(image_size) if image_size is not None else bundle.arch.image_shape
    n = translate_directory(generator, in_root, out_root, size)
    if n == 0:
        raise ExperimentError(f"no images found under {in_root}")
    return n


def cmd_learn(cfg: ExperimentConfig, translated_root, out=None) -> dict:
    """Pretrain on the source (unless a checkpoint is given), then fine-tune on
    translated images that keep the source file names and hence labels."""
    out = _prepare_out(out or cfg.out)
    write_resolved(cfg, out)
    source = _dataset(cfg.source, "source")
    try:
        translated = load_dataset(translated_root, cfg.source.layout, "source")
    except DatasetError as err:
        raise ExperimentError(f"translated set {translated_root}: {err}") from None
    C = source_learner(cfg, source, out)
    C = finetune_with_translated(C, translated.train, source.id_map, cfg.finetune.training,
                                 strategy=FinetuneStrategy(cfg.finetune.strategy), original=source.train,
                                 seed=cfg.seed, image_size=cfg.image_size, log=TrainLog(out / "finetune_log.tsv"))
    path = save_learner(out / "learner.pt", C, source.id_map, cfg.image_size, {"translated": str(translated_root)})
    return {"learner": path}


def evaluate_learner(C: FeatureLearner, dataset: ReIDDataset, opts: EvalOptions, image_size) -> EvalReport:
    table = extract_descriptors(C, dataset.query + dataset.gallery, opts.parts, opts.mode, opts.batch_size,
                                image_size, opts.normalize)
    return evaluate_tables(dataset.query, dataset.gallery, table, opts.protocol)


def cmd_evaluate(cfg: ExperimentConfig, checkpoint, out=None, stem: str | None = None) -> EvalReport:
    """Retrieval on the target query/gallery; writes ``<stem>.txt`` and ``<stem>.json``."""
    out = _prepare_out(out or cfg.out)
    C, _, _ = load_learner(checkpoint)
    C.to(_device())
    target = _dataset(cfg.target, "target")
    report = evaluate_learner(C, target, cfg.eval, cfg.image_size)
    stem = stem or f"report_p{cfg.eval.parts}_{cfg.eval.mode}_{cfg.eval.protocol}"
    report.write(out, stem)
    return report


# ---------------------------------------------------------------------------
# desk-scale comparison

def desk_comparison(cfg: ExperimentConfig, methods=("direct", "cyclegan", "spgan", "espgan"),
                    espgan_train: TrainConfig | None = None, workdir=None) -> dict[str, dict]:
    """Target rank-1 / mAP of each method from one shared source-only learner.

    ``direct`` evaluates the pretrained learner; ``cyclegan``/``spgan`` train a
    translator, translate the source train set and fine-tune a copy of the
    learner; ``espgan`` trains translator and learner jointly from it.
    ``cpu_seconds`` of each method includes the shared source pretraining.
    """
    source, target = load_domains(cfg)
    pre_cpu = time.process_time()
    C0 = source_learner(cfg, source)
    pre_cpu = time.process_time() - pre_cpu
    results = {}
    own_tmp = workdir is None
    workdir = Path(tempfile.mkdtemp(prefix="translearn_") if own_tmp else workdir)
    try:
        for method in methods:
            start, cpu_start = time.time(), time.process_time()
            if method == "direct":
                C = C0
            elif method in ("cyclegan", "spgan"):
                train = copy.deepcopy(cfg.train)
                train.mode = Mode(method)
                bundle = build_translator(cfg, len(source.id_map))
                state = new_train_state(bundle, train, source.id_map)
                run_translation_training(state, source, target)
                tr_root = workdir / f"translated_{method}"
                shutil.rmtree(tr_root, ignore_errors=True)
                translate_directory(bundle.G, source.root, tr_root, cfg.image_size)
                translated = load_dataset(tr_root, cfg.source.layout, "source")
                C = finetune_with_translated(copy.deepcopy(C0), translated.train, source.id_map,
                                             cfg.finetune.training, seed=cfg.seed, image_size=cfg.image_size)
            elif method in ("espgan", "naive_espgan"):
                train = copy.deepcopy(espgan_train or toy_espgan_train(cfg.seed))
                train.mode = Mode(method)
                train.image_size, train.seed = cfg.image_size, cfg.seed
                bundle = build_translator(cfg, len(source.id_map))
                bundle.C.load_state_dict(C0.state_dict())
                state = new_train_state(bundle, train, source.id_map)
                run_translation_training(state, source, target)
                C = bundle.C
            else:
                raise ExperimentError(f"unknown method {method!r}")
            report = evaluate_learner(C, target, cfg.eval, cfg.image_size)
            results[method] = {"rank1": report.rank(1), "mAP": report.map_score, "seconds": time.time() - start,
                               "cpu_seconds": time.process_time() - cpu_start + pre_cpu}
            log.info("%s: rank-1 %.3f mAP %.3f (%.0fs)", method, report.rank(1), report.map_score,
                     results[method]["seconds"])
    finally:
        if own_tmp:
            shutil.rmtree(workdir, ignore_errors=True)
    return results

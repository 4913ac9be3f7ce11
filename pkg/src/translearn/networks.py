"""The six learnable networks: two generators, two discriminators, the Siamese
embedder and the re-ID feature learner, plus checkpoint I/O."""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1
NETWORK_NAMES = ("G", "F", "D_T", "D_S", "M", "C")
GROUPS = {
    "generators": ("G", "F"),
    "discriminators": ("D_T", "D_S"),
    "sianet": ("M",),
    "learner": ("C",),
}


class ShapeError(ValueError):
    pass


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# translator

class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """ResNet-style image-to-image generator with instance normalisation.

    c7s1-k, two stride-2 downsamplings, ``n_blocks`` residual blocks, two
    fractionally-strided upsamplings, c7s1-3 and tanh. With
    ``residual_output`` the final map is added to the input instead
    (``clamp(x + tanh(h), -1, 1)``); zeroing the last convolution then yields
    an exact identity mapping.
    """

    def __init__(self, ngf: int = 64, n_blocks: int = 9, residual_output: bool = False):
        super().__init__()
        self.residual_output = residual_output
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True)]
        ch = ngf
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7)]
        self.model = nn.Sequential(*layers)

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.model[-1]

    def set_identity(self) -> None:
        if not self.residual_output:
            raise ValueError("identity initialisation needs residual_output=True")
        nn.init.zeros_(self.last_conv.weight)
        nn.init.zeros_(self.last_conv.bias)

    def forward(self, x):
        h = self.model(x)
        if self.residual_output:
            return (x + torch.tanh(h)).clamp(-1.0, 1.0)
        return torch.tanh(h)


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator without normalisation layers; returns a raw score map."""

    def __init__(self, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        ch = ndf
        for i in range(1, n_layers + 1):
            out = ndf * min(2 ** i, 8)
            stride = 2 if i < n_layers else 1
            layers += [nn.Conv2d(ch, out, 4, stride=stride, padding=1), nn.LeakyReLU(0.2, True)]
            ch = out
        layers += [nn.Conv2d(ch, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


# ---------------------------------------------------------------------------
# SiaNet

class SiaNet(nn.Module):
    """Three 4x4/2 convolutions interleaved with 2x2/2 max pools (the last pool
    doubled), then FC-256 and FC-128, output L2-normalised."""

    def __init__(self, image_shape: tuple[int, int] = (256, 128), embed_dim: int = 128):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 64, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.MaxPool2d(2, 2, ceil_mode=True),
            nn.Conv2d(64, 128, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.MaxPool2d(2, 2, ceil_mode=True),
            nn.Conv2d(128, 256, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.MaxPool2d(2, 2, ceil_mode=True),
            nn.MaxPool2d(2, 2, ceil_mode=True),
        )
        h, w = image_shape
        try:
            with torch.no_grad():
                flat = self.features(torch.zeros(1, 3, h, w)).numel()
        except RuntimeError as err:
            raise ShapeError(f"SiaNet cannot embed {h}x{w} inputs (three stride-2 convolutions and pools "
                             f"leave no room for the last 4x4 kernel): {err}") from None
        self.fc = nn.Sequential(nn.Linear(flat, 256), nn.LeakyReLU(0.2, True), nn.Linear(256, embed_dim))

    def forward(self, x):
        z = self.fc(self.features(x).flatten(1))
        return F.normalize(z, dim=1, eps=1e-12)


def embed(M: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Unit-norm embeddings of ``batch``."""
    return M(batch)


def sianet_param_count(image_shape: tuple[int, int] = (256, 128)) -> int:
    return sum(p.numel() for p in SiaNet(image_shape).parameters())


# ---------------------------------------------------------------------------
# feature learner

class ReferenceSmallBackbone(nn.Module):
    """Four conv-BN-ReLU stages (strides 2, 2, 2, 1); ``out_channels`` = 256."""

    def __init__(self, widths=(32, 64, 128, 256), strides=(2, 2, 2, 1)):
        super().__init__()
        layers, ch = [], 3
        for width, stride in zip(widths, strides):
            layers += [nn.Conv2d(ch, width, 3, stride=stride, padding=1, bias=False),
                       nn.BatchNorm2d(width), nn.ReLU(True)]
            ch = width
        self.body = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.body(x)


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 up to the last convolutional stage (2048 channels).

    Weights start random; load pretrained ones with ``load_state_dict``.
    """

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.body = nn.Sequential(*list(net.children())[:-2])
        self.out_channels = 2048

    def forward(self, x):
        return self.body(x)


BACKBONES = {"reference-small": ReferenceSmallBackbone, "resnet50": ResNet50Backbone}


class FeatureLearner(nn.Module):
    """Backbone -> global average pool -> dropout -> linear identity classifier.

    ``embed`` returns the pooled pre-classifier vector used for retrieval.
    """

    def __init__(self, num_classes: int, backbone: str | nn.Module = "reference-small", dropout: float = 0.5):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if isinstance(backbone, nn.Module):
            if not hasattr(backbone, "out_channels"):
                raise ValueError("a custom backbone must declare out_channels")
            self.backbone = backbone
        elif backbone in BACKBONES:
            self.backbone = BACKBONES[backbone]()
        else:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        self.feat_dim = self.backbone.out_channels
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(self.feat_dim, num_classes)
        self.frozen_bn = False

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def feature_map(self, x):
        return self.backbone(x)

    def embed(self, x):
        return self.feature_map(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.classifier(self.dropout(self.embed(x)))

    def head_parameters(self) -> list[nn.Parameter]:
        return list(self.classifier.parameters())

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters())

    def freeze_batchnorm(self, frozen: bool = True) -> None:
        """Keep BN running statistics and affine terms fixed while training."""
        self.frozen_bn = frozen
        for m in self.backbone.modules():
            if isinstance(m, nn.BatchNorm2d):
                for p in m.parameters():
                    p.requires_grad_(not frozen)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen_bn:
            for m in self.backbone.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self


# ---------------------------------------------------------------------------
# bundle

@dataclass
class ArchConfig:
    image_shape: tuple[int, int] = (256, 128)
    num_classes: int = 751
    backbone: str = "reference-small"
    ngf: int = 64
    n_res_blocks: int = 9
    ndf: int = 64
    disc_layers: int = 3
    residual_output: bool = False
    identity_init: bool = False
    dropout: float = 0.5
    conv_init_std: float = 0.02
    classifier_init_std: float = 0.001

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)


@dataclass
class NetworkBundle:
    G: Generator
    F: Generator
    D_T: PatchDiscriminator
    D_S: PatchDiscriminator
    M: SiaNet
    C: FeatureLearner
    arch: ArchConfig = field(default_factory=ArchConfig)

    def network(self, name: str) -> nn.Module:
        if name not in NETWORK_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def networks(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def group(self, name: str) -> list[nn.Module]:
        return [getattr(self, n) for n in GROUPS[name]]

    def group_parameters(self, name: str) -> list[nn.Parameter]:
        return [p for m in self.group(name) for p in m.parameters()]

    def zero_grad(self) -> None:
        for m in self.networks().values():
            m.zero_grad(set_to_none=True)

    def train(self, mode: bool = True) -> "NetworkBundle":
        for m in self.networks().values():
            m.train(mode)
        return self

    def eval(self) -> "NetworkBundle":
        return self.train(False)

    def to(self, *args, **kwargs) -> "NetworkBundle":
        for m in self.networks().values():
            m.to(*args, **kwargs)
        return self

    def state_dict(self) -> dict[str, dict]:
        return {name: m.state_dict() for name, m in self.networks().items()}

    def load_state_dict(self, state: dict[str, dict]) -> None:
        for name, m in self.networks().items():
            if name in state:
                m.load_state_dict(state[name])

    def digest(self, names: Iterable[str] = NETWORK_NAMES) -> dict[str, str]:
        return {name: module_digest(getattr(self, name)) for name in names}


def module_device(module: nn.Module) -> torch.device:
    for p in module.parameters():
        return p.device
    return torch.device("cpu")


def module_digest(module: nn.Module) -> str:
    """SHA-256 of every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for key, t in module.state_dict().items():
        h.update(key.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Temporarily disable gradients for ``modules``' parameters."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def build_bundle(image_shape=(256, 128), num_classes: int = 751, backbone: str = "reference-small",
                 **arch_kwargs) -> NetworkBundle:
    """Build and initialise all six networks, then dry-run their shapes."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if len(image_shape) == 3:
        image_shape = image_shape[1:]
    arch = ArchConfig(tuple(image_shape), num_classes, backbone, **arch_kwargs)
    return bundle_from_arch(arch)


def bundle_from_arch(arch: ArchConfig) -> NetworkBundle:
    h, w = arch.image_shape
    if h % 4 or w % 4:
        raise ShapeError(f"generators need height and width divisible by 4, got {h}x{w}")
    gens = [Generator(arch.ngf, arch.n_res_blocks, arch.residual_output) for _ in range(2)]
    discs = [PatchDiscriminator(arch.ndf, arch.disc_layers) for _ in range(2)]
    M = SiaNet(arch.image_shape)
    C = FeatureLearner(arch.num_classes, arch.backbone, arch.dropout)
    for net in (*gens, *discs, M, C.backbone):
        init_weights(net, arch.conv_init_std)
    nn.init.normal_(C.classifier.weight, 0.0, arch.classifier_init_std)
    nn.init.zeros_(C.classifier.bias)
    if arch.identity_init:
        for g in gens:
            g.set_identity()
    bundle = NetworkBundle(gens[0], gens[1], discs[0], discs[1], M, C, arch)
    _dry_run(bundle)
    return bundle


def _dry_run(bundle: NetworkBundle) -> None:
    h, w = bundle.arch.image_shape
    x = torch.zeros(1, 3, h, w)
    was_training = {n: m.training for n, m in bundle.networks().items()}
    bundle.eval()
    try:
        with torch.no_grad():
            for name in ("G", "F"):
                y = bundle.network(name)(x)
                if y.shape != x.shape:
                    raise ShapeError(f"{name} maps {tuple(x.shape)} to {tuple(y.shape)}")
            for name in ("D_T", "D_S"):
                if bundle.network(name)(x).numel() < 1:
                    raise ShapeError(f"{name} produces an empty score map for {h}x{w}")
            fmap = bundle.C.feature_map(x)
            if fmap.shape[1] != bundle.C.feat_dim or min(fmap.shape[2:]) < 1:
                raise ShapeError(f"backbone produced {tuple(fmap.shape)} for {h}x{w}")
            bundle.M(x)
    except RuntimeError as err:
        raise ShapeError(f"image shape {h}x{w} incompatible with the chosen networks: {err}") from err
    finally:
        for n, m in bundle.networks().items():
            m.train(was_training[n])


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, bundle: NetworkBundle, *, optimizers: dict | None = None,
                    id_map=None, extra: dict | None = None) -> Path:
    """``id_map`` is an IdentityMap or its plain ``index_to_pid`` list."""
    path = Path(path)
    id_map = getattr(id_map, "index_to_pid", id_map)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": asdict(bundle.arch),
        "networks": bundle.state_dict(),
        "optimizers": {k: o.state_dict() if hasattr(o, "state_dict") else o for k, o in (optimizers or {}).items()},
        "id_map": list(id_map) if id_map is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[NetworkBundle, dict]:
    """Rebuild the bundle stored at ``path``; returns ``(bundle, payload)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    arch = dict(payload["arch"])
    arch["identity_init"] = False
    bundle = bundle_from_arch(ArchConfig(**arch))
    bundle.load_state_dict(payload["networks"])
    bundle.arch.identity_init = payload["arch"].get("identity_init", False)
    return bundle, payload

"""Re-ID samples, dataset ingestion, the synthetic two-domain generator and batching.

Datasets on disk follow the Market-1501 directory layout::

    <root>/bounding_box_train/   training images (labelled in the source domain)
    <root>/query/                query images
    <root>/bounding_box_test/    gallery images

Pixel batches are float tensors ``[B, 3, H, W]`` normalised with mean = std = 0.5
per channel, so every value lies in ``[-1, 1]``.
"""

from __future__ import annotations

import enum
import hashlib
import io
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

DEFAULT_IMAGE_SIZE = (256, 128)
MEAN = (0.5, 0.5, 0.5)
STD = (0.5, 0.5, 0.5)

SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(str, enum.Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


class Layout(str, enum.Enum):
    MARKET = "market"
    DUKE = "duke"
    SYNTHETIC = "synthetic"


class DatasetError(ValueError):
    pass


class FilenameError(DatasetError):
    pass


@dataclass(frozen=True)
class ReIDSample:
    image_path: Path
    person_id: int
    camera_id: int
    domain: Domain
    split: Split

    def __post_init__(self):
        if self.camera_id < 1:
            raise DatasetError(f"camera id must be >= 1, got {self.camera_id} ({self.image_path})")
        if self.split is Split.TRAIN and self.person_id < 1:
            raise DatasetError(f"train sample with person id {self.person_id}: {self.image_path}")
        if self.split is Split.QUERY and self.person_id in (0, -1):
            raise DatasetError(f"query sample with person id {self.person_id}: {self.image_path}")


# ---------------------------------------------------------------------------
# filename parsing

_MARKET_RE = re.compile(r"^(-1|\d{4})_c(\d)s(\d)_(\d{6})_(\d{2})$")
_DUKE_RE = re.compile(r"^(-1|\d{4})_c(\d+)_f(\d+)$")


def parse_market_filename(name: str, layout: Layout | str = Layout.MARKET) -> tuple[int, int]:
    """Return ``(person_id, camera_id)`` for a Market- or Duke-style file name.

    ``-1`` marks junk images and ``0000`` distractors; both come back as the
    plain integers -1 and 0.
    """
    layout = Layout(layout)
    stem = Path(name).name
    suffix = Path(stem).suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise FilenameError(f"{name!r}: unsupported image suffix {suffix!r}")
    stem = stem[: -len(suffix)]
    pattern = _DUKE_RE if layout is Layout.DUKE else _MARKET_RE
    match = pattern.match(stem)
    if match is None:
        raise FilenameError(f"{name!r}: {_offending_token(stem, layout)}")
    pid, cam = int(match.group(1)), int(match.group(2))
    if cam < 1:
        raise FilenameError(f"{name!r}: camera token 'c{cam}' must be >= 1")
    return pid, cam


def _offending_token(stem: str, layout: Layout) -> str:
    tokens = stem.split("_")
    if not re.fullmatch(r"-1|\d{4}", tokens[0]):
        return f"bad person-id token {tokens[0]!r}"
    if len(tokens) < 2:
        return "missing camera token"
    cam_re = r"c\d+" if layout is Layout.DUKE else r"c\ds\d"
    if not re.fullmatch(cam_re, tokens[1]):
        return f"bad camera token {tokens[1]!r}"
    expected = 3 if layout is Layout.DUKE else 4
    if len(tokens) != expected:
        return f"expected {expected} '_'-separated tokens, got {len(tokens)}"
    return f"bad frame token {'_'.join(tokens[2:])!r}"


# ---------------------------------------------------------------------------
# datasets

@dataclass
class IdentityMap:
    """Bijection between raw train person ids and contiguous class indices."""

    index_to_pid: list[int]
    pid_to_index: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.index_to_pid = [int(p) for p in self.index_to_pid]
        self.pid_to_index = {pid: i for i, pid in enumerate(self.index_to_pid)}
        if len(self.pid_to_index) != len(self.index_to_pid):
            raise DatasetError("identity map has duplicate person ids")

    @classmethod
    def from_samples(cls, samples: Sequence[ReIDSample]) -> "IdentityMap":
        return cls(sorted({s.person_id for s in samples}))

    def __len__(self) -> int:
        return len(self.index_to_pid)

    def encode(self, pids: Sequence[int]) -> list[int]:
        try:
            return [self.pid_to_index[int(p)] for p in pids]
        except KeyError as err:
            raise DatasetError(f"person id {err.args[0]} is not a training identity") from None

    def decode(self, indices: Sequence[int]) -> list[int]:
        return [self.index_to_pid[int(i)] for i in indices]


@dataclass
class ReIDDataset:
    root: Path
    domain: Domain
    train: list[ReIDSample]
    query: list[ReIDSample]
    gallery: list[ReIDSample]
    id_map: IdentityMap

    @property
    def num_classes(self) -> int:
        return len(self.id_map)

    def counts(self) -> dict[str, int]:
        return {"train": len(self.train), "query": len(self.query), "gallery": len(self.gallery)}

    def split(self, split: Split | str) -> list[ReIDSample]:
        return getattr(self, Split(split).value)


def load_dataset(root, layout: Layout | str = Layout.MARKET,
                 domain: Domain | str = Domain.SOURCE) -> ReIDDataset:
    """Scan ``root`` and build samples for the three splits.

    Junk images (pid -1) are dropped from train and query, kept in the gallery
    so evaluation can discard them explicitly.
    """
    root = Path(root)
    layout, domain = Layout(layout), Domain(domain)
    parse_layout = Layout.DUKE if layout is Layout.DUKE else Layout.MARKET
    splits: dict[Split, list[ReIDSample]] = {}
    for split in Split:
        folder = root / SPLIT_DIRS[split.value]
        if not folder.is_dir():
            raise DatasetError(f"missing split directory: {folder}")
        samples = []
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            pid, cam = parse_market_filename(path.name, parse_layout)
            if split is not Split.GALLERY and pid == -1:
                continue
            if split is Split.TRAIN and pid == 0:
                continue
            samples.append(ReIDSample(path, pid, cam, domain, split))
        splits[split] = samples
    if not splits[Split.TRAIN]:
        raise DatasetError(f"zero train identities under {root}")
    return ReIDDataset(root, domain, splits[Split.TRAIN], splits[Split.QUERY],
                       splits[Split.GALLERY], IdentityMap.from_samples(splits[Split.TRAIN]))


# ---------------------------------------------------------------------------
# pixels

def normalize(raw: np.ndarray) -> torch.Tensor:
    """uint8 ``[H, W, 3]`` (or ``[B, H, W, 3]``) -> float ``[..., 3, H, W]`` in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(raw)).float().div_(255.0)
    x = x.movedim(-1, -3)
    mean = torch.tensor(MEAN).view(3, 1, 1)
    std = torch.tensor(STD).view(3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded to uint8 ``[..., H, W, 3]``."""
    mean = torch.tensor(MEAN, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(STD, dtype=x.dtype).view(3, 1, 1)
    raw = ((x.detach().cpu() * std + mean) * 255.0).round().clamp(0, 255)
    return raw.movedim(-3, -1).to(torch.uint8).numpy()


@lru_cache(maxsize=65536)
def _read_resized(path: str, height: int, width: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (width, height):
            img = img.resize((width, height), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.uint8)
    arr.setflags(write=False)
    return arr


def read_image(path, size: tuple[int, int] = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    return _read_resized(str(path), int(size[0]), int(size[1]))


def load_images(paths: Sequence, size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
                workers: int = 0) -> torch.Tensor:
    """Decode, resize and normalise ``paths`` into one batch, order preserved."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            arrays = list(pool.map(lambda p: read_image(p, size), paths))
    else:
        arrays = [read_image(p, size) for p in paths]
    return normalize(np.stack(arrays))


# ---------------------------------------------------------------------------
# batching

@dataclass(frozen=True)
class Augment:
    flip: bool = True
    crop: bool = True

    @classmethod
    def none(cls) -> "Augment":
        return cls(False, False)


def augment_batch(x: torch.Tensor, rng: np.random.Generator, augment: Augment) -> torch.Tensor:
    """Random horizontal flip and pad-then-crop, one draw per image."""
    if not (augment.flip or augment.crop):
        return x
    out = x.clone()
    _, _, h, w = x.shape
    ph, pw = max(1, h // 16), max(1, w // 16)
    for k in range(x.shape[0]):
        img = x[k]
        if augment.flip and rng.random() < 0.5:
            img = img.flip(-1)
        if augment.crop:
            padded = torch.nn.functional.pad(img[None], (pw, pw, ph, ph), mode="replicate")[0]
            top = int(rng.integers(0, 2 * ph + 1))
            left = int(rng.integers(0, 2 * pw + 1))
            img = padded[:, top:top + h, left:left + w]
        out[k] = img
    return out


def epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(order, augmentation) generators for one epoch of one stream."""
    return np.random.default_rng([seed, epoch, 0]), np.random.default_rng([seed, epoch, 1])


def make_batches(samples: Sequence[ReIDSample], batch_size: int, seed: int = 0,
                 augment: Augment = Augment(), *, epoch: int = 0,
                 id_map: IdentityMap | None = None,
                 image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
                 shuffle: bool = True, drop_last: bool = False,
                 workers: int = 0) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(pixels, labels)`` for one epoch.

    Order is a permutation seeded by ``(seed, epoch)``; augmentation draws come
    from a separate generator seeded the same way, so the stream is fully
    reproducible. Labels are class indices when ``id_map`` is given, raw person
    ids otherwise.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order_rng, aug_rng = epoch_rngs(seed, epoch)
    order = order_rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        chunk = [samples[i] for i in idx]
        x = load_images([s.image_path for s in chunk], image_size, workers)
        x = augment_batch(x, aug_rng, augment)
        pids = [s.person_id for s in chunk]
        labels = torch.tensor(id_map.encode(pids) if id_map is not None else pids, dtype=torch.long)
        yield x, labels


def num_batches(n: int, batch_size: int, drop_last: bool = False) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


# ---------------------------------------------------------------------------
# synthetic two-domain data

@dataclass(frozen=True)
class StyleShift:
    """Target-domain style: hue rotation (fraction of a turn), additive
    brightness (in [0, 1] pixel units) and the background texture seed."""

    hue_delta: float = 0.12
    brightness_delta: float = -0.2
    background_texture_seed: int = 1


@dataclass(frozen=True)
class SyntheticConfig:
    num_identities: int = 10
    images_per_identity_per_domain: int = 20
    style_shift: StyleShift = StyleShift()
    rng_seed: int = 0
    image_size: tuple[int, int] = (64, 32)
    source_background_seed: int = 0
    num_test_identities: int = 30
    query_per_identity: int = 2
    gallery_per_identity: int = 4
    num_distractors: int = 20
    num_cameras: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for name in ("num_identities", "images_per_identity_per_domain", "num_test_identities",
                     "query_per_identity", "gallery_per_identity", "num_cameras"):
            if getattr(self, name) < 1:
                raise ValueError(f"SyntheticConfig.{name} must be >= 1")
        if self.num_distractors < 0:
            raise ValueError("SyntheticConfig.num_distractors must be >= 0")
        h, w = self.image_size
        if h < 16 or w < 8:
            raise ValueError(f"image_size {self.image_size} too small to render a sprite")


@dataclass(frozen=True)
class ManifestRecord:
    relative_path: str
    person_id: int
    camera_id: int
    domain: Domain
    split: Split

    def to_line(self) -> str:
        return "\t".join([self.relative_path, str(self.person_id), str(self.camera_id),
                          self.domain.value, self.split.value])

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        path, pid, cam, domain, split = line.rstrip("\n").split("\t")
        return cls(path, int(pid), int(cam), Domain(domain), Split(split))


MANIFEST_NAME = "manifest.tsv"


def read_manifest(path) -> list[ManifestRecord]:
    with open(path) as fh:
        return [ManifestRecord.from_line(line) for line in fh if line.strip()]


_PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.55, 0.85], [0.2, 0.7, 0.25], [0.9, 0.8, 0.2], [0.55, 0.25, 0.7],
    [0.95, 0.55, 0.15], [0.1, 0.1, 0.12], [0.9, 0.9, 0.88], [0.5, 0.5, 0.5], [0.45, 0.3, 0.15],
])


def _identity_signature(seed: int, pid: int) -> dict:
    rng = np.random.default_rng([seed, 17, pid])
    upper, lower, bag = rng.choice(len(_PALETTE), 3)
    return {
        "upper": np.clip(_PALETTE[upper] + rng.normal(0, 0.04, 3), 0, 1),
        "lower": np.clip(_PALETTE[lower] + rng.normal(0, 0.04, 3), 0, 1),
        "hair": rng.uniform(0.0, 0.5, 3),
        "pattern": int(rng.integers(0, 3)),
        "bag": int(rng.integers(0, 3)),
        "bag_color": _PALETTE[bag],
        "width": rng.uniform(0.4, 0.6),
        "height": rng.uniform(0.8, 0.95),
    }


def _background(seed: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Texture family fixed by ``seed``; phase and offset come from ``rng``."""
    tex = np.random.default_rng([seed, 29])
    colors = tex.uniform(0.0, 1.0, (3, 3))
    freqs = tex.uniform(0.2, 0.9, 2)
    angles = tex.uniform(0, np.pi, 2)
    dy, dx = rng.uniform(0, 200, 2)
    yy, xx = np.meshgrid(np.arange(h) + dy, np.arange(w) + dx, indexing="ij")
    waves = [0.5 + 0.5 * np.sin(f * (np.cos(a) * xx + np.sin(a) * yy) + rng.uniform(0, 2 * np.pi))
             for f, a in zip(freqs, angles)]
    m1, m2 = waves[0][..., None], waves[1][..., None]
    img = m1 * colors[0] + (1 - m1) * colors[1]
    return m2 * img + (1 - m2) * colors[2]


def _render(sig: dict, h: int, w: int, bg_seed: int, rng: np.random.Generator) -> np.ndarray:
    img = _background(bg_seed, h, w, rng)
    scale = sig["height"] * rng.uniform(0.8, 1.0)
    ph = scale * h
    cx = w / 2 + rng.uniform(-0.12, 0.12) * w
    top = rng.uniform(0.0, max(0.0, h - ph - 1))
    body_w = sig["width"] * w * scale * rng.uniform(0.9, 1.1)
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    light = rng.uniform(0.85, 1.15)

    head_r = 0.09 * ph
    head_cy = top + head_r
    head = ((yy - head_cy) / head_r) ** 2 + ((xx - cx) / (0.55 * head_r * 2 * w / h)) ** 2 <= 1
    img[head] = np.array([0.85, 0.68, 0.55])
    img[head & (yy < head_cy - 0.2 * head_r)] = sig["hair"]

    torso_top, torso_bot = top + 2 * head_r, top + 2 * head_r + 0.36 * ph
    torso = (yy >= torso_top) & (yy < torso_bot) & (np.abs(xx - cx) <= body_w / 2)
    upper = np.clip(sig["upper"] * light, 0, 1)
    img[torso] = upper
    if sig["pattern"] == 1:
        band = torso & (((yy - torso_top) // max(1.0, 0.05 * ph)) % 2 == 0)
        img[band] = 1 - upper
    elif sig["pattern"] == 2:
        img[torso & (xx < cx)] = np.clip(upper * 0.5, 0, 1)

    legs_bot = min(float(h), torso_bot + 0.45 * ph)
    gap = rng.uniform(0.04, 0.14) * w
    leg_w = body_w * 0.4
    legs = (yy >= torso_bot) & (yy < legs_bot) & (np.abs(xx - cx) >= gap / 2) & (np.abs(xx - cx) <= gap / 2 + leg_w)
    img[legs] = np.clip(sig["lower"] * light, 0, 1)

    if sig["bag"]:
        side = -1 if sig["bag"] == 1 else 1
        bx = cx + side * (body_w / 2 + 0.08 * w)
        bag = (np.abs(xx - bx) <= 0.08 * w) & (yy >= torso_top + 0.1 * ph) & (yy < torso_top + 0.28 * ph)
        img[bag] = sig["bag_color"]
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def apply_style(img: np.ndarray, hue_delta: float, brightness_delta: float) -> np.ndarray:
    """Rotate hue by ``hue_delta`` turns in YIQ space, then shift brightness."""
    if hue_delta:
        t = 2 * np.pi * hue_delta
        rot = np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])
        img = img @ (_YIQ_INV @ rot @ _YIQ).T
    if brightness_delta:
        img = img + brightness_delta
    return np.clip(img, 0, 1)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255).astype(np.uint8)


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _synthetic_plan(config: SyntheticConfig, domain: Domain = Domain.SOURCE) -> list[tuple[Split, int, int, int]]:
    """(split, pid, camera, image key) for one domain.

    Train identities differ between the domains (source 1..N, target
    N+M+1..2N+M); the test split is the same plan in both.
    """
    plan = []
    ncam = config.num_cameras
    first_test = config.num_identities + 1
    first_train = 1 if domain is Domain.SOURCE else first_test + config.num_test_identities
    for pid in range(first_train, first_train + config.num_identities):
        for j in range(config.images_per_identity_per_domain):
            plan.append((Split.TRAIN, pid, j % ncam + 1, j))
    for pid in range(first_test, first_test + config.num_test_identities):
        for j in range(config.query_per_identity):
            plan.append((Split.QUERY, pid, j % ncam + 1, j))
        for j in range(config.gallery_per_identity):
            plan.append((Split.GALLERY, pid, j % ncam + 1, 100 + j))
    for k in range(config.num_distractors):
        plan.append((Split.GALLERY, 0, k % ncam + 1, 1000 + k))
    return plan


def generate_synthetic(config: SyntheticConfig, out_root) -> list[ManifestRecord]:
    """Render the two-domain dataset under ``out_root/{source,target}``.

    Source train identities are 1..N, test identities N+1..N+M and target
    train identities N+M+1..2N+M, so the two labelled train sets share no
    person (as between real re-ID datasets). Distractors carry pid 0. An
    identity is always rendered with the same geometry and colours; the
    domains differ only by background texture and the global hue/brightness
    transform. Output is a pure
    function of ``config``; files already holding identical bytes are left
    untouched.
    """
    out_root = Path(out_root)
    h, w = config.image_size
    shift = config.style_shift
    styles = {
        Domain.SOURCE: (config.source_background_seed, 0.0, 0.0),
        Domain.TARGET: (shift.background_texture_seed, shift.hue_delta, shift.brightness_delta),
    }
    records = []
    for domain, (bg_seed, hue, bright) in styles.items():
        for split in Split:
            (out_root / domain.value / SPLIT_DIRS[split.value]).mkdir(parents=True, exist_ok=True)
        for frame, (split, pid, cam, key) in enumerate(_synthetic_plan(config, domain)):
            sig_pid = pid if pid > 0 else 10_000 + key
            sig = _identity_signature(config.rng_seed, sig_pid)
            rng = np.random.default_rng([config.rng_seed, 31, sig_pid, key, cam])
            img = apply_style(_render(sig, h, w, bg_seed, rng), hue, bright)
            name = f"{pid:04d}_c{cam}s1_{frame:06d}_00.png"
            rel = f"{domain.value}/{SPLIT_DIRS[split.value]}/{name}"
            _write_if_changed(out_root / rel, _png_bytes(_to_uint8(img)))
            records.append(ManifestRecord(rel, pid, cam, domain, split))
    manifest = "".join(r.to_line() + "\n" for r in records)
    _write_if_changed(out_root / MANIFEST_NAME, manifest.encode())
    return records


def _write_if_changed(path: Path, data: bytes) -> None:
    if path.exists() and path.read_bytes() == data:
        return
    path.write_bytes(data)


def tree_digest(root) -> str:
    """SHA-256 over every file (relative path + bytes) under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()

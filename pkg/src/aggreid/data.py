"""Datasets and sampling: Market-1501-style folder parsing, a deterministic
synthetic identity dataset, identity-balanced PK batching, and the train/eval
augmentation pipeline."""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ConfigurationError

logger = logging.getLogger(__name__)

MARKET_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass
class Sample:
    image: object  # path string or (3, h, w) float tensor in [0, 1]
    pid: int
    camid: int


class ReIDDataset:
    """A list of samples plus a contiguous relabeling of identities for
    classification. Distractor samples (pid == -1) get no label."""

    def __init__(self, samples, relabel=True):
        self.samples = list(samples)
        pids = sorted({s.pid for s in self.samples if s.pid >= 0})
        self.pid2label = {p: i for i, p in enumerate(pids)} if relabel else None
        self.num_ids = len(pids)

    def __len__(self):
        return len(self.samples)

    def label(self, sample):
        if self.pid2label is None:
            return sample.pid
        return self.pid2label[sample.pid]

    def by_identity(self):
        groups = {}
        for i, s in enumerate(self.samples):
            if s.pid >= 0:
                groups.setdefault(s.pid, []).append(i)
        return groups

    def pids(self):
        return np.array([s.pid for s in self.samples])

    def camids(self):
        return np.array([s.camid for s in self.samples])


@dataclass
class SamplerConfig:
    p_ids: int = 16
    l: int = 4

    @property
    def batch_size(self):
        return self.p_ids * self.l


@dataclass
class AugmentConfig:
    image_h: int = 256
    image_w: int = 128
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)
    pad: int = 10
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 3.33)


@dataclass
class LabeledBatch:
    images: torch.Tensor   # (B, 3, H, W)
    labels: torch.Tensor   # (B,) contiguous identity labels
    pids: torch.Tensor     # (B,) original identities
    camids: torch.Tensor   # (B,)


def load_image(sample):
    if isinstance(sample.image, torch.Tensor):
        return sample.image
    from PIL import Image

    with Image.open(sample.image) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def resize(image, h, w):
    if image.shape[-2:] == (h, w):
        return image
    return F.interpolate(
        image.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    ).squeeze(0)


def normalize(image, cfg: AugmentConfig):
    mean = torch.tensor(cfg.mean).view(3, 1, 1)
    std = torch.tensor(cfg.std).view(3, 1, 1)
    return (image - mean) / std


def hflip(image):
    return image.flip(-1)


def random_erase(image, rng, cfg: AugmentConfig):
    """Erase a random rectangle with uniform noise; retries a few times if
    the sampled aspect ratio does not fit."""
    _, h, w = image.shape
    for _ in range(10):
        area = rng.uniform(*cfg.erase_area) * h * w
        aspect = rng.uniform(*cfg.erase_aspect)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = rng.integers(0, h - eh + 1)
            left = rng.integers(0, w - ew + 1)
            patch = torch.from_numpy(
                rng.random((3, eh, ew), dtype=np.float64).astype(np.float32)
            )
            out = image.clone()
            out[:, top:top + eh, left:left + ew] = patch
            return out
    return image


def augment(image, cfg: AugmentConfig, rng=None, train=True):
    """Resize, then (train only) pad-and-random-crop, random horizontal flip
    and random erasing; normalization always last."""
    image = resize(image, cfg.image_h, cfg.image_w)
    if train:
        if rng is None:
            raise ValueError("training augmentation needs an RNG stream")
        p = cfg.pad
        padded = F.pad(image.unsqueeze(0), (p, p, p, p), mode="constant").squeeze(0)
        top = rng.integers(0, 2 * p + 1)
        left = rng.integers(0, 2 * p + 1)
        image = padded[:, top:top + cfg.image_h, left:left + cfg.image_w]
        if rng.random() < cfg.flip_prob:
            image = hflip(image)
        image = normalize(image, cfg)
        if rng.random() < cfg.erase_prob:
            # erasing acts on the normalized tensor; fill is uniform noise
            image = random_erase(image, rng, cfg)
        return image
    return normalize(image, cfg)


def sample_rng(seed, epoch, index):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def pk_index_batches(dataset: ReIDDataset, cfg: SamplerConfig, seed: int,
                     epoch: int):
    """Identity-balanced index batches: each batch holds exactly p_ids
    distinct identities with l samples each. Per epoch, each identity's
    images are shuffled and chunked into groups of l (padded with
    replacement), then batches draw p_ids identities that still have chunks
    left."""
    groups = dataset.by_identity()
    if len(groups) < cfg.p_ids:
        raise ConfigurationError(
            f"dataset has {len(groups)} identities, sampler needs {cfg.p_ids}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    chunks = {}
    for pid in sorted(groups):
        idxs = list(groups[pid])
        rng.shuffle(idxs)
        if len(idxs) % cfg.l:
            pad = cfg.l - len(idxs) % cfg.l
            idxs += list(rng.choice(groups[pid], size=pad, replace=True))
        chunks[pid] = [idxs[i:i + cfg.l] for i in range(0, len(idxs), cfg.l)]
    while sum(1 for c in chunks.values() if c) >= cfg.p_ids:
        avail = sorted(pid for pid, c in chunks.items() if c)
        picked = rng.choice(avail, size=cfg.p_ids, replace=False)
        batch_idx = []
        for pid in picked:
            batch_idx.extend(chunks[pid].pop())
        yield batch_idx


def pk_batches(dataset: ReIDDataset, cfg: SamplerConfig, aug: AugmentConfig,
               seed: int, epoch: int, train=True):
    """Materialized identity-balanced batches with per-sample augmentation
    RNG streams derived from (seed, epoch, sample index)."""
    for batch_idx in pk_index_batches(dataset, cfg, seed, epoch):
        images = torch.stack(
            [
                augment(load_image(dataset.samples[i]), aug,
                        rng=sample_rng(seed, epoch, i), train=train)
                for i in batch_idx
            ]
        )
        yield LabeledBatch(
            images=images,
            labels=torch.tensor([dataset.label(dataset.samples[i]) for i in batch_idx]),
            pids=torch.tensor([dataset.samples[i].pid for i in batch_idx]),
            camids=torch.tensor([dataset.samples[i].camid for i in batch_idx]),
        )


def eval_batches(dataset: ReIDDataset, aug: AugmentConfig, batch_size=64):
    for start in range(0, len(dataset), batch_size):
        samples = dataset.samples[start:start + batch_size]
        images = torch.stack(
            [augment(load_image(s), aug, train=False) for s in samples]
        )
        yield LabeledBatch(
            images=images,
            labels=torch.tensor([s.pid for s in samples]),
            pids=torch.tensor([s.pid for s in samples]),
            camids=torch.tensor([s.camid for s in samples]),
        )


def parse_market_folder(root):
    """Parse a Market-1501-style directory layout into train/query/gallery
    sample lists. Filenames follow `<id>_c<cam>...`; id -1 marks distractors
    which stay in the gallery but are never counted as matches."""
    root = Path(root)
    splits = {}
    for split, sub in (
        ("train", "bounding_box_train"),
        ("query", "query"),
        ("gallery", "bounding_box_test"),
    ):
        samples = []
        folder = root / sub
        if folder.is_dir():
            for path in sorted(folder.iterdir()):
                if path.suffix.lower() not in (".jpg", ".jpeg", ".png"):
                    continue
                m = MARKET_NAME_RE.match(path.name)
                if not m:
                    logger.warning("skipping unparsable filename: %s", path.name)
                    continue
                samples.append(Sample(str(path), int(m.group(1)), int(m.group(2))))
        splits[split] = samples
        logger.info("%s: %d images", split, len(samples))
    return splits


def synth_image(pid, jitter_rng, size):
    """Deterministic per-identity visual signature: a base color field with
    identity-keyed rectangles, plus small per-sample noise and brightness
    jitter. Separable in raw pixel space by construction."""
    h, w = size
    id_rng = np.random.default_rng(np.random.SeedSequence([7, pid]))
    img = np.ones((3, h, w), dtype=np.float32) * id_rng.uniform(
        0.1, 0.9, size=(3, 1, 1)
    ).astype(np.float32)
    for _ in range(3):
        color = id_rng.uniform(0, 1, size=3).astype(np.float32)
        top = int(id_rng.integers(0, h // 2))
        left = int(id_rng.integers(0, w // 2))
        rh = int(id_rng.integers(h // 4, h // 2 + 1))
        rw = int(id_rng.integers(w // 4, w // 2 + 1))
        img[:, top:top + rh, left:left + rw] = color[:, None, None]
    img += jitter_rng.normal(0, 0.02, size=img.shape).astype(np.float32)
    img *= np.float32(jitter_rng.uniform(0.9, 1.1))
    return torch.from_numpy(np.clip(img, 0, 1))


def synth_dataset(num_ids, per_id, image_size=(64, 32), seed=0, cameras=(0, 1),
                  stream=0):
    """Flat list of synthetic samples; `stream` decouples jitter between
    e.g. the train and held-out splits."""
    if num_ids < 2 or per_id < 2:
        raise ConfigurationError("synthetic dataset needs num_ids >= 2, per_id >= 2")
    samples = []
    for pid in range(num_ids):
        for k in range(per_id):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, stream, pid, k])
            )
            samples.append(
                Sample(synth_image(pid, rng, image_size), pid,
                       cameras[k % len(cameras)])
            )
    return samples


def synth_splits(num_ids, per_id, seed=0, image_size=(64, 32)):
    """Train split on cameras {0,1}; held-out query (camera 2) and gallery
    (camera 3) with fresh jitter for the same identities."""
    train = synth_dataset(num_ids, per_id, image_size, seed, cameras=(0, 1),
                          stream=0)
    query = synth_dataset(num_ids, 2, image_size, seed, cameras=(2,), stream=1)
    gallery = synth_dataset(num_ids, 3, image_size, seed, cameras=(3,), stream=2)
    return {"train": train, "query": query, "gallery": gallery}


SYNTH_URI_RE = re.compile(r"^synth://(\d+)/(\d+)/(\d+)$")


def parse_synth_uri(uri):
    m = SYNTH_URI_RE.match(uri)
    if not m:
        raise ConfigurationError(f"bad synthetic dataset URI: {uri!r}")
    return tuple(int(g) for g in m.groups())


def load_splits(source, image_size=(64, 32)):
    """Resolve a dataset source: either a `synth://ids/per_id/seed` URI or a
    Market-style folder path."""
    if source.startswith("synth://"):
        num_ids, per_id, seed = parse_synth_uri(source)
        return synth_splits(num_ids, per_id, seed, image_size)
    return parse_market_folder(source)

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch.utils.data import Dataset
from tqdm import tqdm

from stzoo.archspec import MANIFEST_NAME, SYNTHETIC_DATASETS, DataProtocol, VideoTensor
from stzoo.errors import DataError
from stzoo.sampling import sample

LOG = logging.getLogger(__name__)

FRAME_TEMPLATE = "{:05d}.png"
MANIFEST_COLUMNS = ["video_id", "path", "num_frames", "label"]
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MULTI_SCALES = (1.0, 0.875, 0.75, 0.66)
MAX_SCALE_DISTORTION = 1
REFERENCE_CROP = 224
SYNTHETIC_SPLITS = {"train": (0, 64), "val": (1, 32)}


class PreprocessProtocol(str, Enum):
    MINI_TRAIN = "MiniTrain"
    MINI_EVAL = "MiniEval"
    FULL_TRAIN = "FullTrain"
    FULL_EVAL = "FullEval"

    @property
    def is_train(self):
        return self in (PreprocessProtocol.MINI_TRAIN, PreprocessProtocol.FULL_TRAIN)


class SyntheticTask(str, Enum):
    DIRECTION = "Direction"
    ADJACENCY = "Adjacency"


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    path: str
    num_frames: int
    label: int


@dataclass(frozen=True)
class PreprocessSpec:
    protocol: PreprocessProtocol
    crop_size: int = 224
    resize_short: tuple = (256, 256)
    num_crops: int = 1
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    @classmethod
    def for_protocol(cls, protocol, crop_size=REFERENCE_CROP, num_crops=3):
        """Protocol constants, scaled from the 224 pixel reference to ``crop_size``."""
        protocol = PreprocessProtocol(protocol)
        scaled = lambda pixels: int(round(pixels * crop_size / REFERENCE_CROP))
        if protocol is PreprocessProtocol.MINI_TRAIN:
            return cls(protocol, crop_size, (scaled(256), scaled(256)))
        if protocol is PreprocessProtocol.MINI_EVAL:
            return cls(protocol, crop_size, (crop_size, crop_size))
        if protocol is PreprocessProtocol.FULL_TRAIN:
            return cls(protocol, crop_size, (scaled(256), scaled(320)))
        return cls(protocol, scaled(256), (scaled(256), scaled(256)), num_crops)

    @classmethod
    def for_training(cls, data_protocol, crop_size=REFERENCE_CROP):
        mini = DataProtocol(data_protocol) is DataProtocol.MINI
        return cls.for_protocol(PreprocessProtocol.MINI_TRAIN if mini else PreprocessProtocol.FULL_TRAIN, crop_size)

    @classmethod
    def for_evaluation(cls, crops, crop_size=REFERENCE_CROP):
        if crops == 1:
            return cls.for_protocol(PreprocessProtocol.MINI_EVAL, crop_size)
        return cls.for_protocol(PreprocessProtocol.FULL_EVAL, crop_size, num_crops=crops)


@dataclass(frozen=True)
class CropPlan:
    resized: tuple  # (height, width) after the short-side resize
    size: tuple  # (height, width) of every crop before the final resize
    offsets: tuple  # (top, left) per crop


class FrameStore:
    def __init__(self, root, manifest=MANIFEST_NAME, frame_template=FRAME_TEMPLATE):
        self.root = Path(root)
        self.manifest_path = self.root / manifest
        self.frame_template = frame_template
        if not self.manifest_path.is_file():
            raise DataError(f"missing manifest {self.manifest_path}")
        table = pd.read_csv(self.manifest_path, dtype={"video_id": str, "path": str})
        missing = set(MANIFEST_COLUMNS) - set(table.columns)
        if missing:
            raise DataError(f"{self.manifest_path} lacks columns {sorted(missing)}")
        self.videos = [
            VideoEntry(row.video_id, row.path, int(row.num_frames), int(row.label))
            for row in table.itertuples(index=False)
        ]
        self._index = {entry.video_id: entry for entry in self.videos}

    def __len__(self):
        return len(self.videos)

    def __getitem__(self, video_id):
        try:
            return self._index[video_id]
        except KeyError:
            raise DataError(f"unknown video '{video_id}' in {self.manifest_path}") from None

    @property
    def num_classes(self):
        return max((entry.label for entry in self.videos), default=-1) + 1

    @property
    def labels(self):
        return np.array([entry.label for entry in self.videos], dtype=np.int64)

    def frame_path(self, entry, index):
        return self.root / entry.path / self.frame_template.format(index)

    def problems(self, num_classes=None):
        """Manifest entries whose on-disk frame count or label is inconsistent."""
        num_classes = num_classes or self.num_classes
        found = []
        for entry in self.videos:
            on_disk = sum(1 for _ in (self.root / entry.path).glob("*" + Path(self.frame_template.format(0)).suffix))
            if on_disk != entry.num_frames:
                found.append(f"{entry.video_id}: manifest says {entry.num_frames} frames, found {on_disk}")
            if not 0 <= entry.label < num_classes:
                found.append(f"{entry.video_id}: label {entry.label} outside [0, {num_classes})")
        return found


def _read_frame(path):
    if not path.is_file():
        raise DataError(f"missing frame file {path}")
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"))


def load_clip(store, video_id, indices):
    """Decode the frames of one clip, in index order, as a ``(F, H, W, 3)`` uint8 array."""
    entry = store[video_id]
    decoded = {}
    for index in indices:
        if index not in decoded:
            decoded[index] = _read_frame(store.frame_path(entry, index))
    return np.stack([decoded[index] for index in indices])


def load_plan(store, video_id, plan):
    return [load_clip(store, video_id, clip) for clip in plan]


def _resized_shape(height, width, short):
    if height <= width:
        return short, int(round(width * short / height))
    return int(round(height * short / width)), short


def _even_offsets(length, crop, count):
    if count == 1:
        return [(length - crop) // 2]
    return [int(round(k * (length - crop) / (count - 1))) for k in range(count)]


def plan_crops(spec, height, width, rng=None):
    protocol = PreprocessProtocol(spec.protocol)
    low, high = spec.resize_short
    short = int(rng.integers(low, high + 1)) if protocol is PreprocessProtocol.FULL_TRAIN else low
    resized = _resized_shape(height, width, short)
    rh, rw = resized
    if min(resized) < spec.crop_size:
        raise DataError(f"frames of {height}x{width} resize to {rh}x{rw}, smaller than the {spec.crop_size} crop")
    if protocol is PreprocessProtocol.MINI_TRAIN:
        base = min(resized)
        sizes = [int(base * scale) for scale in MULTI_SCALES]
        pairs = [
            (h, w)
            for i, h in enumerate(sizes)
            for j, w in enumerate(sizes)
            if abs(i - j) <= MAX_SCALE_DISTORTION
        ]
        crop_h, crop_w = pairs[int(rng.integers(len(pairs)))]
        step_h, step_w = (rh - crop_h) // 4, (rw - crop_w) // 4
        candidates = [(0, 0), (0, 4 * step_w), (4 * step_h, 0), (4 * step_h, 4 * step_w), (2 * step_h, 2 * step_w)]
        offset = candidates[int(rng.integers(len(candidates)))]
        return CropPlan(resized, (crop_h, crop_w), (offset,))
    crop = spec.crop_size
    if protocol is PreprocessProtocol.FULL_TRAIN:
        offset = (int(rng.integers(rh - crop + 1)), int(rng.integers(rw - crop + 1)))
        return CropPlan(resized, (crop, crop), (offset,))
    if protocol is PreprocessProtocol.MINI_EVAL:
        return CropPlan(resized, (crop, crop), (((rh - crop) // 2, (rw - crop) // 2),))
    if rw >= rh:
        offsets = tuple(((rh - crop) // 2, left) for left in _even_offsets(rw, crop, spec.num_crops))
    else:
        offsets = tuple((top, (rw - crop) // 2) for top in _even_offsets(rh, crop, spec.num_crops))
    return CropPlan(resized, (crop, crop), offsets)


def _resize(frame, height, width):
    if frame.shape[:2] == (height, width):
        return frame
    image = Image.fromarray(frame).resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(image)


def preprocess(frames, spec, rng=None):
    """
    Crop, resize and normalize a clip, applying one spatial plan to every frame.

    Args:
        frames (numpy.ndarray): ``(F, H, W, 3)`` uint8 frames of one clip.
        spec (PreprocessSpec): protocol constants.
        rng (numpy.random.Generator): randomness for the training protocols; evaluation consumes none.

    Returns:
        views (list of VideoTensor): one Batched2D clip per crop.
    """
    frames = np.asarray(frames)
    if PreprocessProtocol(spec.protocol).is_train and rng is None:
        rng = np.random.default_rng()
    plan = plan_crops(spec, frames.shape[1], frames.shape[2], rng)
    resized = [_resize(frame, *plan.resized) for frame in frames]
    mean = torch.tensor(spec.mean).view(1, 3, 1, 1)
    std = torch.tensor(spec.std).view(1, 3, 1, 1)
    crop_h, crop_w = plan.size
    views = []
    for top, left in plan.offsets:
        crops = [frame[top : top + crop_h, left : left + crop_w] for frame in resized]
        if plan.size != (spec.crop_size, spec.crop_size):
            crops = [_resize(np.ascontiguousarray(crop), spec.crop_size, spec.crop_size) for crop in crops]
        pixels = torch.from_numpy(np.stack(crops)).permute(0, 3, 1, 2).float() / 255.0
        views.append(VideoTensor((pixels - mean) / std))
    return views


def video_rng(seed, *keys):
    """Generator keyed by integers or strings, independent of worker scheduling."""
    words = [key if isinstance(key, int) else zlib.crc32(str(key).encode()) for key in keys]
    return np.random.default_rng([seed, *words])


class ClipDataset(Dataset):
    """Training clips of a FrameStore: one sampled, preprocessed clip per video and epoch."""

    def __init__(self, store, sampler, preprocess_spec, layout, seed=0):
        self.store = store
        self.sampler = sampler
        self.preprocess_spec = preprocess_spec
        self.layout = layout
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.store)

    def __getitem__(self, index):
        entry = self.store.videos[index]
        rng = video_rng(self.seed, self.epoch, entry.video_id)
        plan = sample(self.sampler, entry.num_frames, rng)
        frames = load_clip(self.store, entry.video_id, plan.clips[0])
        clip = preprocess(frames, self.preprocess_spec, rng)[0]
        return clip.to_layout(self.layout).values, entry.label


def _direction_pair(rng, frames, size):
    side = max(size // 4, 2)
    background = rng.integers(0, 60, size=(size, size, 3), dtype=np.uint8)
    color = rng.integers(150, 256, size=3, dtype=np.uint8)
    top = int(rng.integers(0, size - side + 1))
    video = np.repeat(background[None], frames, axis=0)
    for t in range(frames):
        left = int(round(t * (size - side) / (frames - 1)))
        video[t, top : top + side, left : left + side] = color
    return video, video[::-1].copy()


def _adjacency_pair(rng, frames, size):
    background = rng.integers(0, 60, size=(size, size, 3), dtype=np.uint8)
    first, second = background.copy(), background.copy()
    first[..., 0] = rng.integers(180, 256, size=(size, size), dtype=np.uint8)
    second[..., 1] = rng.integers(180, 256, size=(size, size), dtype=np.uint8)
    half = frames // 2
    t = int(rng.integers(0, frames - half))
    gap = int(rng.integers(max(half, 2), frames - t))
    near = np.repeat(background[None], frames, axis=0)
    far = near.copy()
    near[t], near[t + 1] = first, second
    far[t], far[t + gap] = first, second
    return near, far


def _write_video(directory, video):
    directory.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(video):
        Image.fromarray(frame).save(directory / FRAME_TEMPLATE.format(index))


def make_synthetic(task, n_videos, frames, size, seed, root, progress=False):
    """
    Write a two-class synthetic FrameStore whose classes share identical frame sets.

    Direction videos move a square left to right (label 0) or play the same frames reversed (label 1).
    Adjacency videos flash two frames back to back (label 0) or at least ``frames // 2`` apart (label 1).
    """
    task = SyntheticTask(task)
    if frames < 4:
        raise DataError("synthetic videos need at least 4 frames")
    rng = np.random.default_rng(seed)
    make_pair = _direction_pair if task is SyntheticTask.DIRECTION else _adjacency_pair
    videos = []
    for pair in range((n_videos + 1) // 2):
        for label, video in enumerate(make_pair(rng, frames, size)):
            videos.append((f"{task.value.lower()}_{pair:05d}_{label}", video, label))
    videos = videos[:n_videos]
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor() as executor:
        jobs = [executor.submit(_write_video, root / video_id, video) for video_id, video, _ in videos]
        for job in tqdm(jobs, desc=f"Writing {task.value} videos", disable=not progress):
            job.result()
    rows = [(video_id, video_id, frames, label) for video_id, _, label in videos]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(root / MANIFEST_NAME, index=False, lineterminator="\n")
    return FrameStore(root)


def manifest_name(split="train", subset=None):
    """``manifest.csv`` for the train split, ``manifest-val.csv`` for val; a subset adds its name first."""
    return "-".join(part for part in ("manifest", subset, None if split == "train" else split) if part) + ".csv"


def _write_subset(store, relabel, name):
    rows = [
        (entry.video_id, entry.path, entry.num_frames, relabel[entry.label])
        for entry in store.videos
        if entry.label in relabel
    ]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(store.root / name, index=False, lineterminator="\n")
    return FrameStore(store.root, manifest=name, frame_template=store.frame_template)


def make_mini_manifest(store, fraction=0.5, seed=0, subset="mini"):
    """
    Keep a random ``fraction`` of the categories of the train manifest of ``store``, relabelled densely.

    The subset is written as ``manifest-<subset>.csv``; when the store also has a val manifest, the same
    categories are kept in ``manifest-<subset>-val.csv`` so that ``open_dataset(..., subset=subset)`` opens both.
    """
    rng = np.random.default_rng(seed)
    classes = np.arange(store.num_classes)
    kept = np.sort(rng.choice(classes, size=max(1, int(round(fraction * len(classes)))), replace=False))
    relabel = {int(old): new for new, old in enumerate(kept)}
    mini = _write_subset(store, relabel, manifest_name("train", subset))
    val_path = store.root / manifest_name("val")
    if val_path.is_file():
        val = FrameStore(store.root, manifest=val_path.name, frame_template=store.frame_template)
        _write_subset(val, relabel, manifest_name("val", subset))
    else:
        LOG.warning("%s has no %s; wrote the train subset only", store.root, val_path.name)
    return mini


def open_dataset(dataset_id, cache_dir, frames=8, size=64, split="train", progress=False, subset=None):
    """
    Resolve a dataset id to a FrameStore, generating registered synthetic datasets under ``cache_dir``.

    A missing split manifest is an error; a val split never falls back to the training videos.
    """
    if dataset_id in SYNTHETIC_DATASETS:
        seed, n_videos = SYNTHETIC_SPLITS[split]
        root = Path(cache_dir) / f"{dataset_id}-{frames}f-{size}px" / split
        if not (root / MANIFEST_NAME).is_file():
            LOG.info("generating %s (%s split) in %s", dataset_id, split, root)
            make_synthetic(SYNTHETIC_DATASETS[dataset_id], n_videos, frames, size, seed, root, progress)
        return FrameStore(root, manifest=manifest_name(subset=subset))
    root = Path(dataset_id)
    manifest = root / manifest_name(split, subset)
    if not manifest.is_file():
        raise DataError(f"missing {split} manifest {manifest}")
    return FrameStore(root, manifest=manifest.name)

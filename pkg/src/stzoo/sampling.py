from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from stzoo.archspec import SamplingMode, Strategy
from stzoo.errors import DataError

PLAN_COLUMNS = ["video_id", "clip_id", "position", "frame_index"]


@dataclass(frozen=True)
class ClipIndexPlan:
    clips: tuple

    def __len__(self):
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)

    def as_array(self):
        return np.array(self.clips, dtype=np.int64)


def segment_bounds(num_frames, frames):
    """Start and end (exclusive) of the ``frames`` equal segments of a ``num_frames`` long video."""
    edges = (np.arange(frames + 1) * num_frames) // frames
    return edges[:-1], edges[1:]


def uniform_offsets(clips):
    """Offsets i with -clips/2 <= i < clips/2, ascending."""
    low = -(clips // 2)
    return range(low, low + clips)


def _uniform(config, num_frames, rng):
    starts, ends = segment_bounds(num_frames, config.frames)
    lengths = ends - starts
    last = num_frames - 1
    if config.mode is SamplingMode.TRAIN:
        picks = starts + rng.integers(0, np.maximum(lengths, 1))
        return [np.minimum(picks, last)]
    middles = starts + lengths // 2
    if config.mode is SamplingMode.EVAL_CLIP:
        return [np.minimum(middles, last)]
    upper = np.maximum(ends - 1, starts)
    return [np.minimum(np.clip(middles + i, starts, upper), last) for i in uniform_offsets(config.clips)]


def dense_starts(num_frames, window, clips):
    """Evenly spread clip starts over [0, N - window], rounded half up."""
    span = max(num_frames - window, 0)
    if clips == 1:
        return [0]
    return [(2 * j * span + clips - 1) // (2 * (clips - 1)) for j in range(clips)]


def _dense(config, num_frames, rng):
    window = config.window
    if config.mode is SamplingMode.TRAIN:
        starts = [int(rng.integers(0, max(num_frames - window, 0) + 1))]
    elif config.mode is SamplingMode.EVAL_CLIP:
        starts = [0]
    else:
        starts = dense_starts(num_frames, window, config.clips)
    steps = np.arange(config.frames) * config.stride
    # windows longer than the video wrap around
    return [(start + steps) % num_frames for start in starts]


def sample(config, num_frames, rng=None):
    if num_frames < 1:
        raise DataError(f"cannot sample from a video with {num_frames} frames")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.strategy is Strategy.UNIFORM:
        clips = _uniform(config, num_frames, rng)
    else:
        clips = _dense(config, num_frames, rng)
    return ClipIndexPlan(tuple(tuple(int(index) for index in clip) for clip in clips))


def plans_to_frame(plans):
    rows = [
        (video_id, clip_id, position, index)
        for video_id, plan in plans.items()
        for clip_id, clip in enumerate(plan)
        for position, index in enumerate(clip)
    ]
    return pd.DataFrame(rows, columns=PLAN_COLUMNS)


def dump_plans(plans, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plans_to_frame(plans).to_csv(path, index=False, lineterminator="\n")
    return path

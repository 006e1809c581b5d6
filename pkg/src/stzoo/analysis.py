import logging
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import pandas as pd

from stzoo.archspec import Family, format_name
from stzoo.errors import AnalysisError

LOG = logging.getLogger(__name__)

RESULTS_COLUMNS = [
    "family",
    "backbone",
    "frames",
    "temporal_pool",
    "dataset",
    "sampling",
    "level",
    "clips",
    "crops",
    "top1",
    "top5",
    "flops",
    "params",
]
KEY_COLUMNS = RESULTS_COLUMNS[:9]
GROUP_COLUMNS = ["dataset", "sampling", "level", "clips", "crops"]
BASELINE_FAMILY = Family.TSN.value
GAIN_NDIGITS = 6
FLOAT_FORMAT = "%.6f"

ROW_COLUMNS = ["family", "temporal_pool", "backbone", "frames", *GROUP_COLUMNS, "top1", "baseline_top1", "phi", "psi"]
SUMMARY_COLUMNS = ["family", "temporal_pool", *GROUP_COLUMNS, "phi_mean", "psi_mean", "z", "cells"]
GAIN_COLUMNS = ["family", "backbone", "frames", *GROUP_COLUMNS, "top1_tp", "top1_no_tp", "gain"]
MISSING_COLUMNS = ["family", "backbone", "frames", "temporal_pool", *GROUP_COLUMNS]
COST_COLUMNS = ["name", "family", "backbone", "frames", "temporal_pool", *GROUP_COLUMNS, "flops", "total_flops", "top1"]


@dataclass(frozen=True)
class RunRecord:
    family: str
    backbone: str
    frames: int
    temporal_pool: bool
    dataset: str
    sampling: str
    level: str
    clips: int
    crops: int
    top1: float
    top5: float
    flops: int = 0
    params: int = 0

    def __post_init__(self):
        for name in ("top1", "top5"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise AnalysisError(f"{self.name}: {name} = {value} lies outside [0, 100]")

    @property
    def key(self):
        return astuple(self)[: len(KEY_COLUMNS)]

    @property
    def group(self):
        return (self.dataset, self.sampling, self.level, self.clips, self.crops)

    @property
    def eval_key(self):
        return (self.backbone, self.frames, *self.group)

    @property
    def arch_key(self):
        return (self.family, self.temporal_pool)

    @property
    def name(self):
        return format_name(self.family, self.backbone, self.temporal_pool)

    @property
    def is_baseline(self):
        return self.family == BASELINE_FAMILY and not self.temporal_pool

    def as_row(self):
        return dict(zip(RESULTS_COLUMNS, astuple(self)))


@dataclass(frozen=True)
class DisentanglementReport:
    rows: pd.DataFrame
    summary: pd.DataFrame
    grids: dict  # group -> (backbones B, frames K)


@dataclass(frozen=True)
class GainReport:
    gains: pd.DataFrame
    missing: pd.DataFrame


def _key_text(key, columns=KEY_COLUMNS):
    return ", ".join(f"{column}={value}" for column, value in zip(columns, key))


def check_unique(records):
    seen = set()
    for record in records:
        if record.key in seen:
            raise AnalysisError(f"duplicate result for {_key_text(record.key)}")
        seen.add(record.key)


def records_to_frame(records):
    return pd.DataFrame([record.as_row() for record in records], columns=RESULTS_COLUMNS)


def frame_to_records(frame):
    missing = set(RESULTS_COLUMNS) - set(frame.columns)
    if missing:
        raise AnalysisError(f"results lack columns {sorted(missing)}")
    kinds = {f.name: f.type for f in fields(RunRecord)}
    convert = {str: str, int: int, float: float, bool: lambda v: str(v).strip().lower() == "true"}
    return [
        RunRecord(**{name: convert[kinds[name]](row[name]) for name in RESULTS_COLUMNS})
        for row in frame.to_dict("records")
    ]


def read_results(path):
    path = Path(path)
    if not path.is_file():
        raise AnalysisError(f"missing results file {path}")
    frame = pd.read_csv(path, dtype={"dataset": str, "temporal_pool": str}, keep_default_na=False)
    records = frame_to_records(frame)
    check_unique(records)
    return records


def write_results(records, path):
    check_unique(records)
    return write_report(records_to_frame(records), path)


def append_result(record, path):
    path = Path(path)
    records = read_results(path) if path.is_file() else []
    return write_results([*records, record], path)


def write_report(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def spatial_contribution(s_arch, s_tsn):
    return s_tsn / max(s_arch, s_tsn)


def temporal_improvement(s_arch, s_tsn):
    return (s_arch - s_tsn) / (100.0 - s_tsn)


def _baselines(records):
    baselines = {}
    for record in records:
        if record.is_baseline:
            s_tsn = record.top1
            if s_tsn >= 100.0 or s_tsn <= 0.0:
                raise AnalysisError(f"baseline {_key_text(record.key)} has top1 {s_tsn}, Φ and Ψ are undefined")
            baselines[record.eval_key] = s_tsn
    return baselines


def disentangle(records, allow_partial=False):
    """
    Spatial contribution and temporal improvement of every model over its TSN baseline, averaged per architecture.

    The baseline is TSN without temporal pooling evaluated under the same backbone, frames and evaluation key.
    Architecture averages run over the backbone x frames grid of the baselines of each evaluation group; a
    missing cell is an error unless ``allow_partial`` is set, in which case the normalizer counts available cells.
    """
    records = list(records)
    check_unique(records)
    baselines = _baselines(records)
    grids = {}
    for eval_key in baselines:
        backbones, frames = grids.setdefault(eval_key[2:], (set(), set()))
        backbones.add(eval_key[0])
        frames.add(eval_key[1])
    grids = {group: (tuple(sorted(b)), tuple(sorted(k))) for group, (b, k) in grids.items()}

    rows = []
    for record in records:
        if record.is_baseline:
            continue
        if record.eval_key not in baselines:
            baseline_key = (BASELINE_FAMILY, record.backbone, record.frames, False, *record.group)
            raise AnalysisError(f"missing baseline {_key_text(baseline_key)} for {record.name}")
        s_tsn = baselines[record.eval_key]
        phi = spatial_contribution(record.top1, s_tsn)
        psi = temporal_improvement(record.top1, s_tsn)
        head = (record.family, record.temporal_pool, record.backbone, record.frames)
        rows.append((*head, *record.group, record.top1, s_tsn, phi, psi))
    rows = sorted(rows, key=lambda row: (row[4:9], row[0], row[1], row[2], row[3]))
    table = pd.DataFrame(rows, columns=ROW_COLUMNS)

    summary = []
    for (family, pooled, *group), cells in table.groupby(["family", "temporal_pool", *GROUP_COLUMNS], sort=False):
        group = tuple(group)
        backbones, frames = grids[group]
        expected = len(backbones) * len(frames)
        present = set(zip(cells["backbone"], cells["frames"]))
        gaps = sorted((b, k) for b in backbones for k in frames if (b, k) not in present)
        if gaps and not allow_partial:
            name = format_name(family, gaps[0][0], pooled)
            raise AnalysisError(f"{name} lacks {len(gaps)} of {expected} grid cells, first frames={gaps[0][1]}")
        z = len(cells)
        phi_mean = math.fsum(sorted(cells["phi"])) / z
        psi_mean = math.fsum(sorted(cells["psi"])) / z
        summary.append((family, pooled, *group, phi_mean, psi_mean, z, expected))
    summary = pd.DataFrame(summary, columns=SUMMARY_COLUMNS)
    return DisentanglementReport(table, summary, grids)


def tp_gain(records):
    """Top-1 gain of every temporally pooled model over its unpooled twin; unpaired records are listed apart."""
    records = list(records)
    check_unique(records)
    by_key = {record.key: record for record in records}
    gains, missing = [], []
    for record in sorted(records, key=lambda r: r.key):
        twin_key = record.key[:3] + (not record.temporal_pool,) + record.key[4:]
        twin = by_key.get(twin_key)
        if twin is None:
            missing.append((record.family, record.backbone, record.frames, record.temporal_pool, *record.group))
        elif record.temporal_pool:
            gain = round(record.top1 - twin.top1, GAIN_NDIGITS)
            gains.append((record.family, record.backbone, record.frames, *record.group, record.top1, twin.top1, gain))
    return GainReport(pd.DataFrame(gains, columns=GAIN_COLUMNS), pd.DataFrame(missing, columns=MISSING_COLUMNS))


def acc_vs_flops(records):
    """Accuracy against evaluation cost, where one video costs ``flops * clips * crops``."""
    rows = []
    for r in records:
        total = r.flops * r.clips * r.crops
        rows.append((r.name, r.family, r.backbone, r.frames, r.temporal_pool, *r.group, r.flops, total, r.top1))
    frame = pd.DataFrame(rows, columns=COST_COLUMNS)
    return frame.sort_values(["total_flops", "name", "frames"], kind="stable", ignore_index=True)

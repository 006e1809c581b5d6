import os

import pandas as pd
import torch
from stzoo import ArchSpec, SamplerConfig, assemble, evaluate, train
from stzoo.archspec import Backbone, EvalProtocol, Family, TrainProtocol
from stzoo.datapipe import SyntheticTask, make_synthetic
from stzoo.factory import load_checkpoint

train_videos = 64
val_videos = 32
size = 32
seed = 0

protocol = TrainProtocol(epochs=40, lr=0.05, peak_lr=0.05, batch_size=8)
device = "cuda" if torch.cuda.is_available() else "cpu"

# task -> (frames per video, [(family, temporal_pool), ...])
direction_models = [(family, False) for family in ("TSN", "TAM", "TSM", "I3D", "S3D", "Conv1D")]
adjacency_models = [("TSN", False), ("TSN", True)]
tasks = {SyntheticTask.DIRECTION: (8, direction_models), SyntheticTask.ADJACENCY: (16, adjacency_models)}


def run(task, frames, family, pooled, dirpath):
    data = f"{dirpath}/data/{task.value.lower()}-{frames}f"
    train_store = make_synthetic(task, train_videos, frames, size, seed, f"{data}/train")
    val_store = make_synthetic(task, val_videos, frames, size, seed + 1, f"{data}/val")

    spec = ArchSpec(Family(family), Backbone.TINYNET, frames=frames, temporal_pool=pooled, num_classes=2)
    sampler = SamplerConfig(frames=frames, seed=seed)
    out_dir = f"{dirpath}/runs/{task.value.lower()}/{spec.name}"
    torch.manual_seed(seed)
    result = train(
        assemble(spec), train_store, sampler, protocol, input_size=size, seed=seed, out_dir=out_dir, device=device
    )
    evaluation = evaluate(
        load_checkpoint(result.checkpoint),
        val_store,
        sampler,
        EvalProtocol.clip(),
        input_size=size,
        dataset=task.value,
        device=device,
    )
    return evaluation.record


if __name__ == "__main__":
    dirpath = "studies/behavior"
    if not os.path.exists(dirpath):
        os.makedirs(dirpath)

    rows = []
    for task, (frames, models) in tasks.items():
        for family, pooled in models:
            record = run(task, frames, family, pooled, dirpath)
            print(f"{task.value}: {record.name} top1 {record.top1:.1f}")
            rows.append(record.as_row())

    table = pd.DataFrame(rows)
    table.to_csv(f"{dirpath}/behavior.csv", index=False, lineterminator="\n")
    print(table[["family", "temporal_pool", "dataset", "top1"]].to_string(index=False))

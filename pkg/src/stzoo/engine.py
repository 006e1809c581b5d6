import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.special import softmax
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from stzoo.analysis import RunRecord
from stzoo.archspec import DataProtocol, Init, Schedule
from stzoo.datapipe import ClipDataset, PreprocessSpec, load_clip, preprocess, video_rng
from stzoo.errors import CheckpointError, DataError, TrainingError
from stzoo.factory import assemble, load_checkpoint, retarget_frames, save_checkpoint
from stzoo.profiler import count_flops, count_params
from stzoo.sampling import sample
from stzoo.utils import topk_accuracy

LOG = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "lr", "loss", "top1", "top5"]
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
INIT_CHECKPOINT = "init.pt"
METRICS_FILE = "metrics.csv"


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    log: pd.DataFrame


@dataclass(frozen=True)
class EvaluationResult:
    record: RunRecord
    probabilities: np.ndarray  # videos x classes
    labels: np.ndarray
    predictions_per_video: int


def lr_at(protocol, epoch_fraction):
    """Learning rate after ``epoch_fraction`` of the run: linear warmup to the peak, then the decay schedule."""
    warmup = protocol.warmup_epochs / protocol.epochs
    if epoch_fraction < warmup:
        return protocol.lr + (protocol.peak_lr - protocol.lr) * epoch_fraction / warmup
    s = (epoch_fraction - warmup) / (1.0 - warmup)
    if protocol.schedule is Schedule.STEP:
        passed = sum(1 for milestone in protocol.step_milestones if s >= milestone)
        return protocol.peak_lr * protocol.step_gamma**passed
    return protocol.peak_lr * 0.5 * (1.0 + math.cos(math.pi * s))


def build_optimizer(model, protocol):
    return torch.optim.SGD(
        model.parameters(), lr=protocol.lr, momentum=protocol.momentum, weight_decay=protocol.weight_decay
    )


def reset_classifier(model, num_classes):
    """Fresh classifier head for transfer learning; the arch spec follows the new class count."""
    model.fc = nn.Linear(model.fc.in_features, num_classes)
    model.arch = replace(model.arch, num_classes=num_classes).check()
    return model


def _loader(store, sampler, preprocess_spec, layout, protocol, seed, workers):
    dataset = ClipDataset(store, sampler, preprocess_spec, layout, seed)
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(
        dataset, batch_size=protocol.batch_size, shuffle=True, num_workers=workers, generator=generator
    )
    return dataset, loader


def train(
    model,
    store,
    sampler,
    protocol,
    *,
    preprocess_spec=None,
    input_size=224,
    seed=0,
    out_dir="runs/train",
    workers=0,
    device="cpu",
    progress=False,
):
    """
    Train ``model`` with SGD on one sampled clip per video and epoch.

    The learning rate is set before every iteration from ``lr_at``. Per-epoch rows (epoch, lr, loss, top1, top5)
    go to ``metrics.csv`` in ``out_dir`` next to the ``last.pt`` and ``best.pt`` checkpoints.
    """
    if len(store) == 0:
        raise DataError(f"no videos in {store.manifest_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preprocess_spec = preprocess_spec or PreprocessSpec.for_training(DataProtocol.MINI, input_size)
    sampler = replace(sampler, frames=model.arch.frames)
    torch.manual_seed(seed)
    device = torch.device(device)
    model = model.to(device)
    optimizer = build_optimizer(model, protocol)
    dataset, loader = _loader(store, sampler, preprocess_spec, model.input_layout, protocol, seed, workers)
    steps = len(loader)
    rows, best_top1 = [], -1.0
    last_path, best_path = out_dir / LAST_CHECKPOINT, out_dir / BEST_CHECKPOINT
    epochs = tqdm(range(protocol.epochs), desc=f"Training {model.arch.name}", disable=not progress)
    for epoch in epochs:
        dataset.set_epoch(epoch)
        model.train()
        loss_sum, count, scores, targets = 0.0, 0, [], []
        for step, (clips, labels) in enumerate(loader):
            lr = lr_at(protocol, (epoch + step / steps) / protocol.epochs)
            for group in optimizer.param_groups:
                group["lr"] = lr
            clips, labels = clips.to(device), labels.to(device)
            logits = model(clips)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(labels)
            count += len(labels)
            scores.append(logits.detach().cpu())
            targets.append(labels.cpu())
        scores, targets = torch.cat(scores), torch.cat(targets)
        top1, top5 = topk_accuracy(scores, targets, 1), topk_accuracy(scores, targets, 5)
        rows.append((epoch, lr, loss_sum / count, top1, top5))
        LOG.info("epoch %d: lr %.5f loss %.4f top1 %.2f", epoch, lr, loss_sum / count, top1)
        save_checkpoint(model, last_path, epoch=epoch, top1=top1)
        if top1 > best_top1:
            best_top1 = top1
            save_checkpoint(model, best_path, epoch=epoch, top1=top1)
    log = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    log.to_csv(out_dir / METRICS_FILE, index=False, lineterminator="\n")
    return TrainResult(last_path, best_path, log)


def check_chain(chain):
    chain = list(chain)
    if not chain:
        raise TrainingError("progressive chain is empty")
    if any(k < 1 for k in chain) or any(b <= a for a, b in zip(chain, chain[1:])):
        raise TrainingError(f"progressive chain {chain} must be strictly increasing positive frame counts")
    return chain


def stage_dir(out_dir, frames):
    return Path(out_dir) / f"k{frames}"


def train_progressive(
    arch,
    chain,
    store,
    sampler,
    protocol,
    *,
    init=Init.IMAGENET,
    weights_dir=None,
    dropout=0.0,
    start_stage=0,
    out_dir="runs/progressive",
    **options,
):
    """
    Train ``arch`` at each frame count of ``chain`` in turn, every stage starting from the previous stage's
    final weights; stage ``start_stage > 0`` resumes from the checkpoint the previous stage left on disk.
    """
    chain = check_chain(chain)
    if not 0 <= start_stage < len(chain):
        raise TrainingError(f"start stage {start_stage} outside chain {chain}")
    result = None
    for stage in range(start_stage, len(chain)):
        frames = chain[stage]
        if stage == 0:
            model = assemble(replace(arch, frames=frames), init, weights_dir=weights_dir, dropout=dropout)
        else:
            prior = stage_dir(out_dir, chain[stage - 1]) / LAST_CHECKPOINT
            try:
                model = retarget_frames(load_checkpoint(prior), frames)
            except CheckpointError as exc:
                raise TrainingError(f"stage {stage} ({frames} frames) needs the previous stage: {exc}") from None
        save_checkpoint(model, stage_dir(out_dir, frames) / INIT_CHECKPOINT, stage=stage)
        LOG.info("progressive stage %d: %d frames", stage, frames)
        stage_sampler = replace(sampler, frames=frames)
        result = train(model, store, stage_sampler, protocol, out_dir=stage_dir(out_dir, frames), **options)
    return result


def _video_probabilities(model, store, entry, sampler, preprocess_spec, device):
    plan = sample(sampler, entry.num_frames, video_rng(sampler.seed, "eval", entry.video_id))
    views = []
    for clip in plan:
        frames = load_clip(store, entry.video_id, clip)
        views += [view.to_layout(model.input_layout).values for view in preprocess(frames, preprocess_spec)]
    with torch.no_grad():
        logits = model(torch.stack(views).to(device)).double().cpu().numpy()
    return softmax(logits, axis=1)


def evaluate(
    model,
    store,
    sampler,
    eval_protocol,
    *,
    preprocess_spec=None,
    input_size=224,
    dataset="",
    device="cpu",
    with_cost=True,
    progress=False,
):
    """
    Top-1/top-5 over ``store``. Every video contributes ``clips * crops`` predictions whose class probabilities
    are averaged before ranking; clip level is the one-clip, one-crop case.
    The recorded FLOPs are per view, at the crop side the views are fed at.
    """
    if len(store) == 0:
        raise DataError(f"no videos in {store.manifest_path}")
    sampler = replace(
        sampler, frames=model.arch.frames, mode=eval_protocol.sampling_mode, clips=eval_protocol.clips
    )
    preprocess_spec = preprocess_spec or PreprocessSpec.for_evaluation(eval_protocol.crops, input_size)
    device = torch.device(device)
    model = model.to(device).eval()
    probabilities, per_video = [], 0
    for entry in tqdm(store.videos, desc=f"Evaluating {model.arch.name}", disable=not progress):
        predictions = _video_probabilities(model, store, entry, sampler, preprocess_spec, device)
        per_video = len(predictions)
        # per-class sort: the mean is independent of view order
        probabilities.append(np.sort(predictions, axis=0).mean(axis=0))
    probabilities, labels = np.stack(probabilities), store.labels
    arch = model.arch
    record = RunRecord(
        family=arch.family.value,
        backbone=arch.backbone.value,
        frames=arch.frames,
        temporal_pool=arch.temporal_pool,
        dataset=dataset,
        sampling=sampler.strategy.value,
        level=eval_protocol.level.value,
        clips=eval_protocol.clips,
        crops=eval_protocol.crops,
        top1=topk_accuracy(probabilities, labels, 1),
        top5=topk_accuracy(probabilities, labels, 5),
        flops=count_flops(model, preprocess_spec.crop_size) if with_cost else 0,
        params=count_params(model) if with_cost else 0,
    )
    LOG.info("%s: top1 %.2f top5 %.2f", arch.name, record.top1, record.top5)
    return EvaluationResult(record, probabilities, labels, per_video)

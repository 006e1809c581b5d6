import numpy as np
import pandas as pd
import pytest
import torch
from stzoo import engine, sampling
from stzoo.archspec import (
    ArchSpec,
    Backbone,
    EvalLevel,
    EvalProtocol,
    Family,
    Init,
    SamplerConfig,
    Schedule,
    Strategy,
    TrainProtocol,
)
from stzoo.datapipe import FrameStore, PreprocessSpec
from stzoo.engine import (
    INIT_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_COLUMNS,
    build_optimizer,
    check_chain,
    evaluate,
    lr_at,
    reset_classifier,
    stage_dir,
    train,
    train_progressive,
)
from stzoo.errors import DataError, TrainingError
from stzoo.factory import assemble, load_checkpoint
from stzoo.profiler import count_flops
from stzoo.sampling import ClipIndexPlan
from torch import nn

QUICK = TrainProtocol(epochs=2, batch_size=4)
TINY = ArchSpec(Family.TSN, Backbone.TINYNET, frames=4, num_classes=2)


def tiny_model(spec=TINY, seed=0):
    torch.manual_seed(seed)
    return assemble(spec)


def same_parameters(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


class FixedLogits(nn.Module):
    """Scores every clip with the same logits, whatever the pixels."""

    def __init__(self, logits, frames=4):
        super().__init__()
        self.arch = ArchSpec(Family.TSN, Backbone.TINYNET, frames=frames, num_classes=len(logits))
        self.logits = nn.Parameter(torch.tensor(logits))

    @property
    def input_layout(self):
        return self.arch.input_layout

    def forward(self, x):
        return self.logits.expand(len(x), -1)


def test_full_protocol_learning_rate():
    full = TrainProtocol.full()
    assert abs(lr_at(full, 0.0) - 0.01) < 1e-9
    assert abs(lr_at(full, 17 / 196) - 0.805) < 1e-9
    assert abs(lr_at(full, 34 / 196) - 1.6) < 1e-9
    assert abs(lr_at(full, 1.0)) < 1e-9
    rates = [lr_at(full, step / 1000) for step in range(174, 1001)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_step_schedule():
    protocol = TrainProtocol(epochs=10, lr=0.1, peak_lr=0.1, schedule=Schedule.STEP)
    assert lr_at(protocol, 0.25) == pytest.approx(0.1)
    assert lr_at(protocol, 0.5) == pytest.approx(0.01)
    assert lr_at(protocol, 0.9) == pytest.approx(0.001)


def test_weight_decay_without_gradient():
    layer = nn.Linear(3, 2)
    before = layer.weight.detach().clone()
    protocol = TrainProtocol(lr=0.5, peak_lr=0.5, momentum=0.0, weight_decay=0.1)
    optimizer = build_optimizer(layer, protocol)
    for parameter in layer.parameters():
        parameter.grad = torch.zeros_like(parameter)
    optimizer.step()
    assert torch.allclose(layer.weight, before * (1 - 0.5 * 0.1))


def test_reset_classifier():
    model = reset_classifier(tiny_model(), 7)
    assert model.arch.num_classes == 7
    assert model.fc.out_features == 7


def test_zero_learning_rate_leaves_weights_alone(direction_store, tmp_path):
    model = tiny_model()
    reference = tiny_model()
    frozen = TrainProtocol(epochs=1, lr=0.0, peak_lr=0.0, batch_size=4)
    train(model, direction_store, SamplerConfig(), frozen, input_size=32, out_dir=tmp_path)
    assert same_parameters(model, reference)


def test_train_writes_checkpoints_and_metrics(direction_store, tmp_path):
    result = train(tiny_model(), direction_store, SamplerConfig(), QUICK, input_size=32, out_dir=tmp_path)
    assert result.checkpoint == tmp_path / LAST_CHECKPOINT
    assert result.best_checkpoint.is_file()
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics.columns) == METRICS_COLUMNS
    assert list(metrics["epoch"]) == [0, 1]
    assert metrics["top1"].between(0, 100).all()
    assert load_checkpoint(result.checkpoint).arch == TINY


def test_training_is_deterministic(direction_store, tmp_path):
    runs = []
    for name in ("a", "b"):
        result = train(tiny_model(), direction_store, SamplerConfig(), QUICK, input_size=32, out_dir=tmp_path / name)
        runs.append(load_checkpoint(result.checkpoint))
    assert same_parameters(*runs)


def test_non_finite_loss_stops_training(direction_store, tmp_path):
    model = tiny_model()
    with torch.no_grad():
        model.fc.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, direction_store, SamplerConfig(), QUICK, input_size=32, out_dir=tmp_path)


def test_progressive_chain(direction_store, tmp_path):
    protocol = TrainProtocol(epochs=1, batch_size=4)
    result = train_progressive(
        TINY, [4, 8], direction_store, SamplerConfig(), protocol, init=Init.SCRATCH, out_dir=tmp_path, input_size=32
    )
    assert result.checkpoint == stage_dir(tmp_path, 8) / LAST_CHECKPOINT
    first = load_checkpoint(stage_dir(tmp_path, 4) / LAST_CHECKPOINT)
    second = load_checkpoint(stage_dir(tmp_path, 8) / INIT_CHECKPOINT)
    assert second.arch.frames == 8
    assert same_parameters(first, second)
    assert load_checkpoint(result.checkpoint).arch.frames == 8


def test_progressive_chain_errors(direction_store, tmp_path):
    with pytest.raises(TrainingError):
        check_chain([16, 8])
    with pytest.raises(TrainingError):
        check_chain([])
    with pytest.raises(TrainingError, match="previous stage"):
        train_progressive(TINY, [4, 8], direction_store, SamplerConfig(), QUICK, start_stage=1, out_dir=tmp_path)


def test_evaluate_against_fixed_logits(direction_store):
    model = FixedLogits([0.0, 2.0, 1.0])
    result = evaluate(model, direction_store, SamplerConfig(), EvalProtocol(), input_size=32, with_cost=False)
    expected = np.exp([0.0, 2.0, 1.0]) / np.exp([0.0, 2.0, 1.0]).sum()
    assert np.allclose(result.probabilities, expected)
    assert result.record.top1 == pytest.approx(50.0)
    assert result.record.top5 == pytest.approx(100.0)
    assert result.predictions_per_video == 1


def test_evaluate_levels(direction_store):
    model = tiny_model()
    clip = evaluate(model, direction_store, SamplerConfig(), EvalProtocol.clip(), input_size=32, dataset="direction")
    one = EvalProtocol(EvalLevel.VIDEO, clips=1, crops=1)
    video = evaluate(model, direction_store, SamplerConfig(), one, input_size=32, with_cost=False)
    assert np.array_equal(clip.probabilities, video.probabilities)
    assert clip.record.level == "Clip" and video.record.level == "Video"
    assert clip.record.flops == count_flops(model, 32) and clip.record.params > 0
    hits = (clip.probabilities.argmax(axis=1) == clip.labels).mean() * 100
    assert clip.record.top1 == pytest.approx(hits)
    assert np.allclose(clip.probabilities.sum(axis=1), 1.0)


def test_multi_view_evaluation(direction_store):
    protocol = EvalProtocol.kinetics()
    model = tiny_model()
    result = evaluate(model, direction_store, SamplerConfig(), protocol, input_size=32)
    assert result.predictions_per_video == 30
    assert result.probabilities.shape == (6, 2)
    view_side = PreprocessSpec.for_evaluation(protocol.crops, 32).crop_size
    assert view_side == 37
    assert result.record.flops == count_flops(model, view_side) > count_flops(model, 32)


class FramePositions(nn.Module):
    """Scores each view by where its bright pixels sit across columns and time, one view at a time."""

    def __init__(self, frames=4):
        super().__init__()
        self.arch = ArchSpec(Family.TSN, Backbone.TINYNET, frames=frames, num_classes=2)

    @property
    def input_layout(self):
        return self.arch.input_layout

    def score(self, view):
        columns = view.mean(dim=(1, 2))
        time = torch.linspace(1.0, 2.0, len(columns))
        space = torch.linspace(-1.0, 1.0, columns.shape[-1])
        level = time @ (columns @ space)
        return torch.stack([level, -level])

    def forward(self, x):
        return torch.stack([self.score(view) for view in x])


@pytest.mark.parametrize("reorder", [lambda clips: clips[::-1], lambda clips: clips[1:] + clips[:1]])
def test_video_probabilities_ignore_clip_order(direction_store, monkeypatch, reorder):
    protocol = EvalProtocol(EvalLevel.VIDEO, clips=4, crops=3)
    model = FramePositions()
    dense = SamplerConfig(Strategy.DENSE)
    plain = evaluate(model, direction_store, dense, protocol, input_size=32, with_cost=False)
    plans = []

    def reordered(config, num_frames, rng=None):
        plan = sampling.sample(config, num_frames, rng)
        plans.append(plan)
        return ClipIndexPlan(reorder(plan.clips))

    monkeypatch.setattr(engine, "sample", reordered)
    shuffled = evaluate(model, direction_store, dense, protocol, input_size=32, with_cost=False)
    assert len(plans) == len(direction_store)
    assert all(len(set(plan.clips)) == 4 for plan in plans)
    assert np.array_equal(plain.probabilities, shuffled.probabilities)
    assert not np.allclose(plain.probabilities, 0.5)


def test_evaluate_empty_store(tmp_path):
    pd.DataFrame(columns=["video_id", "path", "num_frames", "label"]).to_csv(tmp_path / "manifest.csv", index=False)
    with pytest.raises(DataError):
        evaluate(tiny_model(), FrameStore(tmp_path), SamplerConfig(), EvalProtocol())

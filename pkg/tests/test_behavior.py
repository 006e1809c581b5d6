import pytest
import torch
from stzoo.archspec import ArchSpec, Backbone, EvalProtocol, Family, SamplerConfig, TrainProtocol
from stzoo.datapipe import SyntheticTask, make_synthetic
from stzoo.engine import evaluate, train
from stzoo.factory import assemble, load_checkpoint

PROTOCOL = TrainProtocol(epochs=40, lr=0.05, peak_lr=0.05, batch_size=8)


@pytest.fixture(scope="module")
def stores(tmp_path_factory):
    root = tmp_path_factory.mktemp("behavior")
    return {
        task: (
            make_synthetic(task, 64, frames, 32, seed=0, root=root / task.value / "train"),
            make_synthetic(task, 32, frames, 32, seed=1, root=root / task.value / "val"),
        )
        for task, frames in ((SyntheticTask.DIRECTION, 8), (SyntheticTask.ADJACENCY, 16))
    }


def accuracy(stores, task, family, pooled, tmp_path):
    train_store, val_store = stores[task]
    frames = train_store.videos[0].num_frames
    spec = ArchSpec(family, Backbone.TINYNET, frames=frames, temporal_pool=pooled, num_classes=2)
    sampler = SamplerConfig(frames=frames)
    torch.manual_seed(0)
    result = train(assemble(spec), train_store, sampler, PROTOCOL, input_size=32, out_dir=tmp_path)
    model = load_checkpoint(result.checkpoint)
    return evaluate(model, val_store, sampler, EvalProtocol.clip(), input_size=32, with_cost=False).record.top1


@pytest.mark.slow
def test_direction_needs_temporal_modeling(stores, tmp_path):
    # both classes share their frame sets, so a frame-order invariant model sits at chance
    assert 40.0 <= accuracy(stores, SyntheticTask.DIRECTION, Family.TSN, False, tmp_path / "tsn") <= 60.0


@pytest.mark.slow
@pytest.mark.parametrize("family", [Family.TAM, Family.TSM, Family.I3D, Family.S3D, Family.CONV1D])
def test_direction_is_learned_with_temporal_modules(stores, tmp_path, family):
    assert accuracy(stores, SyntheticTask.DIRECTION, family, False, tmp_path) >= 90.0


@pytest.mark.slow
def test_adjacency_favours_temporal_pooling(stores, tmp_path):
    plain = accuracy(stores, SyntheticTask.ADJACENCY, Family.TSN, False, tmp_path / "plain")
    pooled = accuracy(stores, SyntheticTask.ADJACENCY, Family.TSN, True, tmp_path / "pooled")
    assert pooled - plain >= 20.0

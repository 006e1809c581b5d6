import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from stzoo.archspec import (
    ArchSpec,
    Backbone,
    EvalLevel,
    EvalProtocol,
    ExperimentConfig,
    Family,
    Layout,
    Placement,
    SamplerConfig,
    TrainProtocol,
    VideoTensor,
    canonical_name,
    load_config,
    override,
    parse_config,
    save_config,
    validate,
)
from stzoo.errors import ConfigError, ShapeError, SpecError


def rules(spec):
    return [violation.rule for violation in validate(spec)]


def test_validate_examples():
    assert rules(ArchSpec(Family.TAM, Backbone.RESNET18)) == []
    assert rules(ArchSpec(Family.TSN, Backbone.RESNET18, placement=Placement.TOP_HALF)) == [
        "placement TopHalf is invalid for TSN"
    ]
    assert rules(ArchSpec(Family.I3D, Backbone.TINYNET, frames=4, temporal_pool=True)) == [
        "frames<8 with temporal_pool"
    ]


def test_validate_collects_every_violation():
    spec = ArchSpec(Family.TSN_NLN, Backbone.TINYNET, frames=0, placement=Placement.UNIFORM_HALF, num_classes=0)
    fields = {violation.field for violation in validate(spec)}
    assert fields == {"frames", "num_classes", "placement", "backbone"}
    with pytest.raises(SpecError):
        spec.check()


def test_strings_are_coerced_to_enums():
    spec = ArchSpec("TSN+NLN", "ResNet50")
    assert spec.family is Family.TSN_NLN
    assert spec.backbone is Backbone.RESNET50
    with pytest.raises(SpecError, match="is not one of"):
        ArchSpec("C3D", "ResNet50")


@pytest.mark.parametrize(
    "family,backbone,pooled,name",
    [
        (Family.I3D, Backbone.RESNET18, True, "I3D-ResNet18-tp"),
        (Family.TSN, Backbone.RESNET50, False, "TSN-ResNet50"),
        (Family.TAM, Backbone.INCEPTION_V1, False, "TAM-InceptionV1"),
    ],
)
def test_canonical_name(family, backbone, pooled, name):
    assert canonical_name(ArchSpec(family, backbone, temporal_pool=pooled)) == name


def test_canonical_name_rejects_invalid_specs():
    with pytest.raises(SpecError):
        canonical_name(ArchSpec(Family.TSN, Backbone.TINYNET, frames=4, temporal_pool=True))


@given(
    family=st.sampled_from(Family),
    backbone=st.sampled_from(Backbone),
    pooled=st.booleans(),
    frames=st.sampled_from([8, 16, 32, 64]),
)
def test_canonical_names_are_unique(family, backbone, pooled, frames):
    spec = ArchSpec(family, backbone, frames=frames, temporal_pool=pooled)
    if validate(spec):
        return
    family_text, backbone_text, *suffix = spec.name.split("-")
    assert Family(family_text) is family
    assert Backbone(backbone_text) is backbone
    assert bool(suffix) is pooled


def test_video_tensor_layouts():
    values = torch.arange(2 * 3 * 4 * 5, dtype=torch.float32).view(2, 3, 4, 5)
    clip = VideoTensor(values)
    assert (clip.frames, clip.channels, clip.height, clip.width) == (2, 3, 4, 5)
    volumetric = clip.to_layout(Layout.VOLUMETRIC_3D)
    assert volumetric.values.shape == (3, 2, 4, 5)
    assert (volumetric.frames, volumetric.channels) == (2, 3)
    assert torch.equal(volumetric.to_layout("Batched2D").values, values)
    with pytest.raises(ShapeError):
        VideoTensor(torch.zeros(3, 4, 5))
    with pytest.raises(ShapeError):
        VideoTensor(torch.zeros(0, 3, 4, 5))


def test_protocol_presets():
    full = TrainProtocol.full()
    assert (full.epochs, full.lr, full.peak_lr, full.warmup_epochs) == (196, 0.01, 1.6, 34)
    assert (full.momentum, full.weight_decay) == (0.9, 1e-4)
    assert TrainProtocol.transfer().batch_size == 48
    assert EvalProtocol.kinetics().predictions_per_video == 30
    assert EvalProtocol.ssv2().predictions_per_video == 6
    assert EvalProtocol.video().clips == 10
    with pytest.raises(ConfigError):
        EvalProtocol(EvalLevel.CLIP, clips=2)
    with pytest.raises(ConfigError):
        SamplerConfig(frames=0)


def example_config():
    return ExperimentConfig(
        ArchSpec(Family.TAM, Backbone.TINYNET, frames=16, temporal_pool=True, placement=Placement.TOP_HALF),
        "synthetic-adjacency",
        sampler=SamplerConfig(frames=16, clips=2, seed=3),
        train=TrainProtocol(epochs=5, progressive=(8, 16)),
        eval=EvalProtocol.video(clips=2),
        seed=3,
    )


def test_save_then_load_config(tmp_path):
    config = example_config()
    path = save_config(config, tmp_path / "config.yaml")
    assert load_config(path) == config


def test_unknown_field_names_key_and_line():
    text = "arch:\n  family: TSN\n  backbone: TinyNet\n  framez: 8\ndataset: synthetic-direction\n"
    with pytest.raises(ConfigError, match="framez") as error:
        parse_config(text, source="exp.yaml")
    assert "exp.yaml:4" in str(error.value)


def test_empty_and_malformed_configs():
    with pytest.raises(ConfigError, match="parse error"):
        parse_config("")
    with pytest.raises(ConfigError, match="parse error"):
        parse_config("arch: [unclosed\n")
    with pytest.raises(ConfigError, match="missing field"):
        parse_config("dataset: synthetic-direction\n")


def test_config_type_errors():
    text = "arch:\n  family: TSN\n  backbone: TinyNet\n  frames: eight\ndataset: synthetic-direction\n"
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config(text)
    with pytest.raises(ConfigError, match="is not one of"):
        parse_config("arch:\n  family: TSN\n  backbone: VGG\ndataset: synthetic-direction\n")


def test_config_consistency():
    config = example_config()
    assert config.violations() == []
    skewed = override(config, **{"sampler.frames": 8})
    assert [violation.field for violation in skewed.violations()] == ["sampler.frames"]
    reseeded = override(config, **{"sampler.seed": 4})
    assert [violation.field for violation in reseeded.violations()] == ["sampler.seed"]
    assert override(config, **{"sampler.seed": 4, "seed": 4}).violations() == []
    text = "arch:\n  family: TSN\n  backbone: TinyNet\ndataset: synthetic-direction\nsampler:\n  seed: 5\n"
    with pytest.raises(ConfigError, match="sampler seed must equal seed"):
        parse_config(text).check()
    assert parse_config(text + "seed: 5\n").check().sampler.seed == 5
    with pytest.raises(ConfigError):
        override(config, dataset="/no/such/dataset").check()


def test_override_changes_related_fields_together():
    config = example_config()
    changed = override(config, **{"eval.level": EvalLevel.CLIP, "eval.clips": 1, "arch.frames": 32, "seed": 7})
    assert changed.eval == EvalProtocol.clip()
    assert changed.arch.frames == 32
    assert changed.seed == 7
    assert changed.sampler == config.sampler

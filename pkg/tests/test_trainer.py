import math
from types import SimpleNamespace

import numpy as np
import pytest

import function.compute_train.trainer as trainer_module
from function.compute_data.dataset import generate_dataset
from function.compute_model.fusion import AlignConfig, FusionConfig
from function.compute_model.model import ModelConfig
from function.compute_train.trainer import (
    TrainConfig, Trainer, build_model, epoch_batches, stage1_groups, stage1_subset, stage2_names, train,
    train_stage1, train_stage2, training_groups, trainable_only, usable_groups,
)
from function.errors import ConfigError, StateError


@pytest.fixture(scope="module")
def occluded_joint():
    return generate_dataset(seed=13, n_train=40, n_val=2, direction="joint", config={"occlusion_p": 0.5})


def _config(**overrides):
    values = dict(model=ModelConfig(dim=8), epochs_s1=1, epochs_s2=1, batch_size=4, s1_fraction=0.25,
                  lr_s1=1e-3, lr_s2=1e-3, seed=5)
    values.update(overrides)
    return TrainConfig(**values)


def _unchanged(before, model, names):
    return all(np.array_equal(before[n], model.params[n].data) for n in names)


class TestTrainConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 3})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"fusion": {"variant": "add", "strength": 2}})

    def test_nested_records(self):
        config = TrainConfig.from_dict({"fusion": {"variant": "fixed_k", "fixed_k_value": 0.2},
                                        "align": {"metric": "cosine"}, "epochs_s2": 2})
        assert config.fusion == FusionConfig("fixed_k", 0.2)
        assert config.align.metric == "cosine"
        assert TrainConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize("kwargs", [
        {"direction": "up"}, {"s1_fraction": 0.0}, {"batch_size": 0}, {"lr_schedule": "step"},
    ])
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestHelpers:
    def test_stage1_subset_size(self):
        samples = [SimpleNamespace(index=i, visible_query=True) for i in range(2000)]
        assert len(stage1_subset(samples, 1.0 / 20.0)) == 100
        seven = [SimpleNamespace(index=i, visible_query=True) for i in range(7)]
        assert [s.index for s in stage1_subset(seven, 0.5)] == [0, 1, 2, 3]

    def test_stage1_subset_skips_samples_without_query(self):
        samples = [SimpleNamespace(index=i, visible_query=i % 3 != 0) for i in range(10)]
        subset = stage1_subset(samples, 0.5)
        assert [s.index for s in subset] == [1, 2, 4, 5, 7]
        with pytest.raises(ConfigError):
            stage1_subset(samples[:3], 1.0)

    def test_stage1_groups_keep_frames_whole(self):
        groups = [[SimpleNamespace(frame=f, orientation=o, visible_query=f != 1)
                   for o in ("ego2exo", "exo2ego")] for f in range(4)]
        picked = stage1_groups(groups, 3 / 8)
        assert [[(s.frame, s.orientation) for s in g] for g in picked] == [
            [(0, "ego2exo"), (0, "exo2ego")], [(2, "ego2exo")]]

    def test_epoch_batches_take_whole_groups(self):
        groups = [["e0", "x0"], ["e1", "x1"], ["e2", "x2"]]
        assert epoch_batches(groups, [2, 0, 1], 4) == [["e2", "x2", "e0", "x0"], ["e1", "x1"]]
        assert epoch_batches(groups, [1, 0, 2], 1) == [["e1", "x1"], ["e0", "x0"], ["e2", "x2"]]
        assert epoch_batches([["a"], ["b"], ["c"]], [0, 1, 2], 2) == [["a", "b"], ["c"]]

    def test_usable_groups_drop_whole_frames(self, occluded_joint):
        groups = training_groups(occluded_joint, "joint")
        usable = usable_groups(groups)
        assert 0 < len(usable) < len(groups)
        assert all(len(g) == 2 and all(s.visible_query for s in g) for g in usable)

    def test_joint_groups_pair_orientations(self, joint_dataset):
        groups = training_groups(joint_dataset, "joint")
        assert len(groups) == joint_dataset.size("train")
        assert all([s.orientation for s in g] == ["ego2exo", "exo2ego"] for g in groups)

    def test_stage2_names(self):
        model = build_model(_config(fusion=FusionConfig("fixed_k")))
        names = stage2_names(model, freeze_encoder=True)
        assert "mcfuse.alpha" not in names and "mcfuse.w_q" in names
        assert not any(n.startswith("encoder.") for n in names)
        assert "encoder.patch_w" in stage2_names(model, freeze_encoder=False)

    def test_trainable_only_restores_flags(self):
        model = build_model(_config())
        with trainable_only(model.params, ["head.bias"]):
            assert not model.params["encoder.patch_w"].requires_grad
            assert model.params["head.bias"].requires_grad
        assert model.params["encoder.patch_w"].requires_grad


class TestStages:
    def test_stage1_touches_only_fusion(self, tiny_dataset):
        config = _config()
        model = build_model(config)
        before = model.params.snapshot()
        train_stage1(config, tiny_dataset, model)
        others = [n for n in model.params.names() if not n.startswith("mcfuse.")]
        assert _unchanged(before, model, others)
        assert not _unchanged(before, model, ["mcfuse.alpha"])

    def test_parameterless_variant_stage1_is_noop(self, tiny_dataset):
        config = _config(fusion=FusionConfig("add"))
        trainer = Trainer(config, tiny_dataset)
        before = trainer.model.params.snapshot()
        trainer.stage1()
        assert trainer.completed_stage == "s1"
        assert _unchanged(before, trainer.model, trainer.model.params.names())

    def test_stage2_freezes_encoder(self, tiny_dataset):
        config = _config()
        model = build_model(config)
        before = model.params.snapshot()
        train_stage2(config, tiny_dataset, model)
        assert _unchanged(before, model, model.params.names("encoder."))
        assert not _unchanged(before, model, ["head.bias"])

    def test_stage_order_enforced(self, tiny_dataset):
        with pytest.raises(StateError):
            Trainer(_config(), tiny_dataset).stage2()
        with pytest.raises(StateError):
            Trainer(_config(mcfuse_enabled=False), tiny_dataset).stage1()

    def test_alignment_gradient_reaches_context(self, tiny_dataset):
        model = build_model(_config())
        sample = next(s for s in tiny_dataset.pairs("train", "ego2exo")
                      if s.visible_query and s.visible_target)
        model.params.zero_grad()
        result = model.forward(sample, AlignConfig(), use_alignment=True)
        result.l_xobj.backward()
        assert np.any(model.params["context.w_q"].grad != 0.0)
        assert not np.any(model.params["head.w_out"].grad)

    def test_stage1_trains_on_exact_subset(self, occluded_joint):
        trainer = Trainer(_config(direction="joint", s1_fraction=0.25), occluded_joint)
        trainer.stage1()
        assert trainer.stage_samples["s1"] == math.ceil(0.25 * 2 * occluded_joint.size("train"))

    def test_joint_batches_are_balanced(self, occluded_joint, monkeypatch):
        trainer = Trainer(_config(direction="joint", batch_size=6), occluded_joint, completed_stage="s1")
        batches, current = [], []
        forward = trainer.model.forward

        def recording_forward(sample, *args, **kwargs):
            current.append(sample.orientation)
            return forward(sample, *args, **kwargs)

        def recording_step(*args, **kwargs):
            batches.append(list(current))
            current.clear()
            return adamw_step(*args, **kwargs)

        adamw_step = trainer_module.adamw_step
        monkeypatch.setattr(trainer.model, "forward", recording_forward)
        monkeypatch.setattr(trainer_module, "adamw_step", recording_step)
        trainer.stage2()

        usable = usable_groups(training_groups(occluded_joint, "joint"))
        assert sum(len(b) for b in batches) == 2 * len(usable) == trainer.stage_samples["s2"]
        assert all(b.count("ego2exo") == b.count("exo2ego") for b in batches)
        assert all(len(b) <= 6 for b in batches)

    def test_model_must_fit_dataset_images(self, tiny_dataset):
        with pytest.raises(ConfigError):
            Trainer(_config(model=ModelConfig(dim=8, image_size=32, patch_size=8)), tiny_dataset)


class TestTrain:
    def test_same_seed_same_run(self, tiny_dataset):
        model_a, trainer_a, _ = train(_config(), tiny_dataset)
        model_b, trainer_b, _ = train(_config(), tiny_dataset)
        assert trainer_a.losses == trainer_b.losses
        for name in model_a.params.names():
            np.testing.assert_array_equal(model_a.params[name].data, model_b.params[name].data)

    def test_loss_history_per_epoch(self, tiny_dataset):
        _, trainer, seconds = train(_config(epochs_s2=2), tiny_dataset)
        assert len(trainer.losses["s1"]["l_mask"]) == 1
        assert len(trainer.losses["s2"]["total"]) == 2
        assert trainer.completed_stage == "s2" and seconds > 0.0

    def test_single_stage_skips_fusion_init(self, tiny_dataset):
        _, trainer, _ = train(_config(two_stage=False), tiny_dataset)
        assert trainer.losses["s1"]["l_mask"] == []
        assert trainer.completed_stage == "s2"

    def test_joint_direction_trains(self, joint_dataset):
        _, trainer, _ = train(_config(direction="joint", epochs_s1=0), joint_dataset)
        assert np.isfinite(trainer.losses["s2"]["l_mask"][0])

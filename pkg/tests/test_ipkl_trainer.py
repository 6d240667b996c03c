import math

import pytest
import torch

from app.core.exceptions import ParameterException, StateException
from app.repository.datasets import SegmentationDataset
from app.services.ipkl_trainer import IPKLTrainer
from app.services.path_control import decompose_annotation
from app.services.training import batch_order, run_training


@pytest.fixture
def source(data_root):
    return SegmentationDataset(f"{data_root}/source-flat")


def batch(dataset, start=0, size=2):
    return dataset.images[start:start + size], dataset.labels[start:start + size]


class TestTrainState:
    """Shared trainable modules over a frozen backbone"""

    def test_branches_share_storage(self, frozen_model, config_factory):
        """Both branches resolve to the same parameter objects and storage"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        fusion_con, head_con = trainer.branch("conditional")
        fusion_unc, head_unc = trainer.branch("unconditional")

        assert fusion_con is fusion_unc and head_con is head_unc
        for a, b in zip(fusion_con.parameters(), fusion_unc.parameters()):
            assert a.data_ptr() == b.data_ptr()

    def test_write_through_one_branch_is_visible_in_the_other(self, frozen_model, config_factory):
        """A weight written via the conditional branch is read by the unconditional one"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        fusion_con, _ = trainer.branch("conditional")
        fusion_unc, _ = trainer.branch("unconditional")
        with torch.no_grad():
            next(fusion_con.parameters()).fill_(0.125)
        assert torch.all(next(fusion_unc.parameters()) == 0.125)

    def test_unknown_branch(self, frozen_model, config_factory):
        """Only the two named branches exist"""
        with pytest.raises(ParameterException):
            IPKLTrainer(frozen_model, config_factory()).branch("teacher")

    def test_seeded_initialization(self, frozen_model, config_factory):
        """Same seed gives the same trainable weights"""
        a = IPKLTrainer(frozen_model, config_factory()).trainable_state_dict()
        b = IPKLTrainer(frozen_model, config_factory()).trainable_state_dict()
        for key, value in a["fusion"].items():
            assert torch.equal(value, b["fusion"][key])

    def test_baseline_mode_rejected(self, frozen_model, config_factory):
        """The baseline arm has its own trainer"""
        with pytest.raises(ParameterException):
            IPKLTrainer(frozen_model, config_factory({"training.mode": "baseline"}))


class TestTrainStep:
    """One joint update of the shared modules"""

    def test_loss_record_linearity(self, frozen_model, config_factory, source):
        """Every record satisfies l_final = lambda1 * l_condit + lambda2 * l_consis"""
        trainer = IPKLTrainer(frozen_model, config_factory({"training.lambda1": 0.7, "training.lambda2": 1.3}))
        for step in range(2):
            record = trainer.train_step(*batch(source, 2 * step))
            assert record.step == step
            assert abs(record.l_final - (0.7 * record.l_condit + 1.3 * record.l_consis)) <= 1e-6
            assert math.isfinite(record.l_final)

    def test_backbone_untouched(self, frozen_model, config_factory, source):
        """Training never changes the denoiser or embedder checksum"""
        before = frozen_model.checksums()
        trainer = IPKLTrainer(frozen_model, config_factory())
        trainer.train_step(*batch(source))
        trainer.train_step(*batch(source, 2))
        assert frozen_model.checksums() == before
        assert trainer.freeze_check().passed

    def test_trainable_weights_change(self, frozen_model, config_factory, source):
        """The shared fusion block is updated"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        before = [p.detach().clone() for p in trainer.state.fusion.parameters()]
        trainer.train_step(*batch(source))
        assert any(not torch.equal(a, b) for a, b in zip(before, trainer.state.fusion.parameters()))

    def test_gradient_partition(self, frozen_model, config_factory, source):
        """Frozen groups hold exactly zero gradient; trainable groups hold finite gradient"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        trainer.train_step(*batch(source))
        report = trainer.state.last_gradients

        assert report.norms["denoiser"] == 0.0
        assert report.norms["condition_embedder"] == 0.0
        assert report.frozen_are_zero
        assert math.isfinite(report.norms["fusion"]) and report.norms["fusion"] > 0.0
        assert math.isfinite(report.norms["head"]) and report.norms["head"] > 0.0

    def test_lambda2_zero_matches_conditional_only_training(self, frozen_model, config_factory, source):
        """With lambda2 = 0 the updates equal those of a trainer with no consistency term"""
        zero = IPKLTrainer(frozen_model, config_factory({"training.lambda2": 0.0, "training.consistency": "l2"}))
        none = IPKLTrainer(frozen_model, config_factory({"training.consistency": "none"}))
        for step in range(2):
            zero.train_step(*batch(source, 2 * step))
            none.train_step(*batch(source, 2 * step))

        for name in ("fusion", "head"):
            a = zero.trainable_state_dict()[name]
            b = none.trainable_state_dict()[name]
            for key in a:
                assert torch.equal(a[key], b[key])

    def test_lambda2_zero_still_logs_consistency(self, frozen_model, config_factory, source):
        """The consistency value is recorded even when it is not optimized"""
        trainer = IPKLTrainer(frozen_model, config_factory({"training.lambda2": 0.0}))
        record = trainer.train_step(*batch(source))
        assert record.l_consis > 0.0
        assert record.l_final == pytest.approx(record.l_condit)

    def test_kl_and_l2_log_different_consistency(self, frozen_model, config_factory, source):
        """Same seed, different objectives, different logged l_consis"""
        l2 = IPKLTrainer(frozen_model, config_factory({"training.consistency": "l2"})).train_step(*batch(source))
        kl = IPKLTrainer(frozen_model, config_factory({"training.consistency": "kl"})).train_step(*batch(source))
        assert l2.l_condit == kl.l_condit
        assert l2.l_consis != kl.l_consis

    def test_diff_only_mode(self, frozen_model, config_factory, source):
        """DIFF-only trains the unconditional branch directly with no consistency term"""
        trainer = IPKLTrainer(frozen_model, config_factory({"training.mode": "diff_only"}))
        record = trainer.train_step(*batch(source))
        assert record.l_consis == 0.0

    def test_all_ignore_batch_is_degenerate(self, frozen_model, config_factory, source):
        """A batch with no labeled pixel is flagged, not fatal"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        images, labels = batch(source)
        record = trainer.train_step(images, torch.full_like(labels, 255))
        assert record.degenerate
        assert record.l_condit == 0.0


class TestFreezeCheck:
    """Checksum comparison of the frozen groups"""

    def test_fresh_state_passes(self, frozen_model, config_factory):
        """Nothing has changed right after construction"""
        report = IPKLTrainer(frozen_model, config_factory()).freeze_check()
        assert report.passed
        assert set(report.groups) == {"denoiser", "condition_embedder"}

    def test_perturbed_weight_fails(self, make_model, config_factory, source):
        """Changing a frozen weight is detected and aborts training at the next check"""
        model = make_model(0)
        trainer = IPKLTrainer(model, config_factory({"training.freeze_check_every": 1}))
        with torch.no_grad():
            next(model.unet.parameters()).add_(1.0)

        report = trainer.freeze_check()
        assert not report.passed
        assert report.failed_groups == ["denoiser"]
        with pytest.raises(StateException):
            trainer.train_step(*batch(source))


class TestPredict:
    """Unconditional-only prediction"""

    def test_values_in_class_range(self, frozen_model, config_factory, source):
        """Predicted classes lie in [0, cls)"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        pred = trainer.predict(source.images[0])
        assert pred.shape == (16, 16)
        assert int(pred.min()) >= 0 and int(pred.max()) < 4

    def test_deterministic(self, frozen_model, config_factory, source):
        """Repeated predictions are identical"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        assert torch.equal(trainer.predict(source.images[1]), trainer.predict(source.images[1]))

    def test_reference_path(self, frozen_model, config_factory, source):
        """The reference path consumes masks and is deterministic"""
        trainer = IPKLTrainer(frozen_model, config_factory())
        image, label = source[0]
        maskset = decompose_annotation(label, source.class_names)
        first = trainer.predict_with_reference(image, maskset)
        assert torch.equal(first, trainer.predict_with_reference(image, maskset))
        assert first.shape == (16, 16)


class TestTrainingLoop:
    """Batching and periodic hooks"""

    def test_batch_order_is_seeded(self):
        """Same seed gives the same batches; every index is used once per epoch"""
        first = batch_order(6, 3, 2, seed=5)
        assert [b.tolist() for b in first] == [b.tolist() for b in batch_order(6, 3, 2, seed=5)]
        assert sorted(torch.cat(first).tolist()) == list(range(6))

    def test_run_training_calls_eval_hook(self, frozen_model, config_factory, source):
        """Evaluation runs every eval_every steps"""
        config = config_factory({"training.steps": 4, "training.eval_every": 2})
        trainer = IPKLTrainer(frozen_model, config)
        seen = []
        records = run_training(trainer, source, config, on_eval=lambda t: seen.append(t.step))
        assert len(records) == 4
        assert seen == [2, 4]

    @pytest.mark.slow
    def test_backbone_frozen_over_200_steps(self, frozen_model, config_factory, source):
        """Denoiser checksum is identical before and after 200 IPKL steps"""
        before = frozen_model.checksums()
        config = config_factory({"training.steps": 200, "training.freeze_check_every": 50})
        trainer = IPKLTrainer(frozen_model, config)
        records = run_training(trainer, source, config)

        assert frozen_model.checksums() == before
        assert all(abs(r.l_final - (r.lambda1 * r.l_condit + r.lambda2 * r.l_consis)) <= 1e-6 for r in records)

        image, label = source[0]
        accuracy = float((trainer.predict(image) == label).float().mean())
        assert accuracy > 1.0 / 4

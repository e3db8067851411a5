"""Pretraining loop, checkpoint store, and optimizer behavior."""

import numpy as np
import pytest
import torch

from conftest import toy_encoder_spec
from mscfusion.errors import (
    ConfigurationError,
    IntegrityError,
    TrainingDivergedError,
)
from mscfusion.model import ModelConfig, build_model, model_config_for_objective
from mscfusion.objectives import CriticConfig, ObjectiveSpec
from mscfusion.synthdata import (
    DatasetManifest,
    LatentSpec,
    SplitSpec,
    VolumePair,
    generate_dataset,
)
from mscfusion.trainer import (
    CheckpointRecord,
    CheckpointStore,
    TrainConfig,
    evaluate_loss,
    load_checkpoint,
    pretrain,
    rebuild_model,
    save_checkpoint,
    select_task_pairs,
)


def small_manifest(seed=3, n=14, noise=0.4):
    spec = LatentSpec(volume_side=16, seed=seed, noise_sigma=noise)
    return generate_dataset(spec, n, folds=5)


def rr_config(epochs=3, seed=0, k=10):
    objective = ObjectiveSpec(terms=("RR",), critic=CriticConfig(dim=16))
    return TrainConfig(
        objective=objective,
        epochs=epochs,
        batch_size=4,
        seed=seed,
        checkpoint_k=k,
        pad=4,
    )


def model_cfg(terms, repr_dim=16):
    enc = toy_encoder_spec(repr_dim=repr_dim)
    enc = type(enc)(
        input_side=16, channels=(8, 12, 16, 16), local_layer=2,
        repr_dim=repr_dim,
    )
    return model_config_for_objective(
        enc, terms, global_head_hidden=0, n_classes=2
    )


class TestPretrain:
    def test_bookkeeping_sorted_records(self):
        man = small_manifest()
        config = rr_config(epochs=5, k=10)
        records, metrics = pretrain(man, 0, config, model_cfg(("RR",)))
        assert len(records) == 5
        assert len(metrics) == 5
        losses = [r.validation_loss for r in records]
        assert losses == sorted(losses)
        assert {m["epoch"] for m in metrics} == set(range(5))

    def test_checkpoint_k_truncates(self):
        man = small_manifest()
        config = rr_config(epochs=5, k=2)
        records, _ = pretrain(man, 0, config, model_cfg(("RR",)))
        assert len(records) == 2

    def test_determinism_same_seed(self):
        man = small_manifest()
        config = rr_config(epochs=3, seed=9)
        _, m1 = pretrain(man, 0, config, model_cfg(("RR",)))
        _, m2 = pretrain(man, 0, config, model_cfg(("RR",)))
        assert [r["val_loss"] for r in m1] == [r["val_loss"] for r in m2]
        assert [r["train_loss"] for r in m1] == [r["train_loss"] for r in m2]

    def test_training_reduces_loss_rr(self):
        # pilot-verified smoke threshold: RR on shared-factor data learns
        man = small_manifest(seed=5, n=20, noise=0.3)
        config = rr_config(epochs=10, seed=1)
        _, metrics = pretrain(man, 0, config, model_cfg(("RR",)))
        assert metrics[-1]["train_loss"] < metrics[0]["train_loss"]

    def test_divergence_aborts_with_epoch(self):
        man = small_manifest(n=10)
        bad = np.full((16, 16, 16), np.nan, dtype=np.float32)
        pairs = [
            VolumePair(p.subject_id, bad, bad, p.label) for p in man.pairs
        ]
        broken = DatasetManifest(
            pairs=pairs,
            split=man.split,
            atlas=man.atlas,
            generator_spec=man.generator_spec,
        )
        with pytest.raises(TrainingDivergedError) as err:
            pretrain(broken, 0, rr_config(epochs=2), model_cfg(("RR",)))
        assert err.value.epoch == 0

    def test_contrastive_batch_size_validated(self):
        objective = ObjectiveSpec(terms=("RR",), critic=CriticConfig(dim=16))
        with pytest.raises(ConfigurationError):
            TrainConfig(objective=objective, batch_size=1).validate()

    def test_supervised_filters_unlabeled(self):
        spec = LatentSpec(
            volume_side=16, seed=6, n_classes=3, class_signal_dims=(0, 1)
        )
        man = generate_dataset(spec, 15, folds=5)
        pairs, labels = select_task_pairs(man.pairs, "2way")
        assert all(p.label in (0, 1) for p in pairs)
        pairs3, labels3 = select_task_pairs(man.pairs, "3way")
        assert len(pairs3) == 15
        assert set(labels3.tolist()) == {0, 1, 2}

    def test_supervised_training_runs(self):
        man = small_manifest(n=20)
        objective = ObjectiveSpec(terms=("CE",), critic=CriticConfig(dim=16))
        config = TrainConfig(
            objective=objective, epochs=2, batch_size=4, seed=0, pad=4
        )
        records, metrics = pretrain(man, 0, config, model_cfg(("CE",)))
        assert len(records) == 2
        assert all(np.isfinite(m["val_loss"]) for m in metrics)


class TestOptimizerBehavior:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        model = build_model(ModelConfig(encoder=toy_encoder_spec()), seed=0)
        opt = torch.optim.RAdam(model.parameters(), lr=4e-4)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k


class TestCheckpointStore:
    def _record(self, epoch, loss, model):
        return CheckpointRecord(
            epoch=epoch,
            validation_loss=loss,
            state={k: v.clone() for k, v in model.state_dict().items()},
            model_config=model.config,
            objective=ObjectiveSpec(terms=("RR",), critic=CriticConfig(dim=8)),
            seed=0,
        )

    def test_roundtrip_bitwise(self, tmp_path):
        model = build_model(
            ModelConfig(encoder=toy_encoder_spec(), local_head=True,
                        global_head_hidden=1, decoder=True, n_classes=2),
            seed=1,
        )
        store = CheckpointStore(tmp_path, k=10)
        record = self._record(3, 0.5, model)
        save_checkpoint(record, store)
        loaded = load_checkpoint(store, 3)
        assert loaded.epoch == 3
        assert loaded.validation_loss == 0.5
        for k, v in record.state.items():
            assert torch.equal(loaded.state[k], v), k
        assert loaded.model_config == record.model_config
        assert loaded.objective.terms == record.objective.terms

    def test_topk_eviction_keeps_lowest(self, tmp_path):
        model = build_model(ModelConfig(encoder=toy_encoder_spec()), seed=2)
        store = CheckpointStore(tmp_path, k=10)
        rng = np.random.default_rng(0)
        losses = rng.permutation(12).astype(float)
        for epoch, loss in enumerate(losses):
            store.save(self._record(epoch, float(loss), model))
        kept = store.load_all()
        assert len(kept) == 10
        assert sorted(r.validation_loss for r in kept) == sorted(losses)[:10]

    def test_checksum_flip_rejected(self, tmp_path):
        model = build_model(ModelConfig(encoder=toy_encoder_spec()), seed=3)
        store = CheckpointStore(tmp_path, k=10)
        path = store.save(self._record(0, 1.0, model))
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            store.load(path)

    def test_rebuild_matches_recorded_validation_loss(self):
        man = small_manifest(n=12)
        config = rr_config(epochs=3)
        records, _ = pretrain(man, 0, config, model_cfg(("RR",)))
        record = records[0]
        model = rebuild_model(record)
        val_pairs = man.val_pairs(0)
        loss, _ = evaluate_loss(model, val_pairs, None, config)
        assert loss == pytest.approx(record.validation_loss, abs=1e-5)

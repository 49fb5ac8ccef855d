"""Training loop behavior and checkpoint container format."""

import math

import numpy as np
import pytest

from cftrack.cfm import sample_pairs
from cftrack.data import SyntheticSceneConfig, generate_sequence
from cftrack.errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointManifestError,
    CheckpointTruncatedError,
    ConfigError,
    NonFiniteLossError,
)
from cftrack.heads import LossWeights
from cftrack.model import CFTrackModel
from cftrack.optim import AdamW
from cftrack.training import (
    TrainConfig,
    batch_losses,
    checkpoint,
    restore,
    train,
    write_loss_csv,
)


@pytest.fixture(scope="module")
def dataset():
    return [
        generate_sequence(SyntheticSceneConfig(seed=50 + s, length=14, occluder_enabled=False))
        for s in range(3)
    ]


def _tiny_config(**kw):
    base = dict(epochs=1, samples_per_epoch=16, batch_size=8, seed=7)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig().validate()

    def test_lr_schedule(self):
        cfg = TrainConfig(epochs=40, samples_per_epoch=80, batch_size=8,
                          learning_rate=1e-3, milestones=(10, 20))
        assert cfg.steps_per_epoch == 10
        assert cfg.lr_at_step(0) == 1e-3
        assert cfg.lr_at_step(99) == 1e-3
        assert cfg.lr_at_step(100) == pytest.approx(1e-4)
        assert cfg.lr_at_step(200) == pytest.approx(1e-5)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(samples_per_epoch=4, batch_size=8).validate()


class TestTrainLoop:
    def test_history_shape_and_determinism(self, dataset):
        def run():
            model = CFTrackModel(seed=1)
            history = train(model, dataset, _tiny_config())
            return history, model.parameter_checksum()

        h1, c1 = run()
        h2, c2 = run()
        assert len(h1) == 2
        assert h1 == h2
        assert c1 == c2

    def test_different_seed_changes_history(self, dataset):
        m1 = CFTrackModel(seed=1)
        m2 = CFTrackModel(seed=1)
        h1 = train(m1, dataset, _tiny_config(seed=7))
        h2 = train(m2, dataset, _tiny_config(seed=8))
        assert h1 != h2

    def test_baseline_mode_skips_matching_loss(self, dataset):
        model = CFTrackModel(seed=2)
        before = {n: p.data.copy() for n, p in model.embedder.named_parameters()}
        cfg = _tiny_config(
            negative_fraction=0.0, loss_weights=LossWeights(lambda3=0.0)
        )
        history = train(model, dataset, cfg)
        assert all(r.l_adapt == 0.0 for r in history)
        for name, p in model.embedder.named_parameters():
            assert np.array_equal(p.data, before[name])

    def test_single_sequence_with_negatives_rejected(self, dataset):
        with pytest.raises(ConfigError):
            train(CFTrackModel(seed=1), dataset[:1], _tiny_config(negative_fraction=0.5))

    def test_nonfinite_loss_aborts_with_step(self, dataset):
        model = CFTrackModel(seed=3)
        model.backbone.stem_kernel.data[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError) as exc:
            train(model, dataset, _tiny_config())
        assert "step 0" in str(exc.value)

    def test_single_step_decreases_frozen_batch_loss(self, dataset):
        # Small-step descent direction check on one fixed batch, 10 trials.
        for trial in range(10):
            model = CFTrackModel(seed=100 + trial)
            cfg = _tiny_config(seed=trial, learning_rate=1e-5)
            pairs = sample_pairs(dataset, cfg.batch_size, cfg.negative_fraction,
                                 seed=cfg.seed)
            opt = AdamW(model.named_parameters(), lr=cfg.learning_rate,
                        weight_decay=0.0)
            opt.zero_grad()
            *_, before, _ = batch_losses(model, dataset, pairs, cfg, step=0)
            opt.step()
            *_, after, _ = batch_losses(model, dataset, pairs, cfg, step=0)
            assert after < before, f"trial {trial}: {after} !< {before}"

    def test_loss_csv_format(self, dataset, tmp_path):
        model = CFTrackModel(seed=4)
        history = train(model, dataset, _tiny_config())
        path = str(tmp_path / "loss.csv")
        write_loss_csv(history, path)
        lines = open(path).read().splitlines()
        assert lines[0] == "step,lr,L_cls,L_1,L_adapt,L_total"
        assert len(lines) == len(history) + 1
        first = lines[1].split(",")
        assert first[0] == "0"
        assert float(first[5]) == pytest.approx(history[0].total)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = CFTrackModel(seed=5)
        path = str(tmp_path / "model.ckpt")
        checkpoint(model, path)
        fresh = CFTrackModel(seed=999)  # different init, same architecture
        restore(path, fresh)
        for (na, pa), (nb, pb) in zip(model.named_parameters(), fresh.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_restore_default_architecture(self, tmp_path):
        model = CFTrackModel(seed=6)
        path = str(tmp_path / "model.ckpt")
        checkpoint(model, path)
        loaded = restore(path)
        assert loaded.parameter_checksum() == model.parameter_checksum()

    def test_corrupt_payload_byte_fails_checksum(self, tmp_path):
        model = CFTrackModel(seed=7)
        path = str(tmp_path / "model.ckpt")
        checkpoint(model, path)
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointChecksumError):
            restore(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        open(path, "wb").write(b"NOPE" + b"\x00" * 20)
        with pytest.raises(CheckpointFormatError):
            restore(path)

    def test_bad_version(self, tmp_path):
        model = CFTrackModel(seed=7)
        path = str(tmp_path / "model.ckpt")
        checkpoint(model, path)
        blob = bytearray(open(path, "rb").read())
        blob[4] = 99
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            restore(path)

    def test_truncated_payload(self, tmp_path):
        model = CFTrackModel(seed=7)
        path = str(tmp_path / "model.ckpt")
        checkpoint(model, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 3])
        with pytest.raises((CheckpointTruncatedError, CheckpointManifestError,
                            CheckpointChecksumError)):
            restore(path)

    def test_architecture_mismatch_names_tensor(self, tmp_path):
        from cftrack.backbone import BackboneConfig
        from cftrack.model import ModelConfig

        model = CFTrackModel(seed=8)
        path = str(tmp_path / "model.ckpt")
        checkpoint(model, path)
        # Same parameter names, different stem width: shapes disagree.
        other = CFTrackModel(
            ModelConfig(backbone=BackboneConfig(widths=(8, 24, 32, 64))), seed=8
        )
        with pytest.raises(CheckpointManifestError) as exc:
            restore(path, other)
        assert "backbone.stem.kernel" in str(exc.value)

    def test_trained_checkpoint_round_trip(self, dataset, tmp_path):
        model = CFTrackModel(seed=9)
        train(model, dataset, _tiny_config())
        path = str(tmp_path / "trained.ckpt")
        checkpoint(model, path)
        loaded = restore(path)
        assert loaded.parameter_checksum() == model.parameter_checksum()

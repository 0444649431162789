import json
import math

import numpy as np
import pytest

from sslprof import dataio, encoder, evaluate, trainer
from sslprof.dataio import DatasetManifest, SiteRecord
from sslprof.errors import ManifestError, TrainingDiverged, ValidationError
from sslprof.trainer import (
    AdamW,
    ema_momentum_schedule,
    lr_schedule,
    teacher_temp_schedule,
    train_config_from_dict,
)

TINY_TRAIN = {
    "epochs": 2,
    "batch_size": 8,
    "warmup_epochs": 1,
    "seed": 3,
    "channel_set": "fluorescent",
    "encoder": {
        "image_size": 32,
        "patch_size": 8,
        "embed_dim": 16,
        "depth": 1,
        "n_heads": 2,
        "n_prototypes": 16,
        "head_hidden_dim": 16,
        "head_bottleneck_dim": 8,
    },
    "augment": {
        "out_size": [32, 32],
        "elastic": {"alpha_elastic": 40.0, "sigma_smooth": 4.0, "prob": 0.5},
    },
}


def tiny_config(out_dir, **overrides):
    data = {**TINY_TRAIN, "out_dir": str(out_dir), **overrides}
    return train_config_from_dict(data)


class TestSchedules:
    def test_lr_knots(self):
        kw = dict(base_lr=0.01, warmup_steps=10, total_steps=100)
        assert lr_schedule(0, **kw) == 0.0
        assert lr_schedule(10, **kw) == pytest.approx(0.01)
        assert lr_schedule(100, **kw) == pytest.approx(0.0, abs=1e-12)

    def test_lr_monotone_warmup(self):
        kw = dict(base_lr=0.01, warmup_steps=5, total_steps=50)
        values = [lr_schedule(s, **kw) for s in range(6)]
        assert values == sorted(values)

    def test_ema_ramp(self):
        assert ema_momentum_schedule(0, 100, 0.992, 0.999) == pytest.approx(0.992)
        assert ema_momentum_schedule(100, 100, 0.992, 0.999) == pytest.approx(0.999)
        mid = ema_momentum_schedule(50, 100, 0.992, 0.999)
        assert 0.992 < mid < 0.999

    def test_teacher_temp_ramp(self):
        assert teacher_temp_schedule(0, 10, 0.04, 0.07) == pytest.approx(0.04)
        assert teacher_temp_schedule(10, 10, 0.04, 0.07) == pytest.approx(0.07)
        assert teacher_temp_schedule(25, 10, 0.04, 0.07) == pytest.approx(0.07)


class TestConfig:
    def test_channel_count_inferred(self):
        cfg = train_config_from_dict({"channel_set": "brightfield", "augment": {"out_size": [48, 48]}})
        assert cfg.encoder.in_channels == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="bogus"):
            train_config_from_dict({"bogus": 1})

    def test_batch_size_floor(self, tmp_path):
        cfg = tiny_config(tmp_path, batch_size=1)
        with pytest.raises(ValidationError):
            cfg.validate()

    def test_mismatched_out_size_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg = type(cfg)(**{**cfg.__dict__, "augment": cfg.augment.__class__(out_size=(16, 16))})
        with pytest.raises(ValidationError):
            cfg.validate()


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    _, manifest = small_dataset
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out)
    states = []
    ckpt = trainer.train(
        manifest,
        cfg,
        on_step=lambda state, comps: states.append(
            {
                "step": state.step,
                "student": {
                    k: v.copy()
                    for k, v in state.student.tensors.items()
                    if k in ("cls_token", "norm.g")
                },
                "teacher": {
                    k: v.copy()
                    for k, v in state.teacher.tensors.items()
                    if k in ("cls_token", "norm.g")
                },
            }
        ),
    )
    return manifest, cfg, ckpt, states


@pytest.fixture(scope="module")
def embedded(small_dataset, tmp_path_factory):
    _, manifest = small_dataset
    out = tmp_path_factory.mktemp("embed_run")
    cfg = tiny_config(out, epochs=1)
    ckpt = trainer.train(manifest, cfg)
    return manifest, ckpt


class TestTrainLoop:
    def test_bookkeeping(self, trained):
        manifest, cfg, ckpt, _ = trained
        # 6 wells x 9 sites = 54 sites, batch 8 -> 6 steps/epoch, 2 epochs
        lines = (ckpt.parent / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 12
        first = json.loads(lines[0])
        for key in ("step", "total", "dino", "local_agg", "ibot", "koleo"):
            assert key in first
        checkpoints = sorted(ckpt.parent.glob("checkpoint_epoch_*.cpck"))
        assert len(checkpoints) == 2
        assert ckpt == checkpoints[-1]

    def test_loss_values_finite(self, trained):
        _, _, ckpt, _ = trained
        for line in (ckpt.parent / "metrics.jsonl").read_text().splitlines():
            obj = json.loads(line)
            assert math.isfinite(obj["total"])

    def test_teacher_follows_ema_recursion(self, trained):
        manifest, cfg, ckpt, states = trained
        # reconstruct the EMA trajectory for the recorded tensors
        init = encoder.init_params(cfg.encoder, cfg.seed)
        total_steps = 12
        for name in ("cls_token", "norm.g"):
            expected = init.tensors[name].astype(np.float64).copy()
            for state in states:
                m = ema_momentum_schedule(
                    state["step"] - 1, total_steps, cfg.ema_momentum[0], cfg.ema_momentum[1]
                )
                expected = m * expected + (1 - m) * state["student"][name]
            np.testing.assert_allclose(
                states[-1]["teacher"][name], expected, rtol=2e-5, atol=1e-7
            )

    def test_optimizer_never_touches_teacher(self, trained):
        manifest, cfg, ckpt, states = trained
        first, last = states[0], states[-1]
        assert not np.array_equal(
            first["student"]["cls_token"], last["student"]["cls_token"]
        )
        # teacher only moves through EMA: it must differ from the student
        assert not np.array_equal(
            last["teacher"]["cls_token"], last["student"]["cls_token"]
        )

    def test_optimizer_state_holds_student_tensors_only(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        cfg = tiny_config(tmp_path, epochs=1)
        captured = {}
        trainer.train(
            manifest, cfg, on_step=lambda state, comps: captured.update(state=state)
        )
        state = captured["state"]
        student_names = set(state.student.tensors)
        assert set(state.optimizer.m) <= student_names
        assert set(state.optimizer.v) <= student_names

    def test_checkpoint_loads(self, trained):
        _, cfg, ckpt, _ = trained
        loaded = encoder.load_checkpoint(ckpt)
        assert loaded.extra["channel_set"] == "fluorescent"
        assert loaded.step == 12
        teacher = loaded.model("teacher")
        assert teacher.config == cfg.encoder


class TestDeterminism:
    def test_same_seed_byte_identical(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        ck1 = trainer.train(manifest, tiny_config(tmp_path / "a", epochs=1))
        ck2 = trainer.train(manifest, tiny_config(tmp_path / "b", epochs=1))
        assert ck1.read_bytes() == ck2.read_bytes()
        assert (
            (tmp_path / "a/metrics.jsonl").read_text()
            == (tmp_path / "b/metrics.jsonl").read_text()
        )

    def test_worker_count_does_not_change_result(
        self, small_dataset, tmp_path, monkeypatch
    ):
        _, manifest = small_dataset
        ck1 = trainer.train(manifest, tiny_config(tmp_path / "serial", epochs=1))
        monkeypatch.setenv("SSLPROF_NUM_WORKERS", "3")
        ck2 = trainer.train(manifest, tiny_config(tmp_path / "pooled", epochs=1))
        assert ck1.read_bytes() == ck2.read_bytes()

    def test_zeroed_run_keeps_params(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        cfg = tiny_config(
            tmp_path,
            epochs=1,
            warmup_epochs=0,
            base_lr=0.0,
            weight_decay=0.0,
            loss={"lambda1": 0.0, "lambda2": 0.0, "local_agg_weight": 0.0},
        )
        ckpt = trainer.train(manifest, cfg)
        student = encoder.load_checkpoint(ckpt).model("student")
        init = encoder.init_params(cfg.encoder, cfg.seed)
        for name in init.tensors:
            np.testing.assert_array_equal(student.tensors[name], init.tensors[name])


class TestTrainValidation:
    def test_single_site_well_rejected(self, tmp_path):
        recs = [
            SiteRecord("P1", "A01", 0, "CL1", "x", "a.cpim", "fluorescent"),
        ]
        manifest = DatasetManifest(records=recs, root=tmp_path)
        with pytest.raises(ManifestError, match="site"):
            trainer.train(manifest, tiny_config(tmp_path))

    def test_missing_channel_set_rejected(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        only_bright = DatasetManifest(
            records=[r for r in manifest.records if r.channel_set == "brightfield"],
            root=manifest.root,
        )
        with pytest.raises(ManifestError, match="fluorescent"):
            trainer.train(only_bright, tiny_config(tmp_path))

    def test_batch_larger_than_dataset(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        with pytest.raises(ValidationError, match="batch_size"):
            trainer.train(manifest, tiny_config(tmp_path, batch_size=100))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_guard_raises(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        cfg = tiny_config(tmp_path, base_lr=1e6, epochs=2, warmup_epochs=0)
        with pytest.raises(TrainingDiverged):
            trainer.train(manifest, cfg)


class TestEmbedDataset:
    def test_row_count(self, embedded):
        manifest, ckpt = embedded
        site = trainer.embed_dataset(ckpt, manifest)
        assert len(site.cls.keys) == 6 * 9
        assert len(site.patch_mean.keys) == 6 * 9
        assert site.cls.level == "site"

    def test_rerun_bitwise_identical(self, embedded):
        manifest, ckpt = embedded
        a = trainer.embed_dataset(ckpt, manifest)
        b = trainer.embed_dataset(ckpt, manifest)
        assert a.cls.vectors.tobytes() == b.cls.vectors.tobytes()
        assert a.patch_mean.vectors.tobytes() == b.patch_mean.vectors.tobytes()

    def test_channel_set_from_checkpoint(self, embedded):
        manifest, ckpt = embedded
        site = trainer.embed_dataset(ckpt, manifest, channel_set=None)
        assert len(site.cls.keys) == 54

    def test_wrong_channel_set_rejected(self, embedded):
        manifest, ckpt = embedded
        with pytest.raises(ValidationError):
            trainer.embed_dataset(ckpt, manifest, channel_set="brightfield")

    def test_training_improves_centered_intra_well_consistency(
        self, small_dataset, tmp_path
    ):
        # Discriminative analog of cross-site consistency: after training,
        # sites of one well should agree more (relative to the global mean)
        # than at initialization.
        _, manifest = small_dataset
        cfg = tiny_config(tmp_path / "long", epochs=6, warmup_epochs=1)
        ckpt = trainer.train(manifest, cfg)

        init = encoder.init_params(cfg.encoder, cfg.seed)
        tensors = {f"teacher.{k}": v for k, v in init.tensors.items()}
        tensors.update({f"student.{k}": v for k, v in init.tensors.items()})
        encoder.save_checkpoint(
            tmp_path / "init.cpck", tensors, cfg.encoder, 0,
            extra={"channel_set": "fluorescent"},
        )

        def centered_consistency(checkpoint):
            site = trainer.embed_dataset(checkpoint, manifest)
            vecs = site.cls.vectors - site.cls.vectors.mean(axis=0)
            table = dataio.EmbeddingTable(keys=site.cls.keys, vectors=vecs, level="site")
            return evaluate.intra_well_consistency(table)

        assert centered_consistency(ckpt) > centered_consistency(tmp_path / "init.cpck")

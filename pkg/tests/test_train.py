import json
import math

import numpy as np
import pytest

from binsep import metrics
from binsep.autodiff import Parameter, load_parameters
from binsep.model import SeparationModel, micro_config
from binsep.scene import DatasetConfig, render_dataset_scene, synth_dataset
from binsep.train import (
    Adam, SceneData, TrainConfig, TrainingDiverged, clip_gradients, evaluate, global_grad_norm,
    load_checkpoint, load_scenes, save_checkpoint, train, validation_loss,
)


def make_scenes(n, duration=0.1, seed=0):
    cfg = DatasetConfig(duration_s=duration, seed=seed, min_separation_deg=30.0)
    out = []
    for i in range(n):
        scene, meta = render_dataset_scene(cfg, i)
        out.append(SceneData(f"s{i:03d}", scene.mixture.data.copy(),
                             np.stack([t.data for t in scene.targets]), meta["azimuths_deg"]))
    return out


@pytest.fixture(scope="module")
def scenes():
    return make_scenes(6)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(objective="l1")
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epoch": 3})


class TestOptimizer:
    def test_adam_first_step(self):
        p = Parameter("w", np.array([1.0, -2.0]))
        p.grad = np.array([0.5, -4.0])
        Adam([p], lr=0.1).step()
        # bias-corrected first step moves each entry by lr * sign(grad)
        assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_clip(self):
        rng = np.random.default_rng(0)
        ps = [Parameter(f"p{i}", np.zeros(5)) for i in range(3)]
        for p in ps:
            p.grad = rng.standard_normal(5) * 10
        before = clip_gradients(ps, 5.0)
        assert before > 5.0
        assert global_grad_norm(ps) <= 5.0 + 1e-9

    def test_clip_noop_below_threshold(self):
        p = Parameter("p", np.zeros(2))
        p.grad = np.array([0.3, 0.4])
        clip_gradients([p], 5.0)
        assert np.array_equal(p.grad, [0.3, 0.4])


class TestTrain:
    def test_zero_epochs(self, scenes):
        m = SeparationModel(micro_config(), seed=0)
        init = m.state_dict()
        res = train(m, scenes[:4], scenes[4:], TrainConfig(epochs=0))
        assert res.history == []
        assert all(np.array_equal(v, m.state_dict()[k]) for k, v in init.items())
        assert res.best_valid_loss == pytest.approx(validation_loss(m, scenes[4:]))

    def test_overfit_single_scene(self):
        scene = make_scenes(1, duration=0.1, seed=3)
        m = SeparationModel(micro_config(), seed=0)
        cfg = TrainConfig(epochs=200, batch_size=1, segment_seconds=1.0, learning_rate=3e-3, lr_patience=1000)
        before = validation_loss(m, scene)
        res = train(m, scene, scene, cfg)
        assert before - res.best_valid_loss >= 10.0

    def test_determinism(self, scenes):
        runs = []
        for _ in range(2):
            m = SeparationModel(micro_config(), seed=1)
            res = train(m, scenes[:4], scenes[4:], TrainConfig(epochs=2, batch_size=2, segment_seconds=0.05, seed=7))
            runs.append((m.state_dict(), res.train_losses))
        assert runs[0][1] == runs[1][1]
        for k, v in runs[0][0].items():
            assert np.array_equal(v, runs[1][0][k])

    def test_speaker_count_mismatch(self, scenes):
        m = SeparationModel(micro_config(num_speakers=3))
        with pytest.raises(ValueError):
            train(m, scenes[:2], scenes[2:3], TrainConfig(epochs=1))

    def test_diverged(self, scenes, tmp_path):
        m = SeparationModel(micro_config())
        m["decoder.bias"].data[:] = np.inf
        with pytest.raises(TrainingDiverged, match="epoch1_batch0"):
            train(m, scenes[:2], scenes[2:3], TrainConfig(epochs=1), out_dir=tmp_path)
        assert list(tmp_path.glob("diverged_*.npz"))

    def test_outputs_written(self, scenes, tmp_path):
        m = SeparationModel(micro_config())
        train(m, scenes[:2], scenes[2:3], TrainConfig(epochs=2, segment_seconds=0.05), out_dir=tmp_path)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "epoch002.ckpt").exists()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = SeparationModel(micro_config("parallel_sum"), seed=2)
        opt = Adam(m.parameters())
        for p in m.parameters():
            p.grad = np.ones_like(p.data)
        opt.step()
        save_checkpoint(tmp_path / "c.ckpt", m, opt, epoch=3, train_config=TrainConfig())
        back, meta, adam = load_checkpoint(tmp_path / "c.ckpt")
        assert meta["epoch"] == 3 and meta["optimizer"]["step"] == 1
        for k, v in m.state_dict().items():
            assert np.max(np.abs(back.state_dict()[k] - v)) <= 1e-9
        assert np.array_equal(adam["adam.m/decoder.bias"], opt.m["decoder.bias"])

    def test_bare_model_file(self, tmp_path):
        m = SeparationModel(micro_config())
        m.save(tmp_path / "m.bin")
        back, _, adam = load_checkpoint(tmp_path / "m.bin")
        assert adam == {} and back.config == m.config
        arrays, _ = load_parameters(tmp_path / "m.bin")
        assert set(arrays) == set(m.params)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("eval")
    synth_dataset(DatasetConfig(duration_s=0.5, seed=4), 4, d)
    return d


class TestEvaluate:
    def test_oracle_bypass(self, manifest):
        rep = evaluate(None, manifest, bypass="oracle")
        assert all(u.capped for u in rep.per_utterance)
        assert all(u.itd_error_us == 0.0 and u.ild_error_db == 0.0 for u in rep.per_utterance)
        assert rep.aggregates["mean_snri"] > 30.0

    def test_mixture_bypass(self, manifest):
        rep = evaluate(None, manifest, bypass="mixture")
        assert all(abs(u.snri_db) <= 1e-9 for u in rep.per_utterance)

    def test_model_eval_rows(self, manifest):
        m = SeparationModel(micro_config(), seed=0)
        rep = evaluate(m, manifest)
        assert len(rep.per_utterance) == 8
        assert all(math.isfinite(u.snri_db) for u in rep.per_utterance)
        assert rep.settings["trim_fraction"] == 0.05

    def test_needs_model(self, manifest):
        with pytest.raises(ValueError):
            evaluate(None, manifest)
        with pytest.raises(ValueError):
            evaluate(None, manifest, bypass="magic")

    def test_determinism(self, manifest):
        m = SeparationModel(micro_config(), seed=0)
        a, b = evaluate(m, manifest), evaluate(m, manifest)
        assert a.aggregates == b.aggregates

    def test_load_scenes(self, manifest):
        s = load_scenes(manifest)
        assert len(s) == 4 and s[0].targets.shape[:2] == (2, 2)
        assert s[0].mixture.shape == (2, s[0].targets.shape[-1])

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from depthnerf.errors import DivergenceDetected
from depthnerf.field import init_params
from depthnerf.objective import ObjectiveConfig
from depthnerf.params import load_checkpoint, save_checkpoint
from depthnerf.sampling import SamplingConfig, ray_rng
from depthnerf.scene import preset_scene
from depthnerf.training import Adam, RunConfig, TrainConfig, Trainer, prepare_scene, run_training, view_rays


@pytest.fixture(scope="module")
def small_data():
    scene = preset_scene("two-spheres", 16, 16)
    return prepare_scene(scene, 0.0, 0, SamplingConfig(n_cand=200, n_shortlist=10, n_gauss=6), n_train_views=2)


def _cfg(**kw):
    base = dict(
        iterations=3,
        lr=1e-3,
        batch=2,
        patch=4,
        n_train_views=2,
        checkpoint_every=1,
        dtype="float64",
        objective=ObjectiveConfig(patch_size=4, ab_downsample_k=2),
    )
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_matches_closed_form_on_quadratic(self):
        a = np.array([1.0, 10.0])
        theta = np.array([1.0, -2.0])
        opt = Adam(2, lr=0.1)
        m = np.zeros(2)
        v = np.zeros(2)
        ref = theta.copy()
        for t in range(1, 6):
            g = a * theta
            opt.step(theta, g)
            gr = a * ref
            m = 0.9 * m + 0.1 * gr
            v = 0.999 * v + 0.001 * gr**2
            ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert np.max(np.abs(theta - ref)) < 1e-12

    def test_first_step_is_lr_times_sign(self):
        theta = np.array([0.5, -0.5, 2.0])
        Adam(3, lr=0.01).step(theta, np.array([3.0, -0.2, 1e3]))
        np.testing.assert_allclose(theta, [0.49, -0.49, 1.99], rtol=1e-6)


class TestTrainer:
    def test_iteration_zero_loss_matches_offline(self, small_data, tiny_field_cfg, tmp_path):
        cfg = _cfg(iterations=1)
        init = init_params(tiny_field_cfg, cfg.seed)
        save_checkpoint(tmp_path / "init.ckpt", init)
        result = run_training(small_data, tiny_field_cfg, cfg)
        offline = Trainer(small_data, tiny_field_cfg, cfg, load_checkpoint(tmp_path / "init.ckpt", tiny_field_cfg.shapes()))
        loss, _, _ = offline.batch_loss(offline.params, offline.sample_batch(ray_rng(cfg.seed, 3)))
        assert result.losses[0] == loss

    def test_gradient_matches_finite_differences(self, small_data, tiny_field_cfg, rng):
        cfg = _cfg(objective=ObjectiveConfig(w_ab=0.0, patch_size=4, ab_downsample_k=2))
        tr = Trainer(small_data, tiny_field_cfg, cfg)
        tr.params.vector[:] += rng.normal(scale=0.05, size=len(tr.params))
        batch = tr.sample_batch(np.random.default_rng(3))
        dcolor = rng.normal(size=(batch["ts"].shape[0], 3))

        def f(params):
            color, _ = tr.forward(params, batch["origins"], batch["dirs"], batch["ts"], batch["far"])
            return float(np.sum(color * dcolor))

        _, state = tr.forward(tr.params, batch["origins"], batch["dirs"], batch["ts"], batch["far"])
        grads = tr.backward(dcolor, state)
        h = 1e-6
        for name in tr.params.names():
            flat = grads[name].ravel()
            for k in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                p = tr.params.copy()
                p[name].ravel()[k] += h
                lp = f(p)
                p[name].ravel()[k] -= 2 * h
                fd = (lp - f(p)) / (2 * h)
                assert abs(fd - flat[k]) <= 1e-4 * abs(fd) + 1e-8, (name, fd, flat[k])

    def test_single_ray_overfit(self, small_data, tiny_field_cfg):
        cfg = _cfg(
            iterations=500, lr=1e-2, lr_final=1e-4, batch=1, patch=1,
            objective=ObjectiveConfig(patch_size=1, ab_downsample_k=1),
        )
        tr = Trainer(small_data, tiny_field_cfg, cfg)
        view = small_data.train_targets[0]
        origins, dirs = view_rays(view)
        row = 8 * 16 + 8
        batch = {
            "origins": origins[row : row + 1],
            "dirs": dirs[row : row + 1],
            "ts": small_data.sample_ts("train", 0)[row : row + 1],
            "far": np.array([small_data.scene.near_far(view)[1]]),
            "target": np.array([[[[0.1, 0.7, 0.3]]]]),
        }
        losses = [tr.step(None, batch) for _ in range(500)]
        loss, _, _ = tr.batch_loss(tr.params, batch)
        assert losses[0] > 0.1 and loss < 1e-3

    def test_learning_rate_schedule(self, small_data, tiny_field_cfg):
        tr = Trainer(small_data, tiny_field_cfg, _cfg(iterations=11, lr=1e-2, lr_final=1e-4))
        assert tr.learning_rate(0) == 1e-2
        np.testing.assert_allclose(tr.learning_rate(5), 1e-3, rtol=1e-12)
        np.testing.assert_allclose(tr.learning_rate(10), 1e-4, rtol=1e-12)
        assert Trainer(small_data, tiny_field_cfg, _cfg()).learning_rate(2) == 1e-3

    def test_divergence_keeps_last_good_checkpoint(self, small_data, tiny_field_cfg, tmp_path, monkeypatch):
        real = Trainer.loss_and_grad

        def flaky(self, params, batch):
            loss, grads = real(self, params, batch)
            return (math.nan if self.iteration == 2 else loss), grads

        monkeypatch.setattr(Trainer, "loss_and_grad", flaky)
        with pytest.raises(DivergenceDetected) as info:
            run_training(small_data, tiny_field_cfg, _cfg(iterations=5), tmp_path, "bad")
        assert info.value.iteration == 2
        assert info.value.checkpoint_path == tmp_path / "bad.ckpt"
        saved = load_checkpoint(info.value.checkpoint_path, tiny_field_cfg.shapes())
        assert np.all(np.isfinite(saved.vector))

    def test_outputs_and_determinism(self, small_data, tiny_field_cfg, tmp_path):
        cfg = _cfg(eval_every=2)
        a = run_training(small_data, tiny_field_cfg, cfg, tmp_path / "a", "r")
        b = run_training(small_data, tiny_field_cfg, cfg, tmp_path / "b", "r")
        for name in ("r.ckpt", "r_loss.csv", "r_metrics.csv", "r.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        with open(tmp_path / "a" / "r_metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["run_id", "iter", "L1", "L2", "PSNR", "SSIM"]
        assert [r[1] for r in rows[1:]] == ["2", "3"]
        assert len(a.losses) == 3 and a.losses == b.losses

    def test_run_config_round_trip(self, small_data, tiny_field_cfg, tmp_path):
        cfg = _cfg(lr_final=1e-5)
        run = RunConfig("sphere 0 0 0 1\n", tiny_field_cfg, cfg, SamplingConfig(n_cand=300), 0.002, 9)
        run.save(tmp_path / "r.json")
        assert RunConfig.load(tmp_path / "r.json") == run

    def test_float32_training_runs(self, small_data, tiny_field_cfg):
        tr = Trainer(small_data, tiny_field_cfg, replace(_cfg(), dtype="float32"))
        loss = tr.step(np.random.default_rng(0))
        assert tr.params.vector.dtype == np.float32 and math.isfinite(loss)

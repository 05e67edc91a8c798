from __future__ import annotations

import csv
import dataclasses

import numpy as np
import pytest

from sata import autodiff as ad
from sata.autodiff import Tensor
from sata.data import Dataset, make_synthetic
from sata.errors import CheckpointError, ConfigError, NonFiniteError
from sata.harness import (
    ATTN_COLUMNS,
    REFERENCE_S_VALUES,
    REFERENCE_T_VALUES,
    REFERENCE_LR2,
    RunConfig,
    Trainer,
    dump_config,
    evaluate,
    export_attention_report,
    grid_search,
    load_config,
    parse_config_text,
    read_grid_csv,
    train,
)
from sata.optim import AdamW, ParamGroup, cosine_factor
from sata.suppression import SataConfig
from sata.vit import ModelState, ViTConfig


class TestDefaults:
    def test_reference_settings(self):
        cfg = RunConfig()
        assert (cfg.lr1, cfg.s, cfg.t) == (0.003, 0.5, 0.1)
        assert cfg.s_learnable and cfg.sata_mode == "relative"
        assert cfg.schedule == "constant" and cfg.batch_size == 128 and cfg.epochs == 100

    def test_grid_lists(self):
        assert list(REFERENCE_S_VALUES) == [1, 0.75, 0.5, 0.25, 0.1, 0]
        assert list(REFERENCE_T_VALUES) == [0.1, 0.05, 0.025, 0.01, 0]

    def test_per_dataset_scale_rates(self):
        assert REFERENCE_LR2 == {"cifar100": 7e-5, "tiny-imagenet": 1e-3}

    def test_default_model_matches_vit_defaults(self):
        vit = RunConfig().vit_config(100)
        assert (vit.depth, vit.embed_dim, vit.num_heads, vit.num_tokens) == (9, 192, 12, 65)
        assert vit.sata == SataConfig()

    def test_sata_off(self):
        assert RunConfig(sata=False).sata_config() is None

    @pytest.mark.parametrize("kw", [{"lr1": -1.0}, {"lr2": -1e-3}, {"batch_size": 0}, {"schedule": "step"}])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)


class TestConfigFiles:
    def test_parse(self):
        text = """
        # comment line
        depth = 3          # trailing comment
        sata = off
        lr2 = 7e-5
        classes = 0, 5, 9
        s-values = [1, 0.5]
        dataset = cifar100
        """
        vals = parse_config_text(text)
        assert vals == {
            "depth": 3,
            "sata": False,
            "lr2": 7e-5,
            "classes": [0, 5, 9],
            "s_values": [1.0, 0.5],
            "dataset": "cifar100",
        }

    @pytest.mark.parametrize("text", ["depht = 3", "depth 3", "depth = three", "sata = maybe"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_dump_then_load_round_trips(self, tmp_path):
        cfg = RunConfig(depth=2, t=0.075, s=0.0, classes=[3, 1], norm_mean=[0.1, 0.2, 0.3], sata=False)
        path = tmp_path / "cfg.txt"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("t = 0.05\nseed = 3\n")
        cfg = load_config(path, t=0.2, seed=None)
        assert cfg.t == 0.2 and cfg.seed == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.txt")


class TestAdamW:
    def test_matches_reference_update(self, rng):
        p = Tensor(rng.normal(size=4), requires_grad=True)
        start = p.data.copy()
        opt = AdamW([ParamGroup("g", [p], lr=0.1, weight_decay=0.01)], betas=(0.9, 0.99), eps=1e-8)
        grads = [rng.normal(size=4) for _ in range(3)]
        m = v = np.zeros(4)
        ref = start.copy()
        for t, g in enumerate(grads, 1):
            p.grad = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            ref = ref * (1 - 0.1 * 0.01)
            ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-14)

    def test_zero_lr_group_is_frozen(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        a0, b0 = a.data.copy(), b.data.copy()
        opt = AdamW([ParamGroup("a", [a], 0.0, 0.1), ParamGroup("b", [b], 0.01)])
        a.grad, b.grad = np.ones(3), np.ones(3)
        opt.step()
        assert np.array_equal(a.data, a0) and not np.array_equal(b.data, b0)

    def test_clamp(self):
        s = Tensor(0.001, requires_grad=True)
        opt = AdamW([ParamGroup("scale", [s], 0.1, clamp_min=0.0)])
        s.grad = np.array(1.0)
        opt.step()
        assert s.data == 0.0

    def test_non_finite_gradient(self):
        p = Tensor([1.0], requires_grad=True)
        p.name = "w"
        opt = AdamW([ParamGroup("g", [p], 0.1)])
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError, match="w"):
            opt.step()

    def test_negative_lr(self):
        with pytest.raises(ConfigError):
            ParamGroup("g", [], -0.1)

    def test_cosine_factor(self):
        assert cosine_factor(0, 10) == 1.0 and cosine_factor(10, 10) == pytest.approx(0.0)
        assert cosine_factor(5, 10) == pytest.approx(0.5)


class TestTrainer:
    def test_parameter_groups(self, tiny_config):
        tr = Trainer(tiny_config, 2)
        groups = {g.name: g for g in tr.optimizer.groups}
        assert {p.name for p in groups["scale"].params} == {"blocks.0.attn.sata_scale", "blocks.1.attn.sata_scale"}
        assert groups["scale"].lr == tiny_config.lr2 and groups["scale"].weight_decay == 0.0
        assert "head.bias" in {p.name for p in groups["no_decay"].params}
        assert "pos_embed" in {p.name for p in groups["no_decay"].params}
        assert "blocks.1.mlp.fc1.weight" in {p.name for p in groups["decay"].params}
        total = sum(len(g.params) for g in groups.values())
        assert total == len(tr.model.parameters())

    def test_micro_batches_match_full_batch(self, tiny_config, rng):
        x = rng.normal(size=(12, 3, 8, 8))
        y = rng.integers(0, 2, size=12)
        cfg = tiny_config.with_(init_std=0.2, t=0.3)
        whole = Trainer(cfg.with_(micro_batch=0), 2)
        parts = Trainer(cfg.with_(micro_batch=5), 2)
        lw, cw = whole.step(x, y)
        lp, cp = parts.step(x, y)
        assert lw == pytest.approx(lp, abs=1e-13) and cw == cp
        for a, b in zip(whole.model.parameters(), parts.model.parameters()):
            assert np.allclose(a.data, b.data, rtol=0, atol=1e-12)

    def test_scale_receives_gradient_after_one_step(self, tiny_config, rng):
        cfg = tiny_config.with_(init_std=0.3, t=0.3, lr1=0.0, lr2=0.01)
        tr = Trainer(cfg, 2)
        tr.step(rng.normal(size=(8, 3, 8, 8)), rng.integers(0, 2, size=8))
        assert any(v != 0.5 for v in tr.model.s_values())


class TestTrain:
    def test_zero_epochs(self, tiny_config, synthetic_split):
        cfg = tiny_config.with_(epochs=0)
        rep = train(cfg, *synthetic_split)
        assert rep.epochs == [] and rep.s_trajectory == [] and rep.step_losses == []
        init = ModelState.initialize(cfg.vit_config(2), cfg.seed)
        for a, b in zip(rep.model.parameters(), init.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_deterministic(self, tiny_config, synthetic_split):
        a = train(tiny_config.with_(epochs=2), *synthetic_split)
        b = train(tiny_config.with_(epochs=2), *synthetic_split)
        assert a.step_losses == b.step_losses
        for p, q in zip(a.model.parameters(), b.model.parameters()):
            assert np.array_equal(p.data, q.data)

    def test_frozen_weights_with_zero_lr1(self, tiny_config, synthetic_split):
        cfg = tiny_config.with_(epochs=1, lr1=0.0, lr2=0.01, init_std=0.3, t=0.3)
        rep = train(cfg, *synthetic_split)
        init = ModelState.initialize(cfg.vit_config(2), cfg.seed)
        for (name, a), b in zip(rep.model.named_parameters().items(), init.parameters()):
            if not name.endswith("sata_scale"):
                assert np.array_equal(a.data, b.data), name
        assert any(v != 0.5 for v in rep.model.s_values())

    def test_writes_outputs(self, tiny_config, synthetic_split, tmp_path):
        cfg = tiny_config.with_(epochs=2, out=str(tmp_path / "run"))
        rep = train(cfg, *synthetic_split)
        out = tmp_path / "run"
        assert rep.checkpoint == out / "checkpoint.npz"
        with open(out / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert float(rows[0]["lr2"]) == cfg.lr2
        with open(out / "s_trajectory.csv") as fh:
            traj = list(csv.reader(fh))
        assert traj[0] == ["epoch", "layer0", "layer1"] and len(traj) == 3
        saved = load_config(out / "config.txt")
        assert len(saved.norm_mean) == 3
        assert saved == dataclasses.replace(cfg, norm_mean=saved.norm_mean, norm_std=saved.norm_std)

    def test_augmentation_runs(self, tiny_config, synthetic_split):
        rep = train(tiny_config.with_(augment=True, epochs=1), *synthetic_split)
        assert len(rep.step_losses) == 3

    def test_cosine_schedule_runs(self, tiny_config, synthetic_split):
        rep = train(tiny_config.with_(schedule="cosine", epochs=1), *synthetic_split)
        assert all(np.isfinite(rep.step_losses))

    def test_image_size_mismatch(self, tiny_config, synthetic_split):
        with pytest.raises(ConfigError):
            train(tiny_config.with_(image_size=16, patch_size=4), *synthetic_split)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_culprit(self, tiny_config, synthetic_split):
        cfg = tiny_config.with_(lr1=1e306, weight_decay=0.0, epochs=3)
        with pytest.raises(NonFiniteError, match="first non-finite tensor"):
            train(cfg, *synthetic_split)


class TestEvaluate:
    def test_labels_from_model_score_perfectly(self, tiny_config, synthetic_split):
        tr, _ = synthetic_split
        model = ModelState.initialize(tiny_config.with_(init_std=0.3).vit_config(2), 0)
        with ad.no_grad():
            pred = model(tr.normalized()).data.argmax(axis=1)
        oracle = dataclasses.replace(tr, labels=pred)
        assert evaluate(model, oracle) == 1.0

    def test_untrained_is_chance(self, tiny_config):
        ds = make_synthetic(400, 4, image_size=8, seed=3)
        model = ModelState.initialize(tiny_config.vit_config(4), 0)
        assert abs(evaluate(model, ds) - 0.25) <= 0.05

    def test_saved_checkpoint_round_trip(self, tiny_config, synthetic_split, tmp_path):
        rep = train(tiny_config.with_(epochs=2, out=str(tmp_path)), *synthetic_split)
        _, va = synthetic_split
        assert evaluate(rep.checkpoint, va) == evaluate(rep.model, va)

    def test_geometry_mismatch(self, tiny_config):
        model = ModelState.initialize(tiny_config.vit_config(2), 0)
        with pytest.raises(CheckpointError):
            evaluate(model, make_synthetic(4, 2, image_size=16))

    def test_class_mismatch(self, tiny_config):
        model = ModelState.initialize(tiny_config.vit_config(2), 0)
        with pytest.raises(CheckpointError):
            evaluate(model, make_synthetic(6, 3, image_size=8))

    def test_missing_checkpoint(self, tmp_path, synthetic_split):
        with pytest.raises(CheckpointError):
            evaluate(tmp_path / "none.npz", synthetic_split[1])


class TestGrid:
    def test_shape_and_baseline(self, tiny_config, synthetic_split, tmp_path):
        cfg = tiny_config.with_(epochs=1, out=str(tmp_path))
        res = grid_search(cfg, [1.0, 0.0], [0.3, 0.0], *synthetic_split)
        s, t, acc, base = read_grid_csv(res.path)
        assert s == [1.0, 0.0] and t == [0.3, 0.0] and acc.shape == (2, 2)
        assert base == res.baseline
        assert np.array_equal(acc[1], [base, base])
        assert res.cell_losses[(0.0, 1.0)] == res.baseline_losses

    def test_single_cell(self, tiny_config, synthetic_split):
        res = grid_search(tiny_config.with_(epochs=1), [0.0], [0.075], *synthetic_split)
        assert res.accuracy.shape == (1, 1) and not res.errors

    def test_failed_cell_is_recorded(self, tiny_config, synthetic_split, tmp_path, monkeypatch):
        import sata.harness as harness

        real = harness.train

        def flaky(config, *a, **kw):
            if config.sata and config.s == 0.5:
                raise NonFiniteError("boom")
            return real(config, *a, **kw)

        monkeypatch.setattr(harness, "train", flaky)
        res = grid_search(tiny_config.with_(epochs=1, out=str(tmp_path)), [1.0, 0.5], [0.1], *synthetic_split)
        assert np.isnan(res.accuracy[0, 1]) and np.isfinite(res.accuracy[0, 0])
        assert "numeric" in res.errors[(0.1, 0.5)]
        assert (tmp_path / "grid_errors.csv").exists()

    def test_empty_lists(self, tiny_config, synthetic_split):
        with pytest.raises(ConfigError):
            grid_search(tiny_config, [], [0.1], *synthetic_split)

    def test_parallel_matches_serial(self, tiny_config, synthetic_split):
        cfg = tiny_config.with_(epochs=1)
        serial = grid_search(cfg, [1.0, 0.25], [0.2], *synthetic_split)
        parallel = grid_search(cfg, [1.0, 0.25], [0.2], *synthetic_split, jobs=2)
        assert np.array_equal(serial.accuracy, parallel.accuracy)
        assert serial.cell_losses == parallel.cell_losses


@pytest.fixture(scope="module")
def report_model():
    cfg = ViTConfig(image_size=32, patch_size=4, embed_dim=16, depth=2, num_heads=2, num_classes=3,
                    init_std=0.3, sata=SataConfig(t=0.3))
    return ModelState.initialize(cfg, 1)


class TestAttentionReport:
    def test_rows_per_head(self, report_model, tmp_path):
        batch = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
        rep = export_attention_report(report_model, batch, 0.05, 0.01, tmp_path)
        assert len(rep.files) == 2 * 2 * 2
        with open(tmp_path / "attn_layer1_head0.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ATTN_COLUMNS and len(rows) == 1 + 2 * 65
        single = export_attention_report(report_model, batch[0], 0.05, 0.01)
        assert len(single.rows[(0, 0)]["row"]) == 65

    def test_zero_threshold_has_no_trivial_weights(self, report_model):
        batch = np.random.default_rng(1).normal(size=(1, 3, 32, 32))
        rep = export_attention_report(report_model, batch, 0.0, 0.01)
        assert all(not np.any(r["trivial_count"]) for r in rep.rows.values())

    def test_bound_and_histogram(self, report_model):
        batch = np.random.default_rng(2).normal(size=(2, 3, 32, 32))
        rep = export_attention_report(report_model, batch, 0.02, 0.01)
        assert rep.bound_ok
        for r in rep.rows.values():
            assert np.all(r["suppress_mass_after"] <= r["scale"] * r["max_weight"] + 1e-12)
            assert np.allclose(r["trivial_mass"], r["hist_mass_below"], rtol=0, atol=1e-9)

    def test_model_without_suppression(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2, num_classes=2,
                        init_std=0.5, sata=None)
        rep = export_attention_report(ModelState.initialize(cfg, 0), np.ones((1, 3, 8, 8)), 0.1, 0.05)
        r = rep.rows[(0, 0)]
        assert np.array_equal(r["suppress_count"], r["trivial_count"]) and np.all(r["scale"] == 1.0)


def test_dataset_type_used_by_grid_and_train():
    assert issubclass(type(make_synthetic(4, 2)), Dataset)

import json

import numpy as np
import pytest

from cttnet.config import ConfigError, PROFILES, config_from_dict, load_config, micro_profile, full_profile
from cttnet.ctt import load_checkpoint
from cttnet.data import AugmentationPolicy, generate_synthetic
from cttnet.tensor import Tensor
from cttnet.train import (
    NumericError,
    REFERENCE_ROWS,
    VARIANTS,
    aggregate,
    batch_stream,
    lr_at,
    run_comparison,
    run_cross_validation,
    run_training,
    sgd_step,
    split_validation,
    train_model,
)


@pytest.fixture
def micro():
    return micro_profile().replace(optim__iterations=6, optim__eval_interval=3)


@pytest.fixture
def tiny_data():
    return generate_synthetic(12, 0).dataset


class TestSgd:
    def param(self, value, grad):
        p = Tensor(np.array([value]))
        p.grad = np.array([grad])
        return p

    def test_plain_step(self):
        p = self.param(0.0, 1.0)
        sgd_step({"p": p}, {}, lr=0.1, momentum=0.0)
        assert p.data[0] == pytest.approx(-0.1)

    def test_momentum_two_steps(self):
        p = self.param(0.0, 1.0)
        state = {}
        sgd_step({"p": p}, state, lr=1.0, momentum=0.9)
        sgd_step({"p": p}, state, lr=1.0, momentum=0.9)
        assert p.data[0] == pytest.approx(-2.9)
        assert state["p"][0] == pytest.approx(1.9)

    def test_zero_grad(self):
        p = self.param(0.7, 0.0)
        sgd_step({"p": p}, {}, lr=0.5, momentum=0.9)
        assert p.data[0] == 0.7

    def test_missing_grad(self):
        with pytest.raises(ValueError, match="q"):
            sgd_step({"q": Tensor([1.0])}, {}, 0.1, 0.9)


class TestSchedule:
    @pytest.mark.parametrize("it,lr", [(0, 1e-3), (999, 1e-3), (1000, 1e-4), (2500, 1e-5)])
    def test_step_schedule(self, it, lr):
        assert lr_at(it, 1e-3, 0.1, 1000) == pytest.approx(lr, rel=1e-12)

    def test_constant(self):
        assert {lr_at(i, 0.3, 1.0, 7) for i in range(50)} == {0.3}

    def test_non_increasing(self):
        lrs = [lr_at(i, 1e-2, 0.5, 3) for i in range(30)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_negative(self):
        with pytest.raises(ValueError):
            lr_at(-1, 1e-3, 0.1, 10)


class TestBatching:
    def test_epochs_cover_everything(self):
        stream = batch_stream(10, 4, 0)
        seen = np.concatenate([next(stream) for _ in range(5)])
        assert sorted(seen[:10]) == list(range(10))
        assert sorted(seen[10:20]) == list(range(10))

    def test_seeded(self):
        a, b = batch_stream(9, 4, 3), batch_stream(9, 4, 3)
        assert all(np.array_equal(next(a), next(b)) for _ in range(6))

    def test_validation_tail(self, tiny_data):
        train, val = split_validation(tiny_data, 0.1)
        assert len(val) == 1 and val.ids == tiny_data.ids[-1:]
        train, val = split_validation(tiny_data.subset(range(5)), 0.1)
        assert val is None and len(train) == 5


class TestTraining:
    def test_deterministic(self, micro, tiny_data, tmp_path):
        a = run_training(micro, tiny_data, tmp_path / "a")
        b = run_training(micro, tiny_data, tmp_path / "b")
        assert (tmp_path / "a/checkpoint.json").read_bytes() == (tmp_path / "b/checkpoint.json").read_bytes()
        assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
        assert a.history.data_hash == b.history.data_hash

    def test_outputs(self, micro, tiny_data, tmp_path):
        res = run_training(micro, tiny_data, tmp_path)
        header = (tmp_path / "history.csv").read_text().splitlines()[0]
        assert header == "iteration,l_reg,l_cls,l_tot,lr"
        assert [r["iteration"] for r in res.history.rows] == list(range(6))
        assert len(res.history.evals) == 2
        best = load_checkpoint(tmp_path / "best_checkpoint.json")
        assert best.params.keys() == res.model.params.keys()

    def test_lambda_zero_equals_acl_off(self, micro, tiny_data, tmp_path):
        a = run_training(micro.replace(loss__lam=0.0), tiny_data, tmp_path / "a")
        b = run_training(micro.replace(loss__acl_enabled=False), tiny_data, tmp_path / "b")
        assert a.history.rows == b.history.rows
        assert (tmp_path / "a/checkpoint.json").read_bytes() == (tmp_path / "b/checkpoint.json").read_bytes()

    def test_acl_changes_dynamics(self, micro, tiny_data):
        a = train_model(micro, tiny_data)
        b = train_model(micro.replace(loss__acl_enabled=False), tiny_data)
        assert [r["l_tot"] for r in a.history.rows] != [r["l_tot"] for r in b.history.rows]

    def test_augmentation_runs(self, micro, tiny_data):
        res = train_model(micro.replace(data__augmentation=AugmentationPolicy()), tiny_data)
        assert all(np.isfinite(r["l_tot"]) for r in res.history.rows)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self, micro, tiny_data):
        with pytest.raises(NumericError) as exc:
            train_model(micro.replace(optim__lr=1e6, optim__iterations=50), tiny_data)
        assert exc.value.iteration > 0

    def test_loss_decreases(self, tiny_data):
        cfg = micro_profile().replace(optim__iterations=60, optim__lr=3e-3, optim__decay_interval=1000, optim__batch_size=8)
        rows = train_model(cfg, tiny_data).history.rows
        assert np.mean([r["l_reg"] for r in rows[-10:]]) < np.mean([r["l_reg"] for r in rows[:10]])


class TestCrossValidation:
    def test_aggregate(self):
        folds = [{"mae": 0.1, "rmse": 0.2, "acc": 0.5, "f1": 0.4}, {"mae": 0.3, "rmse": 0.2, "acc": 1.0, "f1": 0.6}]
        s = aggregate(folds)
        assert s["mae"]["mean"] == pytest.approx(0.2) and s["mae"]["std"] == pytest.approx(0.1)
        assert s["rmse"]["std"] == 0.0
        assert s["acc"]["std"] == pytest.approx(0.25)

    def test_identical_folds_zero_std(self):
        s = aggregate([{"mae": 0.2, "rmse": 0.3, "acc": 0.9, "f1": 0.8}] * 5)
        assert all(v["std"] == 0.0 for v in s.values())

    def test_two_folds_on_four_samples(self, micro, tmp_path):
        ds = generate_synthetic(4, 0).dataset
        res = run_cross_validation(micro, ds, k=2, out_dir=tmp_path)
        assert len(res.folds) == 2
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["std_over"] == "folds"
        assert [f["n_test"] for f in doc["folds"]] == [2, 2]
        assert set(doc["summary"]) == {"mae", "rmse", "acc", "f1"}


class TestComparison:
    def test_rows_share_data(self, micro, tiny_data, tmp_path):
        res = run_comparison(micro, variants=["single_hor", "cta", "cta_pva_acl"], dataset=tiny_data, max_folds=1, out_dir=tmp_path)
        assert [r["name"] for r in res.rows] == ["single_hor", "cta", "cta_pva_acl"]
        hashes = {tuple(r["data_hashes"]) for r in res.rows}
        assert len(hashes) == 1
        row = res.row("cta")
        assert all(np.isfinite(row[k]["mean"]) for k in ("mae", "rmse", "acc", "f1"))
        table = (tmp_path / "comparison.txt").read_text()
        assert "0.144" in table and "0.874" in table
        assert json.loads((tmp_path / "comparison.json").read_text())["reference"]["cta_pva_acl"]["mae"] == [0.144, 0.012]

    def test_variant_flags(self):
        names = [v.name for v in VARIANTS]
        assert set(names) == set(REFERENCE_ROWS)
        by = {v.name: v for v in VARIANTS}
        assert not by["cta"].use_preop_va and by["cta_pva"].use_preop_va
        assert by["cta_pva_acl"].acl_enabled and not by["cta_pva"].acl_enabled


class TestConfig:
    def test_full_profile(self):
        cfg = full_profile()
        m, o = cfg.model, cfg.optim
        assert (m.dim, m.layers, m.cross_layer_start, m.heads) == (128, 12, 6, 4)
        assert (o.lr, o.momentum, o.decay, o.decay_interval, o.iterations, o.batch_size) == (1e-3, 0.9, 0.1, 1000, 3000, 16)
        assert cfg.loss.lam == 2.0 and cfg.loss.threshold == 0.2
        assert m.num_patches == 64

    def test_profiles_valid(self):
        for make in PROFILES.values():
            make()

    def test_overrides(self):
        cfg = config_from_dict({"profile": "micro", "model": {"fusion": "full_attention"}, "optim": {"lr": 0.5}, "seed": 3})
        assert cfg.model.fusion.value == "full_attention" and cfg.optim.lr == 0.5 and cfg.seed == 3
        assert cfg.model.dim == micro_profile().model.dim

    @pytest.mark.parametrize(
        "doc",
        [
            {"bogus": 1},
            {"model": {"bogus": 1}},
            {"profile": "huge"},
            {"model": {"heads": 3}},
            {"optim": {"lr": -1}},
            {"seed": "x"},
            {"data": {"augmentation": {"blur": 1}}},
            {"model": {"fusion": "early"}},
        ],
    )
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            config_from_dict(doc)

    def test_relative_paths(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"output_dir": "out", "data": {"manifest": "d/m.csv"}}))
        cfg = load_config(tmp_path / "c.json")
        assert cfg.output_dir == str(tmp_path / "out")
        assert cfg.data.manifest == str(tmp_path / "d/m.csv")

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

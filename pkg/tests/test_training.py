import numpy as np
import pytest

from ccnp_lab import tensor as T
from ccnp_lab.datagen import FunctionFamilySpec, make_meta_dataset
from ccnp_lab.model import ModelDims
from ccnp_lab.objectives import LossWeights
from ccnp_lab.training import (
    CurveRow,
    Optimizers,
    TrainConfig,
    TrainingError,
    build_model,
    frl_forward,
    read_curves,
    sample_episode,
    train_episode,
    train_run,
    write_curves,
)

SMALL = ModelDims(width=16, heads=4, z_dim=4)


@pytest.fixture(scope="module")
def dataset():
    return make_meta_dataset(FunctionFamilySpec("sinusoid"), 44, rng_seed=0)


def setup(dataset, **kw):
    cfg = TrainConfig(dims=SMALL, **kw)
    model = build_model(cfg)
    ep = sample_episode(dataset.train[:4], 5, 10, np.random.default_rng(0))
    return cfg, model, Optimizers.for_model(model, cfg), ep


def snapshot(model):
    return model.state_dict()


def changed(before, after):
    return {k for k in before if before[k].tobytes() != after[k].tobytes()}


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=1)
        TrainConfig(variant="CNP", batch_size=1)

    def test_dict_roundtrip(self):
        cfg = TrainConfig(variant="AttnCNP", weights=LossWeights(0.5, 0.1), schedule="combined", dims=SMALL)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_zero_weight_drops_branch(self):
        model = build_model(TrainConfig(weights=LossWeights(alpha=0.0), dims=SMALL))
        assert model.branches == ("C", "F")
        assert build_model(TrainConfig(disable_attn=True, dims=SMALL)).arch.attention is False


class TestGroupIsolation:
    def test_fcl_step_leaves_rho_p(self, dataset):
        cfg, model, opt, ep = setup(dataset)
        before = snapshot(model)
        train_episode(model, opt, ep, cfg, np.random.default_rng(0), only=["fcl"])
        diff = changed(before, snapshot(model))
        allowed = {n for n, _ in model.param_groups()["fcl"]}
        assert diff and diff <= allowed
        assert not any(k.startswith("heads.rho_P") for k in diff)

    @pytest.mark.parametrize("objective", ["tcl", "frl"])
    def test_each_step_touches_only_its_group(self, dataset, objective):
        cfg, model, opt, ep = setup(dataset)
        before = snapshot(model)
        train_episode(model, opt, ep, cfg, np.random.default_rng(0), only=[objective])
        diff = changed(before, snapshot(model))
        assert diff and diff <= {n for n, _ in model.param_groups()[objective]}

    def test_only_frl_when_contrast_disabled(self, dataset):
        cfg, model, opt, ep = setup(dataset, disable_tcl=True, disable_fcl=True)
        before = snapshot(model)
        rep = train_episode(model, opt, ep, cfg, np.random.default_rng(0))
        assert rep.tcl is None and rep.fcl is None
        assert changed(before, snapshot(model)) <= {n for n, _ in model.param_groups()["frl"]}

    def test_lr_zero_changes_nothing(self, dataset):
        for schedule in ("sequential", "combined"):
            cfg, model, opt, ep = setup(dataset, lr_frl=0.0, lr_tcl=0.0, lr_fcl=0.0, schedule=schedule)
            before = snapshot(model)
            rep = train_episode(model, opt, ep, cfg, np.random.default_rng(0))
            assert not changed(before, snapshot(model))
            assert np.isfinite([rep.frl, rep.tcl, rep.fcl]).all()

    def test_report_is_pre_step(self, dataset):
        cfg, model, opt, ep = setup(dataset, variant="CNP")
        pre = frl_forward(model, ep).item()
        rep = train_episode(model, opt, ep, cfg, np.random.default_rng(0))
        assert rep.frl == pre and rep.tcl is None and rep.fcl is None

    def test_sequential_frl_gradient_stays_in_c_branch(self, dataset):
        cfg, model, _, ep = setup(dataset)
        for p in model.parameters():
            p.grad = None
        T.backward(frl_forward(model, ep))
        for name, p in model.named_parameters():
            if name.startswith(("encoder.pair.T", "encoder.pair.F", "heads.")):
                assert p.grad is None, name


class TestFailures:
    def test_nan_names_objective(self, dataset):
        cfg, model, opt, ep = setup(dataset)
        model.heads.rho_F.weight.data[0, 0] = np.nan
        with pytest.raises(TrainingError, match="FCL"):
            train_episode(model, opt, ep, cfg, np.random.default_rng(0))

    def test_nan_in_decoder_names_frl(self, dataset):
        cfg, model, opt, ep = setup(dataset, variant="CNP")
        model.decoder.mu_head.bias.data[0] = np.inf
        with pytest.raises(TrainingError, match="FRL"):
            train_episode(model, opt, ep, cfg, np.random.default_rng(0))


class TestRuns:
    def test_deterministic(self, dataset, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=8, dims=SMALL, seed=3)
        train_run(cfg, dataset, tmp_path / "a")
        train_run(cfg, dataset, tmp_path / "b")
        assert (tmp_path / "a/curves.csv").read_bytes() == (tmp_path / "b/curves.csv").read_bytes()
        assert (tmp_path / "a/ckpt_final.bin").read_bytes() == (tmp_path / "b/ckpt_final.bin").read_bytes()

    def test_loss_decreases(self, dataset):
        cfg = TrainConfig(variant="CNP", epochs=6, batch_size=4, dims=SMALL)
        art = train_run(cfg, dataset)
        assert art.curves[-1].frl < art.curves[0].frl
        assert 1 <= art.best_epoch <= 6

    def test_combined_schedule_runs(self, dataset):
        art = train_run(TrainConfig(epochs=1, batch_size=4, dims=SMALL, schedule="combined"), dataset)
        row = art.curves[0]
        assert all(np.isfinite(v) for v in (row.frl, row.tcl, row.fcl, row.val_ll))

    def test_curves_roundtrip(self, tmp_path):
        rows = [CurveRow(1, 0.1 + 0.2, None, 1e-300, -3.5), CurveRow(2, 1 / 3, 2.0, None, 7.0)]
        write_curves(tmp_path / "c.csv", rows)
        assert read_curves(tmp_path / "c.csv") == rows


class TestAblationConsistency:
    def test_zero_weight_ccnp_matches_attncnp(self, dataset):
        reports = []
        for variant, w in (("CCNP", LossWeights(0.0, 0.0)), ("AttnCNP", LossWeights())):
            cfg = TrainConfig(variant=variant, weights=w, schedule="combined", dims=SMALL, seed=4)
            model = build_model(cfg)
            ep = sample_episode(dataset.train[:4], 5, 10, np.random.default_rng(0))
            reports.append(train_episode(model, Optimizers.for_model(model, cfg), ep, cfg, np.random.default_rng(0)))
        assert reports[0].frl == reports[1].frl
        assert reports[0].tcl is None and reports[0].fcl is None

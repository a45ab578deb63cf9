import json
import math

import numpy as np
import pytest

from hetgcn.metrics import evaluate
from hetgcn.model import HeteroGCN, ModelConfig, count_parameters, matched_width
from hetgcn.optim import load_checkpoint, save_checkpoint
from hetgcn.scenario import SyntheticSpec, generate_synthetic_scenario, normalize_scenario, transform_scenario
from hetgcn.training import (
    ConfigError,
    RunConfig,
    load_model,
    predict_scenarios,
    read_config_file,
    train,
)


def small_config(**kw):
    base = dict(d=8, n_modes=3, epochs=2, batch_size=2, seed=5)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def scenarios():
    layouts = ("straight", "t_intersection", "curve")
    return [generate_synthetic_scenario(i, SyntheticSpec(layouts[i % 3], 3)) for i in range(4)]


def test_zero_learning_rate_keeps_initial_parameters(tmp_path, scenarios):
    cfg = small_config(lr=0.0, epochs=1)
    train(scenarios[:1], cfg, tmp_path)
    values, _ = load_checkpoint(tmp_path / "checkpoint")
    initial = HeteroGCN(cfg.model(), seed=cfg.seed).params.snapshot()
    assert values.keys() == initial.keys()
    for k in values:
        np.testing.assert_array_equal(values[k], initial[k])


def test_training_reduces_loss(scenarios):
    result = train(scenarios, small_config(epochs=15, lr=3e-3))
    losses = [r["loss"] for r in result.history if "epoch" in r]
    assert losses[-1] < losses[0]
    assert result.history[-1]["final"] is True


def test_two_runs_byte_identical(tmp_path, scenarios):
    cfg = small_config()
    for name in ("a", "b"):
        train(scenarios, cfg, tmp_path / name)
    for f in ("checkpoint.bin", "checkpoint.json", "train_log.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_periodic_checkpoints(tmp_path, scenarios):
    train(scenarios[:2], small_config(epochs=3, save_every=2), tmp_path)
    assert (tmp_path / "checkpoint_epoch2.bin").exists()
    assert not (tmp_path / "checkpoint_epoch3.bin").exists()


def test_log_lines_are_json(tmp_path, scenarios):
    train(scenarios[:2], small_config(), tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [x.get("epoch") for x in lines[:2]] == [1, 2]
    assert set(lines[0]) == {"epoch", "loss", "goal", "reg", "score"}
    assert "train_metrics" in lines[-1]


def test_predict_round_trip_matches_logged_metrics(tmp_path, scenarios):
    cfg = small_config(epochs=3)
    result = train(scenarios, cfg, tmp_path)
    logged = result.history[-1]["train_metrics"]
    model, loaded_cfg = load_model(tmp_path / "checkpoint")
    assert loaded_cfg == cfg
    preds = predict_scenarios(model, loaded_cfg, scenarios)
    again = predict_scenarios(model, loaded_cfg, scenarios)
    for a, b in zip(preds, again):
        np.testing.assert_array_equal(a.trajectories, b.trajectories)
    gts = []
    for s in scenarios:
        n = normalize_scenario(s)
        gts.append(n.future(n.focal)[0])
    report = evaluate(preds, gts, (1, 3)).to_dict()
    for k in ("K=1", "K=3"):
        assert abs(report[k]["min_ade"] - logged[k]["min_ade"]) <= 1e-9


def test_zero_checkpoint_predicts_zeros(tmp_path, scenarios):
    cfg = small_config()
    model = HeteroGCN(cfg.model())
    model.params.zero_()
    save_checkpoint(tmp_path / "zero", model.params, cfg.to_dict())
    loaded, loaded_cfg = load_model(tmp_path / "zero")
    for p in predict_scenarios(loaded, loaded_cfg, scenarios[:2]):
        np.testing.assert_array_equal(p.trajectories, 0.0)
        np.testing.assert_allclose(p.probabilities, 1 / 3, rtol=0, atol=1e-15)


def test_prediction_invariant_to_rigid_motion(scenarios):
    cfg = small_config()
    model = HeteroGCN(cfg.model(), seed=2)
    moved = [transform_scenario(s, (-37.0, 12.5), 1.1) for s in scenarios]
    a = predict_scenarios(model, cfg, scenarios)
    b = predict_scenarios(model, cfg, moved)
    for pa, pb in zip(a, b):
        np.testing.assert_allclose(pa.trajectories, pb.trajectories, rtol=0, atol=1e-6)
        np.testing.assert_allclose(pa.probabilities, pb.probabilities, rtol=0, atol=1e-6)


def test_all_agents_loss_trains(scenarios):
    result = train(scenarios[:2], small_config(all_agents=True, epochs=1))
    assert math.isfinite(result.history[0]["loss"])


# ---------------------------------------------------------------- configuration


def test_history_mismatch_reported_before_training(scenarios):
    with pytest.raises(ConfigError, match="t_hist"):
        train(scenarios, small_config(tau=4, n_snapshots=4))


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        train([], small_config())


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(batch_size=0), dict(variant="nope"),
                                 dict(precision="float16"), dict(goal_weight=0, reg_weight=0, score_weight=0)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        small_config(**bad)


def test_config_from_strings(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nd = 16\nlr = 0.01  # inline\nall_agents = yes\nvariant = homo_static\n")
    cfg = RunConfig.from_dict(read_config_file(path))
    assert (cfg.d, cfg.lr, cfg.all_agents, cfg.variant) == (16, 0.01, True, "homo_static")
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"depth": "3"})
    with pytest.raises(ConfigError, match="d"):
        RunConfig.from_dict({"d": "wide"})
    path.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_matched_width_budget():
    base = ModelConfig(d=32, n_modes=3)
    target = count_parameters(base)
    d = matched_width(target, ModelConfig(d=32, n_modes=3, variant="homo_static"))
    got = count_parameters(ModelConfig(d=d, n_modes=3, variant="homo_static"))
    assert d > 32
    assert abs(got - target) / target < 0.05

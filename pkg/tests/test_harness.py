import dataclasses
import logging

import numpy as np
import pytest
from scipy import stats

from etadrive.errors import ConfigError
from etadrive.harness import (ABLATION_ROWS, Bucket, CollectionError, TrainConfig, TrainingDiverged,
                              WeightedSampler, assign_buckets, collect_dataset, evaluate_closed_loop,
                              evaluate_policy, load_checkpoint, load_dataset, lr_schedule,
                              rollout_expert, run_ablation_matrix, save_checkpoint, save_dataset,
                              train)
from etadrive.harness.data import decode_frames
from etadrive.models import DrivingModel, EncoderConfig, ModelConfig
from etadrive.plan import reconstruct_action
from etadrive.toyworld import (NPC, CameraModel, Episode, NPCScript, Pose, action_to_mask,
                               expert_policy, make_scenario, render_observation, scenario_suite)

TINY = ModelConfig(EncoderConfig(depth=3, dim=16, heads=2), forecast_depth=1, decoder_depth=1)


@pytest.fixture(scope="module")
def suite_dataset():
    return collect_dataset(scenario_suite())


# collection

def test_sample_count(suite_dataset):
    assert len(suite_dataset) == 50 * 95
    assert suite_dataset.frames_t.shape == (4750, 4, 32, 64)


def test_pairs_are_delta_apart(suite_dataset):
    for m in suite_dataset.meta:
        assert m["tick"] - m["prev_tick"] == 5
        assert m["sim_time"] - m["prev_sim_time"] == pytest.approx(0.5, abs=1e-9)


def test_masks_match_stored_actions(suite_dataset):
    cam = CameraModel()
    for i in range(len(suite_dataset)):
        assert np.array_equal(suite_dataset.masks[i], action_to_mask(reconstruct_action(suite_dataset.act_t[i]), cam))


def test_frames_rerender_bit_exactly(suite_dataset):
    for ep in [make_scenario("merge", 4), make_scenario("hard_brake", 7)]:
        states, _ = rollout_expert(ep, 100)
        rows = [i for i, m in enumerate(suite_dataset.meta) if m["episode"] == ep.episode_id]
        assert len(rows) == 95
        for i in rows:
            m = suite_dataset.meta[i]
            assert np.array_equal(decode_frames(suite_dataset.frames_t[i]), render_observation(states[m["tick"]]))
            assert np.array_equal(decode_frames(suite_dataset.frames_prev[i]),
                                  render_observation(states[m["prev_tick"]]))


def test_record_file_round_trip(tmp_path, small_dataset):
    path = tmp_path / "d.rec"
    save_dataset(path, small_dataset, {"config_hash": "abc"})
    back = load_dataset(path)
    assert back.header["config_hash"] == "abc" and back.header["count"] == len(small_dataset)
    for f in ("frames_t", "frames_prev", "cond_t", "cond_prev", "act_t", "act_prev", "masks"):
        assert np.array_equal(getattr(back, f), getattr(small_dataset, f))
    assert back.meta == small_dataset.meta


def test_expert_failure_aborts_collection():
    ep = make_scenario("hard_brake", 0, brake=False)
    wall = NPC(Pose(2.5, 0.0, 0.0, 0.0), NPCScript("cruise", 0.0))
    bad = Episode("hard_brake", 99, dataclasses.replace(ep.initial, npcs=(wall,)), 50)
    with pytest.raises(CollectionError, match="hard_brake-99"):
        collect_dataset([bad], ticks=20)


# buckets and sampling

def meta(**kw):
    base = {"speed": 6.0, "accel_cmd": 0.0, "steer_cmd": 0.0, "front_hazard": False,
            "rear_hazard": False, "side_hazard": False, "red_light_in_range": False, "kind": "hard_brake"}
    base.update(kw)
    return base


def test_bucket_examples():
    assert "accel_from_scratch" in assign_buckets(meta(speed=0.0, accel_cmd=3.0))
    assert "red_light" in assign_buckets(meta(speed=2.0, accel_cmd=-6.0, red_light_in_range=True))
    assert assign_buckets(meta()) == {"default"}
    assert assign_buckets(meta(accel_cmd=1.0)) == {"light_accel"}
    assert "steer_left" in assign_buckets(meta(steer_cmd=0.2))
    with pytest.raises(ValueError):
        Bucket("x", lambda m: True, 0.0)


def test_red_light_samples_land_in_bucket(suite_dataset):
    hits = [m for m in suite_dataset.meta if m["red_light_in_range"]]
    assert hits and all(m["kind"] == "red_light" for m in hits)


def test_sampler_frequencies_chi_square(suite_dataset):
    s = WeightedSampler(suite_dataset.meta, seed=3)
    counts = np.bincount(s.draw_buckets(100_000), minlength=len(s.names))
    _, p = stats.chisquare(counts, s.probs * 100_000)
    assert p > 0.01


def test_sampler_weight_two_twice_as_often():
    metas = [meta(kind="a")] * 50 + [meta(kind="b")] * 50
    buckets = [Bucket("a", lambda m: m["kind"] == "a", 1.0), Bucket("b", lambda m: m["kind"] == "b", 2.0)]
    s = WeightedSampler(metas, buckets, seed=0)
    n = 100_000
    hits = np.bincount(s.draw_buckets(n), minlength=2)[s.names.index("b")]
    sigma = np.sqrt(n * (2 / 3) * (1 / 3))
    assert abs(hits - n * 2 / 3) < 3 * sigma


def test_sampler_uniform_for_equal_weights():
    metas = [meta(kind=k) for k in "abcd" for _ in range(10)]
    buckets = [Bucket(k, lambda m, k=k: m["kind"] == k) for k in "abcd"]
    counts = np.bincount(WeightedSampler(metas, buckets, seed=1).draw_buckets(100_000), minlength=5)
    sigma = np.sqrt(100_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts[:4] - 25_000) < 3 * sigma)


def test_sampler_is_deterministic_and_drops_empty(caplog, small_dataset):
    with caplog.at_level(logging.WARNING):
        a = WeightedSampler(small_dataset.meta, seed=5)
    b = WeightedSampler(small_dataset.meta, seed=5)
    assert np.array_equal(a.sample(500), b.sample(500))
    assert "stop_sign" in a.empty and "stop_sign" not in a.names
    assert "stop_sign" in caplog.text


# training

def test_lr_schedule_shape():
    cfg = TrainConfig()
    lrs = lr_schedule(cfg)
    assert lrs[0] == 3e-5 and len(lrs) == cfg.total_steps
    jumps = np.nonzero(np.diff(lrs) > 0)[0]
    assert len(jumps) == 4
    seg_min = [lrs[a:b].min() for a, b in zip([0, *jumps + 1], [*jumps + 1, len(lrs)])]
    assert np.argmin(seg_min) == 4 and lrs.argmin() > jumps[-1]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def test_training_is_deterministic(small_dataset):
    cfg = TrainConfig(epochs=1, steps_per_epoch=8, batch_size=4, lr=1e-3, restarts=1)
    a = train(small_dataset, "full", cfg, TINY)
    b = train(small_dataset, "full", cfg, TINY)
    assert np.array_equal(a.totals, b.totals)
    pa, pb = a.model.params(), b.model.params()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_zero_forecast_weight_matches_detached_branch(small_dataset):
    base = TrainConfig(epochs=2, steps_per_epoch=25, batch_size=4, lr=1e-3, restarts=1)
    zero = train(small_dataset, "full", dataclasses.replace(base, lambda_forecast=0.0), TINY)
    det = train(small_dataset, "full", dataclasses.replace(base, detach_forecast=True), TINY)
    a = np.array([r.action for r in zero.losses])
    b = np.array([r.action for r in det.losses])
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_checkpoint_round_trip(tmp_path, batch):
    model = DrivingModel("full", TINY, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path, "full", TINY)
    x = model.encode_large(batch["frame_t"]).pooled.tokens.data
    y = back.encode_large(batch["frame_t"]).pooled.tokens.data
    assert np.array_equal(x, y)


def test_non_finite_loss_aborts_with_step(small_dataset):
    bad = small_dataset.subset(range(8))
    bad.cond_t[:] = np.inf
    with pytest.raises(TrainingDiverged) as exc:
        train(bad, "full", TrainConfig(epochs=1, steps_per_epoch=3, batch_size=2, restarts=0), TINY)
    assert exc.value.step == 0


def test_short_training_reduces_loss(small_dataset):
    sub = small_dataset.subset(range(0, len(small_dataset), 5)[:32])
    cfg = TrainConfig(epochs=6, steps_per_epoch=25, batch_size=8, lr=3e-3, restarts=0, weighted=False)
    res = train(sub, "full", cfg, TINY)
    assert res.totals[-10:].mean() < 0.5 * res.totals[:5].mean()


def test_gt_forecast_test_only_is_not_trainable(small_dataset):
    with pytest.raises(ConfigError):
        train(small_dataset, "gt_forecast_test_only", TrainConfig(epochs=1, steps_per_epoch=5))


# evaluation

def short(ep, ticks):
    return dataclasses.replace(ep, max_ticks=ticks)


def test_expert_success_rate_is_100():
    rep = evaluate_policy(expert_policy, scenario_suite())
    assert rep.sr() == (100.0, 0.0)


def test_untrained_model_stays_put_and_fails():
    eps = [short(make_scenario(k, 0), 40) for k in ("hard_brake", "red_light", "merge")]
    models = {s: DrivingModel("full", TINY, seed=s) for s in (0, 1)}
    rep = evaluate_closed_loop(models, "full", eps)
    assert rep.sr() == (0.0, 0.0)
    assert rep.latency_ms == 50.0 and rep.stale_misses == 0
    assert len(rep.success_rates()) == 2
    assert "+-" in rep.to_text()


def test_evaluate_rejects_wrong_model():
    with pytest.raises(ConfigError):
        evaluate_closed_loop({0: DrivingModel("base", TINY)}, "full", [make_scenario("merge", 0)])


def test_ablation_matrix_rows_and_latencies():
    eps = [short(make_scenario("lane_change", 0), 3)]
    kinds = {"base", "full", "no_forecast", "no_small", "no_mask", "small_only", "gt_forecast"}
    models = {k: {0: DrivingModel(k, TINY, seed=0)} for k in kinds}
    table = run_ablation_matrix(models, eps)
    assert len(table.rows) == len(ABLATION_ROWS) == 8
    lat = {r["row"]: r["latency_ms"] for r in table.as_records()}
    assert (lat["full"], lat["B"], lat["E"], lat["F"], lat["base"]) == (50, 31, 124, 124, 102)
    assert table.rows[-1][1].mode == "gt_forecast_test_only"
    assert len(table.to_text().splitlines()) == 10


def test_ablation_lists_missing_modes():
    with pytest.raises(ConfigError, match="no_mask.*small_only|small_only"):
        run_ablation_matrix({"full": {0: DrivingModel("full", TINY)}}, [make_scenario("merge", 0)])

import json

import numpy as np
import pytest

from flowmaps import sim
from flowmaps.autograd import EMAState, OptimizerState, cosine_lr
from flowmaps.errors import ConfigurationError, NonFiniteError
from flowmaps.train import (
    METRICS_HEADER,
    EpisodeArrays,
    TrainConfig,
    TrainState,
    build_model,
    load_model,
    make_training_example,
    make_validation_set,
    read_metrics,
    train,
    train_step,
    validation_loss,
)

TINY = dict(dim=16, heads=2, cdit_blocks=1, enc_layers=1, batch_size=16, val_every=20, val_examples=64, log_every=10)


@pytest.fixture(scope="module")
def small_sets():
    return sim.make_dataset(11, 12), sim.make_dataset(12, 4)


def _state(cfg: TrainConfig, kind="flowmaps", beta1=0.9):
    model = build_model(kind, cfg.model_config(12, 20), np.random.default_rng(0), np.float64)
    ps = model.parameters()
    return TrainState(model, OptimizerState.for_params(ps, beta1=beta1, weight_decay=0.0), EMAState.for_params(ps, 0.99), cfg)


# -- examples --------------------------------------------------------------------------


def test_static_dynamics_target_is_current_box():
    ep = sim.make_episode(5, model=sim.TransitionModel(0.0, 1.0, 0.0))
    rng = np.random.default_rng(0)
    for _ in range(50):
        ex = make_training_example(ep, rng)
        assert ex.x1 == ex.snapshot.find(ex.query_class.name).bbox


def test_example_fields_are_consistent(episodes):
    rng = np.random.default_rng(1)
    for _ in range(200):
        ep = episodes[int(rng.integers(len(episodes)))]
        ex = make_training_example(ep, rng)
        assert 1 <= ex.delta_tau and ex.tau_q <= ep.tau_max
        assert ex.x1 == ep.snapshots[ex.tau_q].find(ex.query_class.name).bbox
        assert ex.query_descriptor == ex.snapshot.find(ex.query_class.name).descriptor


def test_state_time_is_uniform(episodes):
    rng = np.random.default_rng(2)
    taus = np.array([make_training_example(episodes[0], rng).snapshot.tau for _ in range(100_000)])
    freq = np.bincount(taus, minlength=20) / taus.size
    assert taus.max() == 19
    assert 0.5 * np.abs(freq - 1 / 20).sum() < 0.02


def test_horizon_is_uniform_given_state_time(episodes):
    rng = np.random.default_rng(3)
    draws = [make_training_example(episodes[1], rng) for _ in range(20_000)]
    dt = np.array([d.delta_tau for d in draws if d.snapshot.tau == 15])
    assert set(dt) == {1, 2, 3, 4, 5}
    assert np.abs(np.bincount(dt)[1:] / dt.size - 0.2).max() < 0.05


def test_zero_horizon_is_opt_in(episodes):
    rng = np.random.default_rng(4)
    assert min(make_training_example(episodes[0], rng).delta_tau for _ in range(2000)) == 1
    assert min(make_training_example(episodes[0], rng, include_zero=True).delta_tau for _ in range(2000)) == 0


def test_single_snapshot_episode_rejected():
    ep = sim.make_episode(0, tau_max=1)
    short = sim.Episode(ep.seed, ep.snapshots[:1], ep.anchor_history)
    with pytest.raises(ConfigurationError):
        make_training_example(short, np.random.default_rng(0))


def test_batch_targets_match_episode(episodes):
    arr = EpisodeArrays.build(episodes, 16)
    b = arr.sample_batch(np.random.default_rng(5), 32)
    for i in range(32):
        ep = episodes[b["episode"][i]]
        name = arr.class_names[b["object"][i]]
        assert tuple(b["x1"][i]) == ep.snapshots[b["tau_q"][i]].find(name).bbox.as_tuple()


# -- train_step ---------------------------------------------------------------------


def test_first_step_loss_is_mean_target_norm(episodes):
    cfg = TrainConfig(**TINY, dropout=0.0)
    state = _state(cfg)
    arr = EpisodeArrays.build(episodes, 16)
    rng = np.random.default_rng(0)
    batch = arr.sample_batch(rng, 16)
    x0, t = rng.standard_normal((16, 4)), rng.random(16)
    loss = train_step(state, batch, x0, t, 1e-3)
    u = batch["x1"] - x0
    assert loss == pytest.approx(np.mean(np.sum(u * u, axis=1)), rel=1e-12)


def test_repeated_example_is_fitted(episodes):
    cfg = TrainConfig(**TINY, dropout=0.0)
    state = _state(cfg)
    arr = EpisodeArrays.build(episodes, 16)
    batch = arr.batch(np.zeros(32, int), np.full(32, 2), np.full(32, 3), np.zeros(32, int))
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        x0, t = rng.standard_normal((32, 4)), cfg.time_sampler().sample(rng, 32)
        losses.append(train_step(state, batch, x0, t, 3e-3))
    assert np.mean(losses[-10:]) < 0.1 * np.mean(losses[:10])


def test_non_finite_loss_aborts_with_step(episodes):
    cfg = TrainConfig(**TINY)
    state = _state(cfg)
    arr = EpisodeArrays.build(episodes, 16)
    batch = arr.sample_batch(np.random.default_rng(0), 4)
    state.model.out.weight.data[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="step 0"):
        train_step(state, batch, np.zeros((4, 4)), np.full(4, 0.5), 1e-3, np.random.default_rng(0))


# -- full runs ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(small_sets, tmp_path_factory):
    train_eps, val_eps = small_sets
    cfg = TrainConfig(**TINY, iterations=120, lr=1e-3)
    out = tmp_path_factory.mktemp("run")
    return cfg, train(cfg, train_eps, val_eps, out_dir=out, palette=sim.DEFAULT_PALETTE)


def test_run_writes_checkpoint_and_metrics(tiny_run):
    _, result = tiny_run
    assert result.checkpoint_path.exists()
    assert result.metrics_path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    rows = read_metrics(result.metrics_path)
    assert rows[-1]["step"] == 120 and rows[-1]["val_loss"] is not None
    assert [r["step"] for r in rows if r["val_loss"] is not None] == [0, 20, 40, 60, 80, 100, 120]


def test_logged_lr_matches_cosine(tiny_run):
    cfg, result = tiny_run
    for r in read_metrics(result.metrics_path):
        assert r["lr"] == cosine_lr(r["step"], cfg.iterations, cfg.lr)


def test_checkpoint_reproduces_logged_val_loss(tiny_run, small_sets):
    cfg, result = tiny_run
    model, saved = load_model(result.checkpoint_path)
    val = make_validation_set(EpisodeArrays.build(small_sets[1], cfg.tokens), cfg)
    assert validation_loss(model, val) == read_metrics(result.metrics_path)[-1]["val_loss"]
    assert saved["model_kind"] == "flowmaps" and saved["palette"] == list(sim.DEFAULT_PALETTE)


def test_identical_seeds_give_identical_curves(small_sets, tmp_path):
    cfg = TrainConfig(**TINY, iterations=30)
    a = train(cfg, *small_sets, out_dir=tmp_path / "a")
    b = train(cfg, *small_sets, out_dir=tmp_path / "b")
    assert a.metrics == b.metrics
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    c = train(TrainConfig(**TINY, iterations=30, seed=1), *small_sets)
    assert c.metrics != a.metrics


def test_val_loss_halves_during_training(small_sets):
    cfg = TrainConfig(**{**TINY, "val_every": 400}, iterations=400, lr=1e-3)
    rows = [r for r in train(cfg, *small_sets).metrics if r["val_loss"] is not None]
    assert rows[-1]["val_loss"] < 0.5 * rows[0]["val_loss"]


def test_baseline_trains_through_same_loop(small_sets, tmp_path):
    cfg = TrainConfig(**TINY, iterations=40, model_kind="mlp_baseline")
    result = train(cfg, *small_sets, out_dir=tmp_path)
    model, saved = load_model(result.checkpoint_path)
    assert saved["model_kind"] == "mlp_baseline" and model.kind == "mlp_baseline"


def test_empty_dataset_rejected(small_sets):
    with pytest.raises(ConfigurationError):
        train(TrainConfig(**TINY), [], small_sets[1])


def test_degenerate_target_is_recovered():
    """With a point-mass target the learned field carries all noise onto it."""
    arr = EpisodeArrays.build(sim.make_dataset(3, 8), 16)
    cfg = TrainConfig(dim=32, heads=2, dropout=0.0, dtype="float64")
    state = _state(cfg)
    target = np.array([0.3, 0.6, 0.1, 0.15])
    rng = np.random.default_rng(0)
    n = 1500
    for i in range(n):
        batch = arr.sample_batch(rng, 64)
        batch["x1"] = np.tile(target, (64, 1))
        train_step(state, batch, rng.standard_normal((64, 4)), cfg.time_sampler().sample(rng, 64), cosine_lr(i, n, 3e-3))
    boxes, ok = state.model.sample(arr.sample_batch(rng, 16), 25, rng, steps=10)
    assert ok.all()
    assert np.abs(boxes - target).max() < 0.02


# -- config -------------------------------------------------------------------------


def test_defaults_are_desk_scale():
    cfg = TrainConfig()
    assert (cfg.dim, cfg.cdit_blocks, cfg.enc_layers, cfg.iterations, cfg.batch_size) == (64, 2, 2, 5000, 64)
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.ema_decay, cfg.dropout) == (1e-4, 0.95, 0.999, 0.9999, 0.1)
    full = TrainConfig.full_scale()
    assert (full.dim, full.cdit_blocks, full.enc_layers, full.iterations) == (256, 8, 8, 30000)


def test_key_value_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\ndim = 32\nlr=3e-4\nsampler = beta\ninclude-zero-horizon = yes\n")
    cfg = TrainConfig.from_file(p)
    assert (cfg.dim, cfg.lr, cfg.sampler, cfg.include_zero_horizon) == (32, 3e-4, "beta", True)


def test_json_config_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"iterations": 10, "dropout": 0.0}))
    cfg = TrainConfig.from_file(p)
    assert cfg.iterations == 10 and cfg.dropout == 0.0


@pytest.mark.parametrize(
    "text", ["dim = 3.5\n", "bogus = 1\n", "just words\n", "include_zero_horizon = maybe\n"]
)
def test_bad_config_file(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_file(p)


@pytest.mark.parametrize(
    "kw",
    [dict(dim=0), dict(dim=10, heads=4), dict(dropout=1.0), dict(lr=-1.0), dict(beta1=1.0), dict(model_kind="gpt"),
     dict(dtype="float16"), dict(sampler="beta", beta_a=0.0)],  # fmt: skip
)
def test_invalid_config_values(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw).validate()

import numpy as np
import pytest

from hyperreg import data, training
from hyperreg.losses import HyperParams, LossConfig


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    cfg = data.GenConfig(height=32, width=32, count=8, seed=3, splits=(0.75, 0.125, 0.125))
    return data.Dataset(data.gen_synthetic(cfg, root))


def tiny_config(**kw):
    base = dict(steps=40, seed=9, height=32, width=32, hypernet_size="small",
                plateau_window=1000, log_every=10)
    base.update(kw)
    return training.TrainConfig(**base)


# ---------------------------------------------------------------------------
# hyperparameter sampling


def test_sampling_r1_always_endpoints():
    cfg = tiny_config(endpoint_rate=1.0)
    rng = np.random.default_rng(0)
    draws = [training.sample_hyperparams(cfg, rng).lam for _ in range(200)]
    assert set(draws) <= {0.0, 1.0}


def test_sampling_r0_uniform_mean():
    cfg = tiny_config(endpoint_rate=0.0)
    rng = np.random.default_rng(1)
    draws = np.array([training.sample_hyperparams(cfg, rng).lam for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01
    assert draws.min() >= 0.0 and draws.max() <= 1.0


def test_default_endpoint_rate():
    assert training.TrainConfig().endpoint_rate == 0.2


def test_endpoint_rate_visits_both_ends_early():
    # analytic: P(see both endpoints in 100 draws at r=0.2) > 0.99
    p_miss_one = (1.0 - 0.1) ** 100
    p_both = 1.0 - 2.0 * p_miss_one + (1.0 - 0.2) ** 100
    assert p_both > 0.99
    cfg = tiny_config(endpoint_rate=0.2)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        draws = {training.sample_hyperparams(cfg, rng).lam for _ in range(100)}
        assert 0.0 in draws and 1.0 in draws


def test_discrete_sampling_stays_in_declared_set():
    loss = LossConfig(sim_metric="ncc", window_values=(3, 5, 7))
    cfg = tiny_config(loss=loss)
    rng = np.random.default_rng(2)
    for _ in range(100):
        hp = training.sample_hyperparams(cfg, rng)
        assert hp.window in (3, 5, 7)


# ---------------------------------------------------------------------------
# schedule


def test_plateau_halves_lr_after_window():
    sched = training.PlateauSchedule(lr=1e-4, window=10, factor=2.0, ema_decay=0.5)
    sched.update(1.0)
    for _ in range(9):
        assert sched.update(1.0) == 1e-4
    assert sched.update(1.0) == pytest.approx(5e-5)


def test_plateau_resets_on_improvement():
    sched = training.PlateauSchedule(lr=1e-4, window=5, factor=2.0, ema_decay=0.0)
    for i in range(20):
        sched.update(1.0 / (i + 1.0))  # always improving
    assert sched.lr == 1e-4


# ---------------------------------------------------------------------------
# loops


def test_training_is_bit_deterministic(tiny_dataset):
    a, _ = training.train_hypermorph(tiny_config(), tiny_dataset)
    b, _ = training.train_hypermorph(tiny_config(), tiny_dataset)
    assert set(a.weights) == set(b.weights)
    for k in a.weights:
        assert np.array_equal(a.weights[k], b.weights[k]), k


def test_hypermorph_trains_only_hypernetwork_parameters(tiny_dataset):
    ckpt, _ = training.train_hypermorph(tiny_config(), tiny_dataset)
    assert all(name.startswith("hyper/") for name in ckpt.weights)


def test_baseline_lambda1_collapses_velocity(tiny_dataset):
    from hyperreg import hyperopt

    cfg = tiny_config(steps=400, log_every=100)
    ckpt, _ = training.train_baseline(cfg, HyperParams(lam=1.0), tiny_dataset)
    pairs = tiny_dataset.make_pairs("train", 4, seed=0)
    norms = []
    for mid, fid in pairs:
        from hyperreg.nets import hypermorph_forward

        v, _ = hypermorph_forward(ckpt.weights, np.zeros(0), tiny_dataset[mid].image,
                                  tiny_dataset[fid].image, ckpt.descriptor)
        norms.append(np.linalg.norm(v, axis=-1).mean())
    assert np.mean(norms) < 0.05


def test_baseline_lambda0_identical_pairs_drives_loss_to_zero(tiny_dataset):
    # clone one subject's image onto every entry: moving always equals fixed
    ref = tiny_dataset[tiny_dataset.ids()[0]].image
    for eid in tiny_dataset.ids():
        tiny_dataset.entries[eid] = tiny_dataset.entries[eid].__class__(
            **{**tiny_dataset.entries[eid].__dict__, "image": ref.copy()})
    cfg = tiny_config(steps=600, log_every=50)
    ckpt, trace = training.train_baseline(cfg, HyperParams(lam=0.0), tiny_dataset)
    assert ckpt.loss_summary["final_loss_ema"] < 0.05


def test_nonfinite_loss_aborts_with_diagnostics(tiny_dataset):
    bad = tiny_dataset[tiny_dataset.ids()[0]]
    saved = bad.image.copy()
    bad.image[:] = np.inf
    try:
        with pytest.raises(training.TrainingError, match=r"step \d+.*lambda=.*pair="):
            training.train_baseline(tiny_config(steps=200), HyperParams(lam=0.2), tiny_dataset)
    finally:
        bad.image[:] = saved


def test_probe_recompute_matches_checkpoint(tiny_dataset):
    ckpt, _ = training.train_hypermorph(tiny_config(steps=25), tiny_dataset)
    recomputed = training.recompute_probe(ckpt, tiny_dataset)
    assert recomputed == ckpt.loss_summary["probe"]["loss"]


def test_integrative_variants_share_sampling_schedule(tiny_dataset):
    traces = {}
    for variant in ("pre", "full"):
        _, trace = training.train_integrative(tiny_config(steps=30, log_every=1), variant, tiny_dataset)
        traces[variant] = [(r["lambda"], r["gamma"]) for r in trace]
    assert traces["pre"] == traces["full"]


def test_semisupervised_training_runs(tiny_dataset):
    loss = LossConfig(sim_metric="mse", semi_supervised=True,
                      train_labels=tuple(tiny_dataset.train_labels))
    cfg = tiny_config(steps=15, loss=loss)
    ckpt, trace = training.train_hypermorph(cfg, tiny_dataset)
    assert ckpt.descriptor.n_hyper == 2
    assert all(r["gamma"] is not None for r in trace)


def test_checkpoint_serialization_of_trained_model(tiny_dataset, tmp_path):
    from hyperreg.nets import hypermorph_forward

    ckpt, _ = training.train_hypermorph(tiny_config(steps=20), tiny_dataset)
    path = tmp_path / "m.hmck"
    data.save_checkpoint(path, ckpt)
    loaded = data.load_checkpoint(path)
    m = tiny_dataset[tiny_dataset.ids()[0]].image
    f = tiny_dataset[tiny_dataset.ids()[1]].image
    v1, u1 = hypermorph_forward(ckpt.weights, [0.5], m, f, ckpt.descriptor)
    v2, u2 = hypermorph_forward(loaded.weights, [0.5], m, f, loaded.descriptor)
    assert np.array_equal(u1, u2)


def test_trace_csv_schema(tiny_dataset, tmp_path):
    _, trace = training.train_hypermorph(tiny_config(steps=12, log_every=4), tiny_dataset)
    path = tmp_path / "trace.csv"
    training.write_trace_csv(path, trace)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,loss,lambda,gamma,lr"
    assert len(lines) >= 4


def test_train_config_json_round_trip():
    cfg = tiny_config(loss=LossConfig(sim_metric="ncc", window_values=(3, 5, 7)))
    back = training.TrainConfig.from_json(cfg.to_json())
    assert back == cfg

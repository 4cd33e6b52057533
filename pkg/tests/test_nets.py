import numpy as np
import pytest

from hyperreg import nets
from hyperreg.diffcore import GraphBuilder, fd_check_graph
from hyperreg.fields import integrate_svf_node


def hand_counted_unet_params():
    # independent tally of the documented channel plan
    plan = [(2, 16), (16, 32), (32, 32), (32, 32),          # encoder
            (32, 32), (64, 32), (64, 32), (64, 32),          # bottleneck + 3 skip convs
            (48, 32), (32, 16), (16, 16), (16, 2)]           # tail + flow
    return sum(9 * cin * cout + cout for cin, cout in plan)


def test_unet_shape_divisibility():
    assert nets.build_unet(64, 64).param_count == hand_counted_unet_params()
    with pytest.raises(ValueError, match="divisible"):
        nets.build_unet(60, 60)


def test_channel_plan_matches_published_layout():
    assert nets.ENC_CHANNELS == (16, 32, 32, 32)
    assert nets.DEC_CHANNELS == (32, 32, 32, 32, 32, 16, 16)
    kernels = [s for n, s in nets.unet_param_specs() if n.endswith("kernel")]
    assert [k[3] for k in kernels] == [16, 32, 32, 32, 32, 32, 32, 32, 32, 16, 16, 2]


def test_hypernet_sizes():
    assert nets.HYPERNET_WIDTHS["large"] == (32, 64, 64, 128, 128)
    assert nets.HYPERNET_WIDTHS["medium"] == (32, 32, 64, 64, 64)
    assert nets.HYPERNET_WIDTHS["small"] == (16, 16, 16, 16)


def test_hypernet_output_width_matches_unet_param_count():
    desc = nets.build_hypernet("large", 1, nets.unet_param_count())
    layout = dict(nets.param_layout(desc))
    assert layout["hyper/out/kernel"] == (128, hand_counted_unet_params())
    with pytest.raises(ValueError, match="target_param_count"):
        nets.build_hypernet("large", 1, 12345)


def test_integrative_layouts():
    pre = nets.build_pre_integrative(1)
    assert dict(nets.param_layout(pre))["enc0/conv/kernel"] == (3, 3, 2 + 32, 16)
    post = nets.build_post_integrative(1)
    assert dict(nets.param_layout(post))["dec4/conv/kernel"] == (3, 3, 32 + 32 + 16, 32)
    full = nets.build_full_integrative(2)
    assert dict(nets.param_layout(full))["dnet/out/kernel"] == (256, nets.unet_channel_total())
    # total channels: encoder 112 + decoder 192 + flow 2
    assert nets.unet_channel_total() == 306


def test_init_is_seed_deterministic():
    desc = nets.build_hypernet("small", 1, nets.unet_param_count(), 32, 32)
    a = nets.init_weights(desc, seed=5)
    c = nets.init_weights(desc, seed=5)
    assert set(a) == {n for n, _ in nets.param_layout(desc)}
    for k in a:
        assert np.array_equal(a[k], c[k])
    d = nets.init_weights(desc, seed=6)
    assert any(not np.array_equal(a[k], d[k]) for k in a)


def test_emitted_theta_distributed_like_direct_init():
    desc = nets.build_hypernet("large", 1, nets.unet_param_count(), 32, 32)
    unet = nets.build_unet(32, 32)
    ratios = []
    for seed in range(10):
        w = nets.init_weights(desc, seed)
        theta = nets.emit_theta(desc, w, np.asarray([0.5]))
        emitted = nets.unpack_weights(unet, theta)
        direct = nets.init_unet_weights(np.random.default_rng(seed + 1000))
        for name in emitted:
            if name.endswith("kernel"):
                ratios.append(np.std(emitted[name]) / np.std(direct[name]))
    assert max(ratios) < 3.0 and min(ratios) > 1.0 / 3.0


def test_zero_hyper_input_emits_finite_theta():
    desc = nets.build_hypernet("small", 2, nets.unet_param_count(), 32, 32)
    w = nets.init_weights(desc, 0)
    theta = nets.emit_theta(desc, w, np.zeros(2))
    assert np.all(np.isfinite(theta))


def test_hypermorph_forward_deterministic_and_validated():
    desc = nets.build_hypernet("small", 1, nets.unet_param_count(), 32, 32)
    w = nets.init_weights(desc, 1)
    rng = np.random.default_rng(2)
    m, f = rng.random((32, 32)), rng.random((32, 32))
    v1, u1 = nets.hypermorph_forward(w, [0.3], m, f, desc)
    v2, u2 = nets.hypermorph_forward(w, [0.3], m, f, desc)
    assert np.array_equal(u1, u2) and np.array_equal(v1, v2)
    assert v1.shape == (32, 32, 2)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        nets.hypermorph_forward(w, [1.5], m, f, desc)


def test_full_graph_equals_emit_then_unet():
    # a hypernetwork-emitted theta and a baseline weight vector are
    # interchangeable inputs to the registration network
    desc = nets.build_hypernet("small", 1, nets.unet_param_count(), 32, 32)
    w = nets.init_weights(desc, 3)
    rng = np.random.default_rng(4)
    m, f = rng.random((32, 32, 1)), rng.random((32, 32, 1))
    run = nets.infer_graph(desc).run({"moving": m, "fixed": f, "hyper": np.asarray([0.7])}, w)
    v_direct, u_direct = nets.hypermorph_forward(w, [0.7], m[..., 0], f[..., 0], desc)
    np.testing.assert_array_equal(run.value("v"), v_direct)
    np.testing.assert_array_equal(run.value("u"), u_direct)


def test_all_architectures_share_the_same_interface():
    descs = [
        nets.build_hypernet("small", 1, nets.unet_param_count(), 32, 32),
        nets.build_pre_integrative(1, 32, 32),
        nets.build_post_integrative(1, 32, 32),
        nets.build_full_integrative(1, 32, 32),
    ]
    rng = np.random.default_rng(5)
    m, f = rng.random((32, 32)), rng.random((32, 32))
    for desc in descs:
        v, u = nets.hypermorph_forward(nets.init_weights(desc, 0), [0.5], m, f, desc)
        assert v.shape == (32, 32, 2) and u.shape == (32, 32, 2)
        assert np.all(np.isfinite(v))


def test_unet_param_count_matches_across_builds():
    # weight-compatibility across HyperMorph and baseline builds
    unet = nets.build_unet(64, 64)
    hyper = nets.build_hypernet("large", 1, nets.unet_param_count(), 64, 64)
    emitted_width = dict(nets.param_layout(hyper))["hyper/out/bias"][0]
    assert unet.param_count == emitted_width


def test_pack_unpack_round_trip():
    desc = nets.build_unet(32, 32)
    w = nets.init_unet_weights(np.random.default_rng(6))
    w32 = {k: v.astype(np.float32) for k, v in w.items()}
    flat = nets.pack_weights(desc, w32)
    back = nets.unpack_weights(desc, flat)
    for k in w32:
        assert np.array_equal(w32[k], back[k])
    with pytest.raises(ValueError, match="entries"):
        nets.unpack_weights(desc, flat[:-1])


def test_loss_gradient_wrt_hyper_matches_fd():
    # end-to-end dLoss/dLambda through hypernetwork, U-Net, and integration
    desc = nets.build_hypernet("small", 1, nets.unet_param_count(), 32, 32)
    w = {k: v.astype(np.float64) for k, v in nets.init_weights(desc, 7).items()}
    rng = np.random.default_rng(8)
    m, f = rng.random((32, 32, 1)), rng.random((32, 32, 1))

    b = GraphBuilder(dtype=np.float64)
    mn = b.input("moving", m.shape)
    fn = b.input("fixed", f.shape)
    hyper = b.input("hyper", (1,))
    params = {name: b.param(name, shape) for name, shape in nets.param_layout(desc)}
    v = nets.build_model_nodes(b, desc, mn, fn, hyper, params)
    u = integrate_svf_node(b, v, nets.SVF_STEPS)
    b.output("loss", b.mean(b.square(u)))
    graph = b.build()

    err = fd_check_graph(graph, {"moving": m, "fixed": f, "hyper": np.asarray([0.4])},
                         params=w, output="loss", wrt_params=[], wrt_inputs=["hyper"], h=1e-4)
    assert err < 1e-3

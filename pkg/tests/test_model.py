import numpy as np
import pytest

from dilkit import optim
from dilkit.autodiff import ParamVector, flat_grad
from dilkit.model import (NetConfig, RestorationNet, forward, init,
                          load_checkpoint, param_count, save_checkpoint,
                          with_params)


class TestInit:
    def test_deterministic(self):
        a = init(NetConfig(), seed=99)
        b = init(NetConfig(), seed=99)
        assert np.array_equal(a.params.data, b.params.data)
        c = init(NetConfig(), seed=100)
        assert not np.array_equal(a.params.data, c.params.data)

    def test_default_param_count(self):
        # 3*16*3*3+16 + 16*16*3*3+16 + 16*3*3*3+3
        assert param_count(NetConfig()) == 3203
        assert len(init(NetConfig(), 0).params) == 3203

    def test_biases_zero_kernels_he_scaled(self):
        net = init(NetConfig(), 5)
        parts = net.params.unflatten()
        assert np.array_equal(parts["conv0.bias"], np.zeros(16))
        w = parts["conv1.weight"]
        assert abs(w.std() - np.sqrt(2.0 / (16 * 9))) < 0.01

    @pytest.mark.parametrize("cfg", [
        NetConfig(1, 2, 2, 3, True),
        NetConfig(3, 8, 4, 5, True),
        NetConfig(2, 5, 1, 3, False),
        NetConfig(4, 7, 3, 7, True),
        NetConfig(3, 16, 2, 3, False),
    ])
    def test_count_formula_vs_segment_enumeration(self, cfg):
        net = init(cfg, 1)
        by_enum = sum(int(np.prod(s)) for _, s, _ in net.params.segments)
        assert param_count(cfg) == by_enum == len(net.params)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            NetConfig(kernel_size=4)
        with pytest.raises(ValueError, match="residual"):
            NetConfig(num_layers=1, residual=True)
        with pytest.raises(ValueError, match="positive"):
            NetConfig(hidden_channels=0)


class TestForward:
    def test_zero_param_residual_is_identity(self):
        net = init(NetConfig(), 3)
        zero = with_params(net, net.params.with_data(np.zeros(len(net.params))))
        x = np.random.default_rng(1).random((2, 3, 16, 16))
        assert np.array_equal(forward(zero, x).data, x)

    def test_deterministic(self):
        net = init(NetConfig(), 3)
        x = np.random.default_rng(2).random((1, 3, 12, 12))
        assert np.array_equal(forward(net, x).data, forward(net, x).data)

    @pytest.mark.parametrize("shape", [(1, 3, 8, 8), (2, 3, 16, 9), (4, 3, 32, 32)])
    def test_shape_preserved(self, shape):
        net = init(NetConfig(), 3)
        x = np.random.default_rng(0).random(shape)
        assert forward(net, x).data.shape == shape

    def test_bad_channel_count_rejected(self):
        net = init(NetConfig(), 3)
        with pytest.raises(ValueError, match="expected input"):
            forward(net, np.zeros((1, 4, 8, 8)))

    def test_too_small_input_rejected(self):
        net = init(NetConfig(), 3)
        with pytest.raises(ValueError, match="smaller than kernel"):
            forward(net, np.zeros((1, 3, 2, 2)))

    def test_param_gradient_matches_fd(self):
        net = init(NetConfig(in_channels=2, hidden_channels=3, num_layers=2), 17)
        rng = np.random.default_rng(18)
        x = rng.random((1, 2, 8, 8))
        y = rng.random((1, 2, 8, 8))
        obj = optim.BatchObjective(net, [(x, y)], "l1")
        an = flat_grad(obj, net.params)
        h = 1e-5
        fd = np.empty_like(an)
        for j in range(len(net.params)):
            e = np.zeros(len(net.params))
            e[j] = h
            fd[j] = (obj(net.params.with_data(net.params.data + e)).item()
                     - obj(net.params.with_data(net.params.data - e)).item()) / (2 * h)
        assert np.max(np.abs(an - fd)) / np.max(np.abs(fd)) <= 1e-6

    def test_lipschitz_in_params(self):
        # output change is O(delta) over three decades of parameter noise
        net = init(NetConfig(), 23)
        x = np.random.default_rng(5).random((1, 3, 16, 16))
        base = forward(net, x).data
        direction = np.random.default_rng(6).standard_normal(len(net.params))
        direction /= np.linalg.norm(direction)
        ratios = []
        for delta in (1e-2, 1e-3, 1e-4):
            pert = with_params(net, net.params.with_data(net.params.data + delta * direction))
            ratios.append(np.max(np.abs(forward(pert, x).data - base)) / delta)
        assert max(ratios) / min(ratios) < 1.5


class TestWithParams:
    def test_same_params_same_output(self):
        net = init(NetConfig(), 7)
        view = with_params(net, net.params)
        x = np.random.default_rng(8).random((1, 3, 10, 10))
        assert np.array_equal(forward(net, x).data, forward(view, x).data)

    def test_isolation(self):
        net = init(NetConfig(), 7)
        view = with_params(net, net.params)
        before = net.params.data.copy()
        view.params.data[:] = 0.0
        assert np.array_equal(net.params.data, before)

    def test_length_mismatch_rejected(self):
        net = init(NetConfig(), 7)
        with pytest.raises(ValueError, match="length"):
            with_params(net, ParamVector.from_arrays([("w", np.zeros(10))]))

    def test_virtual_sgd_step_descends(self):
        # phi = theta - alpha * grad reduces the inner loss for small alpha
        from dilkit import degrade as dg
        images = [dg.synth_clean_image(dg.mix(31, i), 64, 64) for i in range(4)]
        cset = dg.ConfounderSet((dg.awgn(15.0),))
        for t in range(20):
            net = init(NetConfig(), dg.mix(32, t))
            pairs = dg.sample_batch(images, cset, ("serial", 0), 4, 16, dg.mix(33, t))
            obj = optim.BatchObjective(net, [optim._stack(pairs)], "l1")
            g = flat_grad(obj, net.params)
            before = obj.last_value
            phi = net.params.with_data(net.params.data - 1e-4 * g)
            after = obj(phi).item()
            assert after <= before


class TestCheckpoint:
    def test_byte_exact_round_trip(self, tmp_path):
        net = init(NetConfig(), 12)
        p1 = tmp_path / "a.dilnet"
        p2 = tmp_path / "b.dilnet"
        save_checkpoint(p1, net.params)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.data, net.params.data)
        assert loaded.segments == net.params.segments

    def test_header_checked(self, tmp_path):
        p = tmp_path / "bad.dilnet"
        p.write_bytes(b"NOTDILNET\n0\n")
        with pytest.raises(ValueError, match="header"):
            load_checkpoint(p)

    def test_loaded_params_drive_identical_forward(self, tmp_path):
        net = init(NetConfig(), 12)
        save_checkpoint(tmp_path / "c.dilnet", net.params)
        net2 = RestorationNet(NetConfig(), load_checkpoint(tmp_path / "c.dilnet"))
        x = np.random.default_rng(13).random((1, 3, 12, 12))
        assert np.array_equal(forward(net, x).data, forward(net2, x).data)

import numpy as np
import pytest

from bptrack import neural
from bptrack.errors import FormatVersionMismatch, ShapeMismatch
from bptrack.neural import (
    AdamState,
    DenseLayer,
    NetMeta,
    Param,
    Tape,
    adam_step,
    apply_adam,
    build_mlp,
    build_network,
    gru_forward,
    init_gru,
    load_weights,
    mlp_forward,
    save_weights,
    vabs,
    vsub,
    vsum,
    zero_grads,
    _val,
)
from bptrack.numerics import Rng


def central_diff_check(loss_fn, named_params, rng, step=1e-5, rel_tol=1e-4,
                       max_coords=24):
    """Backward gradients vs central differences on sampled coordinates."""
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    for name, param in named_params:
        grad = param.grad if param.grad is not None else np.zeros_like(param.value)
        flat = param.value.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        n = len(flat)
        coords = (range(n) if n <= max_coords
                  else sorted(set(int(rng.integers(0, n)) for _ in range(max_coords))))
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(_val(loss_fn()))
            flat[idx] = orig - step
            down = float(_val(loss_fn()))
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(gflat[idx]), 1e-6)
            assert abs(numeric - gflat[idx]) / denom < rel_tol, (
                f"{name}[{idx}]: numeric {numeric} vs backward {gflat[idx]}"
            )
    zero_grads(named_params)


class TestMlpForward:
    def test_identity_network(self):
        layer = DenseLayer(Param(np.eye(3)), Param(np.zeros(3)), "identity")
        x = np.array([1.0, -2.0, 0.5])
        assert np.allclose(mlp_forward(x, [layer]), x)

    def test_relu(self):
        layer = DenseLayer(Param(np.eye(2)), Param(np.zeros(2)), "relu")
        assert np.allclose(mlp_forward(np.array([-1.0, 2.0]), [layer]), [0.0, 2.0])

    def test_gradient_vs_finite_differences(self):
        for seed in range(10):
            rng = Rng(100 + seed)
            mlp = build_mlp(rng, [4, 8, 3], ["relu", "identity"])
            x = rng.standard_normal(4)
            target = rng.standard_normal(3)
            named = list(mlp.named_parameters("mlp"))

            def loss_fn():
                return vsum(vabs(vsub(mlp.forward(x), target)))

            central_diff_check(loss_fn, named, rng)


class TestGruForward:
    def test_zero_weights_halve_hidden(self):
        cell = init_gru(Rng(0), 4, 3)
        for _, p in cell.named_parameters("gru"):
            p.value = np.zeros_like(p.value)
        h = np.array([1.0, -2.0, 4.0])
        out = gru_forward(np.zeros(4), h, cell)
        assert np.allclose(out, 0.5 * h)

    def test_zero_hidden_zero_weights(self):
        cell = init_gru(Rng(0), 4, 3)
        for _, p in cell.named_parameters("gru"):
            p.value = np.zeros_like(p.value)
        out = gru_forward(np.zeros(4), np.zeros(3), cell)
        assert np.allclose(out, np.zeros(3))

    def test_gradient_vs_finite_differences(self):
        for seed in range(10):
            rng = Rng(200 + seed)
            cell = init_gru(rng, 5, 4)
            u = rng.standard_normal(5)
            h = rng.standard_normal(4)
            target = rng.standard_normal(4)
            named = list(cell.named_parameters("gru"))

            def loss_fn():
                return vsum(vabs(vsub(gru_forward(u, h, cell), target)))

            central_diff_check(loss_fn, named, rng)


class TestAdam:
    def test_first_step_magnitude(self):
        values = [np.ones(4)]
        grads = [np.ones(4)]
        state = AdamState(lr=1e-3)
        (out,) = adam_step(values, grads, state)
        assert np.allclose(out, 1.0 - 1e-3, atol=1e-9)

    def test_zero_grads_no_change(self):
        values = [np.array([2.0, -1.0])]
        state = AdamState(lr=0.1)
        (out,) = adam_step(values, [np.zeros(2)], state)
        assert np.array_equal(out, values[0])
        assert state.step_count == 1

    def test_two_steps_match_scalar_recurrence(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g = 0.7
        x = 1.0
        m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        state = AdamState(lr=lr)
        value = [np.array([1.0])]
        for _ in range(2):
            value = adam_step(value, [np.array([g])], state)
        assert value[0][0] == pytest.approx(x, abs=1e-15)

    def test_quadratic_descent_monotone(self):
        # 50 Adam steps on a fixed quadratic never increase the loss
        rng = Rng(3)
        target = rng.standard_normal(6)
        param = Param(rng.standard_normal(6))
        named = [("x", param)]
        state = AdamState(lr=0.05)
        prev = float(np.sum((param.value - target) ** 2))
        for _ in range(50):
            param.grad = 2.0 * (param.value - target)
            apply_adam(named, state)
            zero_grads(named)
            now = float(np.sum((param.value - target) ** 2))
            assert now <= prev + 1e-12
            prev = now


class TestInferencePurity:
    def test_no_tape_allocated(self):
        mlp = build_mlp(Rng(1), [3, 4, 2], ["tanh", "identity"])
        x = np.ones(3)
        out = mlp.forward(x)
        assert isinstance(out, np.ndarray)
        a = mlp.forward(x)
        b = mlp.forward(x)
        assert np.array_equal(a, b)

    def test_tape_consumed_once(self):
        mlp = build_mlp(Rng(1), [2, 2], ["identity"])
        with Tape() as tape:
            loss = vsum(vabs(mlp.forward(np.ones(2))))
            tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        net = build_network(NetMeta(hidden_dim=16, feat_dim=8, map_channels=4),
                            Rng(7))
        path = tmp_path / "w.bin"
        save_weights(net, path)
        loaded = load_weights(path)
        for (name_a, pa), (name_b, pb) in zip(net.named_parameters(),
                                              loaded.named_parameters()):
            assert name_a == name_b
            assert np.array_equal(pa.value, pb.value)
        assert (tmp_path / "w.bin.manifest.txt").exists()

    def test_truncated_file(self, tmp_path):
        net = build_network(NetMeta(hidden_dim=8, feat_dim=4, map_channels=2), Rng(7))
        path = tmp_path / "w.bin"
        save_weights(net, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(FormatVersionMismatch):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatVersionMismatch):
            load_weights(path)

    def test_hidden_dim_mismatch(self, tmp_path):
        net = build_network(NetMeta(hidden_dim=32, feat_dim=8, map_channels=4), Rng(7))
        path = tmp_path / "w.bin"
        save_weights(net, path)
        with pytest.raises(ShapeMismatch):
            load_weights(path, expected={"hidden_dim": 64})

    def test_newer_version_rejected(self, tmp_path):
        net = build_network(NetMeta(hidden_dim=8, feat_dim=4, map_channels=2), Rng(7))
        path = tmp_path / "w.bin"
        save_weights(net, path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatVersionMismatch):
            load_weights(path)


def test_forward_counter_tracks_calls():
    neural.reset_forward_counter()
    mlp = build_mlp(Rng(2), [2, 2], ["identity"])
    mlp.forward(np.zeros(2))
    mlp.forward(np.zeros(2))
    assert neural.forward_call_count() == 2

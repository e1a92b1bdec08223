import numpy as np
import pytest
from hypothesis import given, strategies as st

from mahnet.tensor import (
    Adam, AdamHyper, GraphError, NonFiniteError, SGD, Tape, Tensor, apply_activation, backward,
    concat, concat_channels, convolve2d, crop_center, crop_offsets, decode_checkpoint, encode_checkpoint,
    fft, fft_real, flip, ifft, ifft_real, linear, load_checkpoint, log, matmul, mean, mul, normalize,
    optimizer_step, pool_max2d, reshape, save_checkpoint, softmax_channel, stack_split, tsum, transpose,
    RunningStats, CheckpointError, exp, div, power, absolute, clip, sub, getitem,
)
from mahnet.tensor.gradcheck import check_gradients
from mahnet.tensor.fft import next_pow2


def P(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def weighted(out, rng):
    w = rng.standard_normal(out.shape)
    return tsum(mul(out, w))


# -- activations -------------------------------------------------------------


def test_activation_examples():
    assert np.array_equal(apply_activation("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert apply_activation("sigmoid", Tensor([0.0])).data[0] == 0.5
    assert abs(apply_activation("silu", Tensor([1.0])).data[0] - 1 / (1 + np.exp(-1))) < 1e-15
    assert abs(apply_activation("silu", Tensor([1.0])).data[0] - 0.7310586) < 1e-7
    sp = apply_activation("softplus", Tensor([0.0, 50.0, -50.0])).data
    assert np.allclose(sp, [np.log(2), 50.0, np.exp(-50.0)], rtol=1e-12)


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        apply_activation("tanh", Tensor([0.0]))


def test_backward_examples():
    x = P([2.0])
    with Tape() as tape:
        loss = tsum(apply_activation("relu", x))
    backward(loss, tape)
    assert x.grad.tolist() == [1.0]
    x = P([0.0])
    with Tape() as tape:
        loss = tsum(apply_activation("sigmoid", x))
    backward(loss, tape)
    assert x.grad.tolist() == [0.25]


def test_backward_errors_and_disconnected():
    x, y = P([1.0, 2.0]), P([3.0])
    with Tape() as tape:
        out = mul(x, 2.0)
    with pytest.raises(GraphError):
        backward(out, tape)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    backward(loss, tape)
    assert y.grad is None or np.all(y.grad == 0)  # disconnected: zero, not an error


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        exp(Tensor([1e5]))


def test_no_tape_no_recording():
    x = P([1.0])
    y = mul(x, 3.0)
    with Tape() as tape:
        z = mul(x, 3.0)
    assert len(tape) == 1 and z.data[0] == y.data[0]


# -- convolution -------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(convolve2d(Tensor(x), Tensor(w)).data, x)


def test_conv_all_ones_hand_values():
    out = convolve2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1)))).data[0, :, :, 0]
    assert out[1, 1] == 9 and out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert out[0, 1] == 6


def test_conv_shapes_and_errors(rng):
    x = Tensor(rng.standard_normal((1, 4, 4, 2)))
    assert convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 5))), mode="transpose", stride=2).shape == (1, 8, 8, 5)
    assert convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 5))), stride=2).shape == (1, 2, 2, 5)
    assert convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 1))), mode="depthwise").shape == (1, 4, 4, 2)
    assert convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 5))), padding="valid").shape == (1, 2, 2, 5)
    with pytest.raises(ValueError):
        convolve2d(x, Tensor(rng.standard_normal((3, 3, 3, 5))))
    with pytest.raises(ValueError):
        convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 5))), stride=0)
    with pytest.raises(ValueError):
        convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 2))), mode="depthwise")


def _conv_oracle(x, w, b):
    """Direct zero-padded 'same' correlation, stride 1, by explicit loops."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    out = np.zeros((n, h, wd, cout))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i : i + kh, j : j + kw, :]
            out[:, i, j, :] = np.einsum("nabc,abcd->nd", patch, w)
    return out + b


def test_conv_matches_loop_oracle(rng):
    x, w, b = rng.standard_normal((2, 6, 5, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
    got = convolve2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(got, _conv_oracle(x, w, b), atol=1e-12)


def test_transpose_is_adjoint_of_strided_conv(rng):
    # <conv_s(x), y> == <x, convT_s(y)> for the same kernel with swapped channels
    x = rng.standard_normal((1, 8, 8, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    y = rng.standard_normal((1, 4, 4, 3))
    a = (convolve2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    wt = w.transpose(0, 1, 3, 2)
    b_ = (convolve2d(Tensor(y), Tensor(wt), stride=2, mode="transpose").data * x).sum()
    assert np.isclose(a, b_, rtol=1e-12)


def test_transpose_then_crop_restores_shape(rng):
    for h in (4, 6, 8):
        x = Tensor(rng.standard_normal((1, h, h, 2)))
        down = convolve2d(x, Tensor(rng.standard_normal((3, 3, 2, 2))), stride=2)
        up = convolve2d(down, Tensor(rng.standard_normal((3, 3, 2, 2))), stride=2, mode="transpose")
        assert crop_center(up, h, h).shape == x.shape


# -- normalization / softmax / pooling / crop --------------------------------


def test_layer_norm_examples():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(normalize("layer", Tensor([[1.0, 1.0, 1.0]]), g, b).data, 0)
    out = normalize("layer", Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [[1, -1]], atol=1e-9)


def test_batch_norm_examples():
    out = normalize("batch", Tensor(np.full((2, 3, 3, 2), 5.0)), Tensor([2.0, 2.0]), Tensor([3.0, 3.0]),
                    running_stats=RunningStats.create(2))
    assert np.allclose(out.data, 3.0)
    with pytest.raises(ValueError):
        normalize("layer", Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_batch_norm_running_stats_and_inference(rng):
    stats = RunningStats.create(2)
    x = rng.standard_normal((4, 3, 3, 2)) * 2 + 1
    normalize("batch", Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), running_stats=stats)
    flat = x.reshape(-1, 2)
    assert np.allclose(stats.mean, 0.1 * flat.mean(0))
    assert np.allclose(stats.var, 0.9 + 0.1 * flat.var(0, ddof=1))
    out = normalize("batch", Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5,
                    running_stats=stats, training=False)
    assert np.allclose(out.data, (x - stats.mean) / np.sqrt(stats.var + 1e-5))


def test_softmax_examples():
    assert np.allclose(softmax_channel(Tensor([[0.0, 0.0]])).data, [0.5, 0.5])
    big = softmax_channel(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == 1.0
    e = np.e
    assert np.allclose(softmax_channel(Tensor([[1.0, 0.0]])).data, [[e / (e + 1), 1 / (e + 1)]], atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=9))
def test_softmax_sums_to_one(logits):
    out = softmax_channel(Tensor(np.array(logits)[None, :])).data
    assert abs(out.sum() - 1) <= 1e-9 and (out >= 0).all()


def test_pool_concat_crop():
    assert pool_max2d(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))).data.item() == 4
    x = Tensor(np.arange(25.0).reshape(1, 5, 5, 1))
    assert pool_max2d(x).shape == (1, 2, 2, 1)
    c = crop_center(x, 3, 3).data[0, :, :, 0]
    assert np.array_equal(c, np.arange(25.0).reshape(5, 5)[1:4, 1:4])
    assert crop_offsets(6, 6, 4, 4) == (1, 1) and crop_offsets(7, 5, 4, 4) == (1, 0)
    assert crop_center(x, 5, 5).data is not None and np.array_equal(crop_center(x, 5, 5).data, x.data)
    with pytest.raises(ValueError):
        crop_center(x, 6, 5)
    a, b = Tensor(np.zeros((1, 2, 2, 3))), Tensor(np.zeros((1, 2, 2, 5)))
    assert concat_channels(a, b).shape == (1, 2, 2, 8)
    with pytest.raises(ValueError):
        concat_channels(a, Tensor(np.zeros((1, 3, 2, 5))))


# -- gradient checks: every differentiable op, 20 seeds ------------------------

OPS = {
    "add": lambda r: ((P(r.standard_normal((2, 3))), P(r.standard_normal(3))), lambda a, b: a + b),
    "sub": lambda r: ((P(r.standard_normal((2, 3))), P(r.standard_normal((2, 1)))), sub),
    "mul": lambda r: ((P(r.standard_normal((2, 3))), P(r.standard_normal((2, 3)))), mul),
    "div": lambda r: ((P(r.standard_normal((2, 3))), P(r.uniform(1, 2, (2, 3)))), div),
    "power": lambda r: ((P(r.uniform(0.5, 2, (4,))),), lambda a: power(a, 2.5)),
    "exp": lambda r: ((P(r.standard_normal(4)),), exp),
    "log": lambda r: ((P(r.uniform(0.5, 2, 4)),), log),
    "abs": lambda r: ((P(r.uniform(0.2, 1, 4) * r.choice([-1, 1], 4)),), absolute),
    "clip": lambda r: ((P(r.uniform(-2, 2, 6)),), lambda a: clip(a, -1.0, 1.0)),
    "matmul": lambda r: ((P(r.standard_normal((2, 3, 4))), P(r.standard_normal((4, 2)))), matmul),
    "mean": lambda r: ((P(r.standard_normal((3, 4))),), lambda a: mean(a, axis=1, keepdims=True)),
    "reshape": lambda r: ((P(r.standard_normal((2, 6))),), lambda a: reshape(a, (3, 4))),
    "transpose": lambda r: ((P(r.standard_normal((2, 3, 4))),), lambda a: transpose(a, (2, 0, 1))),
    "flip": lambda r: ((P(r.standard_normal((2, 5))),), lambda a: flip(a, 1)),
    "getitem": lambda r: ((P(r.standard_normal((4, 5))),), lambda a: getitem(a, (slice(1, 3), [0, 2, 2]))),
    "concat": lambda r: ((P(r.standard_normal((2, 3))), P(r.standard_normal((2, 2)))), lambda a, b: concat([a, b], -1)),
    "split": lambda r: ((P(r.standard_normal((4, 3))),), lambda a: stack_split(a, 2, 0)[1] * 2.0),
    "relu": lambda r: ((P(r.uniform(0.1, 1, 6) * r.choice([-1, 1], 6)),), lambda a: apply_activation("relu", a)),
    "silu": lambda r: ((P(r.standard_normal(6)),), lambda a: apply_activation("silu", a)),
    "sigmoid": lambda r: ((P(r.standard_normal(6)),), lambda a: apply_activation("sigmoid", a)),
    "softplus": lambda r: ((P(r.standard_normal(6) * 3),), lambda a: apply_activation("softplus", a)),
    "linear": lambda r: ((P(r.standard_normal((2, 3, 4))), P(r.standard_normal((4, 5))), P(r.standard_normal(5))), linear),
    "conv": lambda r: ((P(r.standard_normal((2, 5, 5, 2))), P(r.standard_normal((3, 3, 2, 3))), P(r.standard_normal(3))),
                       lambda x, w, b: convolve2d(x, w, b)),
    "conv_s2": lambda r: ((P(r.standard_normal((1, 6, 6, 2))), P(r.standard_normal((3, 3, 2, 2)))),
                          lambda x, w: convolve2d(x, w, stride=2)),
    "conv_t": lambda r: ((P(r.standard_normal((1, 3, 3, 2))), P(r.standard_normal((3, 3, 2, 2))), P(r.standard_normal(2))),
                         lambda x, w, b: convolve2d(x, w, b, stride=2, mode="transpose")),
    "dwconv": lambda r: ((P(r.standard_normal((2, 4, 4, 3))), P(r.standard_normal((3, 3, 3, 1))), P(r.standard_normal(3))),
                         lambda x, w, b: convolve2d(x, w, b, mode="depthwise")),
    "batchnorm": lambda r: ((P(r.standard_normal((3, 2, 2, 3))), P(r.uniform(0.5, 2, 3)), P(r.standard_normal(3))),
                            lambda x, g, b: normalize("batch", x, g, b, running_stats=RunningStats.create(3))),
    "batchnorm_eval": lambda r: ((P(r.standard_normal((2, 2, 2, 3))), P(r.uniform(0.5, 2, 3)), P(r.standard_normal(3))),
                                 lambda x, g, b: normalize("batch", x, g, b, running_stats=RunningStats.create(3), training=False)),
    "layernorm": lambda r: ((P(r.standard_normal((2, 3, 4))), P(r.uniform(0.5, 2, 4)), P(r.standard_normal(4))),
                            lambda x, g, b: normalize("layer", x, g, b)),
    "softmax": lambda r: ((P(r.standard_normal((2, 3, 4))),), softmax_channel),
    "pool": lambda r: ((P(r.permutation(50).reshape(1, 5, 5, 2) * 0.1),), pool_max2d),
    "concat_channels": lambda r: ((P(r.standard_normal((1, 2, 2, 2))), P(r.standard_normal((1, 2, 2, 3)))), concat_channels),
    "crop": lambda r: ((P(r.standard_normal((1, 5, 6, 2))),), lambda a: crop_center(a, 3, 3)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    for seed in range(20):
        r = np.random.default_rng(seed)
        inputs, fn = OPS[name](r)
        w = r.standard_normal(fn(*inputs).shape)
        err = check_gradients(lambda: tsum(mul(fn(*inputs), w)), list(inputs))
        assert err <= 1e-4, (name, seed, err)


# -- FFT -----------------------------------------------------------------------


def test_fft_examples():
    assert np.allclose(fft_real(np.array([1.0, 0, 0, 0])), np.ones(3))
    spec = fft_real(np.full(6, 2.5))
    assert np.isclose(spec[0], 15.0) and np.allclose(spec[1:], 0, atol=1e-12)
    x = np.random.default_rng(17).standard_normal(17)
    back = ifft_real(fft_real(x), 17)
    assert np.linalg.norm(back - x) / np.linalg.norm(x) <= 1e-10


def test_fft_against_numpy_oracle(rng):
    for n in list(range(1, 40)) + [64, 100, 127, 256, 500]:
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        assert np.allclose(fft(x), np.fft.fft(x), atol=1e-9 * max(n, 1))
        assert np.allclose(ifft(x), np.fft.ifft(x), atol=1e-9)
        r = rng.standard_normal(n)
        assert np.allclose(fft_real(r), np.fft.rfft(r), atol=1e-9 * max(n, 1))


def test_fft_round_trip_all_lengths(rng):
    for n in range(1, 513):
        x = rng.standard_normal(n)
        assert np.linalg.norm(ifft_real(fft_real(x), n) - x) <= 1e-10 * np.linalg.norm(x)


def test_next_pow2():
    assert [next_pow2(v) for v in (1, 2, 3, 5, 8, 9)] == [1, 2, 4, 8, 8, 16]


# -- optimizers ------------------------------------------------------------------


def test_sgd_examples():
    assert optimizer_step("sgd", [np.array(1.0)], [np.array(2.0)], 0.1)[0] == pytest.approx(0.8)
    assert optimizer_step("sgd", [np.array([1.0, 2.0])], [np.zeros(2)], 0.1)[0].tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        optimizer_step("sgd", [np.array(1.0)], [np.array(1.0)], 0.0)
    with pytest.raises(ValueError):
        optimizer_step("adam", [np.array(1.0)], [np.array(1.0)], AdamHyper(lr=-1))


def test_adam_first_step_magnitude():
    h = AdamHyper(lr=0.01)
    for g in (1e-3, 0.5, 40.0):
        new = optimizer_step("adam", [np.array([1.0])], [np.array([g])], h)[0]
        assert abs((1.0 - new[0]) - 0.01) < 1e-6
    same = optimizer_step("adam", [np.array([1.0])], [np.array([0.0])], h)[0]
    assert same[0] == 1.0


def test_adam_class_matches_functional(rng):
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    opt = Adam([p], AdamHyper(lr=0.05))
    ref, state = [p.data.copy()], {}
    for _ in range(5):
        g = rng.standard_normal(4)
        p.grad = g.copy()
        opt.step()
        ref = optimizer_step("adam", ref, [g], AdamHyper(lr=0.05), state)
    assert np.allclose(p.data, ref[0], atol=1e-15)
    s = SGD([p], 0.1)
    p.grad = np.ones(4)
    before = p.data.copy()
    s.step()
    assert np.allclose(p.data, before - 0.1)


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {
        "enc.0.conv1.w": rng.standard_normal((3, 3, 1, 4)),
        "f32": rng.standard_normal(5).astype(np.float32),
        "train.epoch": np.array([3], dtype=np.int64),
        "bytes": np.arange(7, dtype=np.uint8),
        "scalar": np.array(2.5),
        "ünï": np.zeros((0, 2)),
    }
    blob = encode_checkpoint(arrays)
    assert blob[:4] == b"MAHW"
    back = decode_checkpoint(blob)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])
    assert encode_checkpoint(back) == blob
    save_checkpoint(tmp_path / "a.mahw", arrays)
    assert (tmp_path / "a.mahw").read_bytes() == blob
    assert list(load_checkpoint(tmp_path / "a.mahw")) == list(arrays)


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + b"\0" * 8)
    blob = encode_checkpoint({"a": np.ones(3)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-3])


def test_ops_deterministic(rng):
    x, w = rng.standard_normal((2, 6, 6, 3)), rng.standard_normal((3, 3, 3, 4))
    a = convolve2d(Tensor(x), Tensor(w)).data
    b = convolve2d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


def test_float32_preserved(rng):
    x = rng.standard_normal((1, 4, 4, 2)).astype(np.float32)
    w = Tensor(rng.standard_normal((3, 3, 2, 2)).astype(np.float32))
    assert convolve2d(x, w).dtype == np.float32
    assert softmax_channel(x).dtype == np.float32

import io
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vidt.tensor as T
from vidt.errors import CheckpointVersionError, ConfigurationError, DimensionError, ParseError
from vidt.tensor.gradcheck import check_gradients, numerical_grad

TOL = 1e-4


@pytest.fixture(autouse=True)
def _double():
    with T.default_dtype(np.float64):
        yield


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def assert_grads(fn, inputs):
    errs = check_gradients(fn, inputs)
    assert errs and max(errs) < TOL, errs


SHAPES = [(3,), (2, 3), (4, 1), (2, 3, 4), (1, 5, 2)]


# elementwise ops, each on five shapes
UNARY = {
    "exp": T.exp,
    "log": lambda a: T.log(a * a + 0.5),
    "sqrt": lambda a: T.sqrt(a * a + 0.5),
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "gelu": T.gelu,
    "relu": T.relu,
    "abs": T.abs,
    "log_sigmoid": T.log_sigmoid,
    "power": lambda a: T.power(a * a + 1.0, 1.5),
    "neg": T.neg,
    "clip": lambda a: T.clip(a, -0.5, 0.5),
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1),
    "sum_axis": lambda a: T.sum(a, axis=-1) * T.sum(a, axis=-1),
    "mean": lambda a: T.mean(a * a, axis=0),
    "transpose": lambda a: T.transpose(a) * T.Tensor(np.arange(a.size, dtype=float).reshape(a.shape[::-1])),
    "reshape": lambda a: T.reshape(a, (-1,)) * T.Tensor(np.arange(a.size, dtype=float)),
    "bce": lambda a: T.bce_with_logits(a * 3, np.full(a.shape, 0.3)),
}


def _nonsmooth_safe(rng, shape):
    # keep values away from relu/abs/clip kinks
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.1, x)
    return T.Tensor(x, requires_grad=True)


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_gradients(name, shape):
    rng = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    assert_grads(UNARY[name], [_nonsmooth_safe(rng, shape)])


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, b * b + 0.5),
    "maximum": T.maximum,
    "minimum": T.minimum,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shapes", [((3,), (3,)), ((2, 3), (3,)), ((4, 1), (1, 5)), ((2, 3, 4), (2, 1, 4)), ((5,), (1,))])
def test_binary_gradients_with_broadcast(name, shapes):
    rng = np.random.default_rng(7)
    a = leaf(rng, shapes[0])
    b = T.Tensor(rng.uniform(-1, 1, size=shapes[1]) + 0.05, requires_grad=True)
    assert_grads(BINARY[name], [a, b])


@pytest.mark.parametrize("shapes", [((2, 3), (3, 4)), ((1, 1), (1, 1)), ((2, 2, 3), (2, 3, 2)), ((3, 2, 4), (4, 5)), ((5,), (5, 2))])
def test_matmul_gradients(shapes):
    rng = np.random.default_rng(1)
    assert_grads(T.matmul, [leaf(rng, shapes[0]), leaf(rng, shapes[1])])


def test_matmul_examples():
    eye = T.Tensor(np.eye(3))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(3))
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_grad_of_sum_is_b_transpose():
    rng = np.random.default_rng(2)
    a, b = leaf(rng, (3, 4)), leaf(rng, (4, 2))
    T.matmul(a, b).sum().backward()
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, atol=1e-12)
    np.testing.assert_allclose(a.grad, numerical_grad(lambda x, y: T.matmul(x, y), [a, b], 0), atol=1e-6)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


@pytest.mark.parametrize("shape", [(3, 4), (2, 5), (1, 2, 6), (4, 3), (2, 2, 2)])
def test_linear_gradients(shape):
    rng = np.random.default_rng(3)
    x, w, b = leaf(rng, shape), leaf(rng, (shape[-1], 3)), leaf(rng, (3,))
    assert_grads(T.linear, [x, w, b])


@pytest.mark.parametrize("shape", [(2, 4), (3, 5), (1, 2, 6), (2, 2, 3), (1, 8)])
def test_layer_norm_gradients(shape):
    rng = np.random.default_rng(4)
    x, g, b = leaf(rng, shape), leaf(rng, shape[-1:]), leaf(rng, shape[-1:])
    assert_grads(lambda x, g, b: T.layer_norm(x, g, b), [x, g, b])


def test_layer_norm_examples():
    x = T.Tensor([[1.0, -1.0]])
    out = T.layer_norm(x, T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)
    const = T.layer_norm(T.Tensor([[3.0, 3.0, 3.0]]), T.Tensor([2.0, 2.0, 2.0]), T.Tensor([0.5, -1.0, 0.0]))
    np.testing.assert_allclose(const.data, [[0.5, -1.0, 0.0]])


@pytest.mark.parametrize("shape,groups", [((1, 2, 2, 4), 2), ((2, 3, 1, 6), 3), ((1, 1, 4, 4), 1), ((1, 2, 3, 8), 4), ((2, 2, 2, 2), 2)])
def test_group_norm_gradients(shape, groups):
    rng = np.random.default_rng(5)
    x, g, b = leaf(rng, shape), leaf(rng, shape[-1:]), leaf(rng, shape[-1:])
    weights = T.Tensor(rng.normal(size=shape))
    assert_grads(lambda x, g, b: T.group_norm(x, groups, g, b) * weights, [x, g, b])


def test_softmax_properties():
    rng = np.random.default_rng(6)
    x = T.Tensor(rng.normal(size=(20, 7)) * 30)
    s = T.softmax(x, axis=-1).data
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(-1) - 1.0)) < 1e-12
    np.testing.assert_allclose(T.softmax(T.zeros((5,))).data, np.full(5, 0.2))
    sat = T.softmax(T.Tensor([1e4, 0.0, 0.0])).data
    assert np.isfinite(sat).all() and sat[0] == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_softmax_sums_to_one(values):
    s = T.softmax(T.Tensor(np.array(values))).data
    assert abs(s.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("shape", [(1, 3, 3, 2), (2, 4, 4, 1), (1, 5, 3, 3), (1, 2, 2, 2), (1, 4, 5, 2)])
@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_gradients(shape, k):
    rng = np.random.default_rng(8)
    x, w, b = leaf(rng, shape), leaf(rng, (k, k, shape[-1], 2)), leaf(rng, (2,))
    assert_grads(T.conv2d, [x, w, b])


def test_conv2d_examples():
    x = T.Tensor(np.random.default_rng(0).normal(size=(1, 4, 4, 3)))
    eye = T.Tensor(np.eye(3).reshape(1, 1, 3, 3))
    np.testing.assert_array_equal(T.conv2d(x, eye).data, x.data)
    ones = T.Tensor(np.ones((3, 3, 1, 1)))
    out = T.conv2d(T.Tensor(np.full((1, 5, 5, 1), 2.0)), ones).data
    assert out[0, 2, 2, 0] == 18.0
    with pytest.raises(ConfigurationError):
        T.conv2d(x, T.Tensor(np.ones((5, 5, 3, 1))))


def test_bilinear_sample_examples():
    m = np.arange(12, dtype=float).reshape(1, 3, 4, 1)
    pts = T.Tensor(np.array([[[2.0, 1.0], [0.5, 0.5], [-5.0, 0.0]]]))
    out = T.bilinear_sample(T.Tensor(m), pts).data[0, :, 0]
    assert out[0] == m[0, 1, 2, 0]
    assert out[1] == pytest.approx(m[0, :2, :2, 0].mean())
    assert out[2] == 0.0


@pytest.mark.parametrize("hw", [(3, 4), (5, 5), (2, 6), (4, 2), (6, 3)])
def test_bilinear_sample_gradients(hw):
    rng = np.random.default_rng(9)
    h, w = hw
    maps = leaf(rng, (2, h, w, 3))
    pts = rng.uniform(-0.8, [w - 0.2, h - 0.2], size=(2, 5, 2))
    frac = pts - np.floor(pts)
    pts = np.where((frac < 0.05) | (frac > 0.95), pts + 0.3, pts)
    assert_grads(T.bilinear_sample, [maps, T.Tensor(pts, requires_grad=True)])


@pytest.mark.parametrize("size,mode", [((4, 6), "bilinear"), ((3, 3), "bilinear"), ((6, 2), "bilinear"), ((4, 6), "nearest"), ((5, 7), "bilinear")])
def test_upsample_gradients(size, mode):
    rng = np.random.default_rng(10)
    x = leaf(rng, (1, 2, 3, 2))
    weights = T.Tensor(rng.normal(size=(1,) + size + (2,)))
    assert_grads(lambda x: T.upsample(x, size, mode) * weights, [x])


def test_upsample_constant_preserved():
    x = T.Tensor(np.full((1, 2, 3, 1), 4.0))
    np.testing.assert_allclose(T.upsample(x, (8, 9)).data, 4.0)


@pytest.mark.parametrize("axis", [0, 1, -1])
def test_concat_stack_gradients(axis):
    rng = np.random.default_rng(11)
    a, b = leaf(rng, (2, 3)), leaf(rng, (2, 3))
    w = T.Tensor(rng.normal(size=(2, 3)))
    assert_grads(lambda a, b: T.concat([a, b * w], axis=axis), [a, b])
    assert_grads(lambda a, b: T.stack([a, b * w], axis=axis), [a, b])


@pytest.mark.parametrize("shape", [(4,), (3, 2), (2, 2, 2), (5, 1), (1, 6)])
def test_shape_ops_gradients(shape):
    rng = np.random.default_rng(12)
    a = leaf(rng, shape)
    w = T.Tensor(rng.normal(size=shape[:-1] + (shape[-1] * 2,)))
    assert_grads(lambda a: T.repeat_last(a, 2) * w, [a])
    wr = T.Tensor(rng.normal(size=shape))
    assert_grads(lambda a: T.roll(a, 1, axis=0) * wr, [a])
    assert_grads(lambda a: T.pad(a, [(1, 0)] * len(shape)) * T.pad(a, [(0, 1)] * len(shape)), [a])
    idx = np.array([0, 0, shape[0] - 1])
    assert_grads(lambda a: T.take(a, idx, axis=0) * T.take(a, idx, axis=0), [a])
    assert_grads(lambda a: a[..., :1] * 3.0 + a[np.array([0, 0])].sum(), [a])


def test_where_gradient():
    rng = np.random.default_rng(13)
    a, b = leaf(rng, (3, 4)), leaf(rng, (3, 4))
    cond = rng.random((3, 4)) > 0.5
    assert_grads(lambda a, b: T.where(cond, a * a, b), [a, b])


def test_dropout_seeded_and_identity_at_inference():
    x = T.Tensor(np.ones((100,)), requires_grad=True)
    assert T.dropout(x, 0.5, None, training=False) is x
    a = T.dropout(x, 0.5, np.random.default_rng(3), training=True).data
    b = T.dropout(x, 0.5, np.random.default_rng(3), training=True).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    rng = np.random.default_rng(3)
    mask_draw = np.random.default_rng(3)
    keep = (mask_draw.random(x.shape) >= 0.5) * 2.0
    y = T.dropout(x, 0.5, rng, training=True)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, keep)
    with pytest.raises(ConfigurationError):
        T.dropout(x, 0.5, None, training=True)


def test_sine_encoding_table():
    tab = T.sine_encoding_2d(4, 6, 16)
    assert tab.shape == (4, 6, 16)
    # rows vary only along the first half, columns along the second
    assert np.allclose(tab[:, 0, :8], tab[:, 5, :8])
    assert np.allclose(tab[0, :, 8:], tab[3, :, 8:])
    assert np.all(np.abs(tab) <= 1.0)
    with pytest.raises(ConfigurationError):
        T.sine_encoding_2d(2, 2, 6)
    assert T.sine_encoding_1d(5, 8).shape == (5, 8)


def test_backward_populates_every_requires_grad_tensor():
    rng = np.random.default_rng(14)
    a, b = leaf(rng, (3,)), leaf(rng, (3,))
    c = a * b
    d = c + a
    tape = d.sum().backward()
    for t in (a, b, c, d):
        assert t.grad is not None and t.grad.shape == t.shape
    ids = tape.visit_log
    assert len(ids) == len(set(ids))


def test_tape_visits_in_reverse_topological_order():
    a = T.Tensor(np.ones(2), requires_grad=True)
    b = a * 2.0
    c = b + a
    e = c * b
    tape = T.GradTape(e.sum())
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    tape.run()
    assert tape.visit_log == [id(n) for n in reversed(tape.nodes) if n.requires_grad]
    np.testing.assert_allclose(a.grad, 12.0)  # e = (3a)(2a) = 6a^2


def test_forward_replay_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = T.Tensor(rng.normal(size=(8, 16)))
        w = T.Tensor(rng.normal(size=(16, 16)))
        h = T.gelu(T.layer_norm(T.matmul(x, w), None, None))
        return T.softmax(h, axis=-1).data
    np.testing.assert_array_equal(run(), run())


def test_no_grad_blocks_tracking():
    a = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        b = a * 3.0
    assert not b.requires_grad


def test_count_matmul_macs():
    with T.count_matmul_macs() as c:
        T.matmul(T.zeros((2, 3, 4)), T.zeros((4, 5)))
        T.linear(T.zeros((7, 4)), T.zeros((4, 2)))
    assert c.total == 2 * 3 * 5 * 4 + 7 * 2 * 4


@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.sampled_from(["<f4", "<f8", "<i8", "u1", "bool"]))
@settings(max_examples=40, deadline=None)
def test_serialize_round_trip(shape, dtype):
    arr = (np.random.default_rng(0).normal(size=shape) * 10).astype(dtype)
    back = T.tensor_from_bytes(T.tensor_to_bytes(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_serialize_header_layout_and_errors():
    blob = T.tensor_to_bytes(np.arange(6, dtype="<f8").reshape(2, 3))
    assert blob[:4] == b"VTEN"
    assert blob[4:6] == (1).to_bytes(2, "little")
    assert blob[6] == 2 and blob[7] == 2
    assert int.from_bytes(blob[8:16], "little") == 2
    with pytest.raises(ParseError):
        T.tensor_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ParseError):
        T.tensor_from_bytes(blob[:-3])
    bumped = blob[:4] + (9).to_bytes(2, "little") + blob[6:]
    with pytest.raises(CheckpointVersionError):
        T.read_tensor(io.BytesIO(bumped))


def test_module_state_dict_round_trip():
    rng = np.random.default_rng(0)
    mlp = T.MLP([4, 8, 2], rng)
    other = T.MLP([4, 8, 2], np.random.default_rng(1))
    other.load_state_dict(mlp.state_dict())
    x = T.Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(mlp(x).data, other(x).data)
    assert mlp.num_parameters() == 4 * 8 + 8 + 8 * 2 + 2

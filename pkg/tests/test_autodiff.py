import numpy as np
import pytest

from graphmot import autodiff as ad
from graphmot.autodiff import AdamW, NonFiniteError, Parameter, ShapeError, Tape, Tensor


def fd_check(fn, shapes, seed=0, eps=1e-6, tol=1e-7, positive=()):
    """Compare tape gradients of sum(R * fn(*params)) with central differences."""
    rng = np.random.default_rng(seed)
    params = []
    for k, s in enumerate(shapes):
        v = rng.standard_normal(s)
        if k in positive:
            v = np.abs(v) + 0.5
        params.append(Parameter(f"p{k}", v))
    out_shape = fn(*params).shape
    R = rng.standard_normal(out_shape)

    def loss():
        return ad.sum(ad.mul(fn(*params), R))

    with Tape() as tape:
        ad.backward(loss(), tape)
    for p in params:
        flat = p.value.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss().item()
            flat[i] = old - eps
            down = loss().item()
            flat[i] = old
            num[i] = (up - down) / (2 * eps)
        np.testing.assert_allclose(p.grad.reshape(-1), num, rtol=1e-6, atol=tol, err_msg=p.name)


SEG = np.array([0, 0, 1, 2, 2, 2, 4])


@pytest.mark.parametrize(
    "name,fn,shapes,positive",
    [
        ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], ()),
        ("add_broadcast", lambda a, b: ad.add(a, b), [(3, 4), (4,)], ()),
        ("sub_broadcast", lambda a, b: ad.sub(a, b), [(3, 1), (3, 4)], ()),
        ("mul_broadcast", lambda a, b: ad.mul(a, b), [(2, 3, 4), (3, 1)], ()),
        ("scale", lambda a: ad.scale(a, -2.5), [(3, 2)], ()),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)], ()),
        ("row_gather", lambda a: ad.row_gather(a, np.array([2, 0, 2, 1])), [(3, 4)], ()),
        ("index_add_rows", lambda a: ad.index_add_rows(a, np.array([1, 1, 0, 3]), 5), [(4, 3)], ()),
        ("relu", lambda a: ad.relu(a), [(5, 3)], ()),
        ("sigmoid", lambda a: ad.sigmoid(a), [(5,)], ()),
        ("log_sigmoid", lambda a: ad.log_sigmoid(ad.scale(a, 8.0)), [(6,)], ()),
        ("log", lambda a: ad.log(a), [(4,)], (0,)),
        ("exp", lambda a: ad.exp(a), [(4,)], ()),
        ("smooth_l1", lambda a: ad.smooth_l1(ad.scale(a, 2.0), beta=1.0), [(8,)], ()),
        ("mean", lambda a: ad.mean(a), [(3, 4)], ()),
        ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)], ()),
        ("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b), [(4, 6), (6,), (6,)], ()),
        ("linear", lambda x, w, b: ad.linear(x, w, b), [(4, 3), (3, 5), (5,)], ()),
        ("linear_nobias", lambda x, w: ad.linear(x, w), [(4, 3), (3, 5)], ()),
        ("segment_softmax_1d", lambda a: ad.segment_softmax(a, SEG, 5), [(7,)], ()),
        ("segment_softmax_2d", lambda a: ad.segment_softmax(a, SEG, 5), [(7, 3)], ()),
        ("dropout", lambda a: ad.dropout(a, 0.3, seed=5, train=True), [(6, 4)], ()),
    ],
)
def test_op_gradients(name, fn, shapes, positive):
    fd_check(fn, shapes, positive=positive)


def test_composite_gradient_with_reuse():
    # a value used along several paths must accumulate every contribution
    def fn(x, w):
        h = ad.sigmoid(ad.linear(x, w))
        gathered = ad.index_add_rows(ad.row_gather(h, np.array([0, 0, 1])), np.array([2, 1, 2]), 3)
        return ad.add(ad.add(ad.mul(h, h), h), gathered)

    fd_check(fn, [(3, 4), (4, 4)])


def test_segment_softmax_values():
    logits = np.array([1.0, 2.0, 0.5, 1000.0, 1001.0, -3.0])
    seg = np.array([0, 0, 1, 2, 2, 2])
    out = ad.segment_softmax(Tensor(logits), seg, 4).value
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(out[:2], e / e.sum())
    assert out[2] == 1.0
    big = np.exp(np.array([1000.0, 1001.0, -3.0]) - 1001.0)
    np.testing.assert_allclose(out[3:], big / big.sum())
    sums = np.bincount(seg, weights=out, minlength=4)
    np.testing.assert_allclose(sums[:3], 1.0, atol=1e-15)


def test_layer_norm_matches_definition():
    x = np.random.default_rng(1).standard_normal((5, 7))
    g, b = np.linspace(0.5, 2, 7), np.linspace(-1, 1, 7)
    out = ad.layer_norm(Tensor(x), Tensor(g), Tensor(b)).value
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * g + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_dropout_semantics():
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.5, seed=1, train=False) is x
    y = ad.dropout(x, 0.25, seed=1, train=True).value
    kept = y != 0
    assert np.allclose(y[kept], 1 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.01
    np.testing.assert_array_equal(y, ad.dropout(x, 0.25, seed=1, train=True).value)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, seed=1, train=True)


def test_no_recording_without_tape_or_tracking():
    p = Parameter("w", np.ones((2, 2)))
    assert not ad.matmul(p, p).tracked
    with Tape() as tape:
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert len(tape) == 0
        ad.matmul(p, p)
        assert len(tape) == 1


def test_backward_requires_scalar_and_tape():
    p = Parameter("w", np.ones(3))
    with Tape() as tape:
        y = ad.scale(p, 2.0)
        with pytest.raises(ValueError):
            ad.backward(y, tape)
    with pytest.raises(RuntimeError):
        ad.backward(ad.sum(Tensor(np.ones(2))))


def test_gradients_accumulate_across_backward_calls():
    p = Parameter("w", np.array([1.0, 2.0]))
    for _ in range(2):
        with Tape() as tape:
            ad.backward(ad.sum(ad.mul(p, p)), tape)
    np.testing.assert_allclose(p.grad, 2 * 2 * p.value)
    p.zero_grad()
    assert not p.grad.any()


def test_nonfinite_detection():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_adamw_matches_reference_update():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    p = Parameter("w", w0.copy())
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.05)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, 1):
        p.grad[...] = g
        opt.step()
        # decoupled decay, then the bias-corrected Adam step
        w = w * (1 - 0.1 * 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
        np.testing.assert_allclose(p.value, w, rtol=1e-14, atol=1e-15)


def test_adamw_zero_lr_is_identity():
    p = Parameter("w", np.arange(4.0))
    opt = AdamW([p], lr=0.0)
    p.grad[...] = 1.0
    opt.step()
    np.testing.assert_array_equal(p.value, np.arange(4.0))


def test_checkpoint_round_trip(tmp_path):
    arrays = [("b", np.arange(6.0).reshape(2, 3)), ("a", np.array([np.pi, -0.0, 1e-300]))]
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, arrays, {"note": "hi"})
    header, loaded = ad.load_checkpoint(path)
    assert header["meta"] == {"note": "hi"}
    for name, a in arrays:
        assert loaded[name].tobytes() == a.tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"GMCKPT01"
    ad.save_checkpoint(tmp_path / "y.ckpt", arrays, {"note": "hi"})
    assert (tmp_path / "y.ckpt").read_bytes() == raw
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + raw[4:])
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path / "bad.ckpt")


def test_assign_arrays_checks_names_and_shapes():
    p = Parameter("w", np.zeros((2, 2)))
    ad.assign_arrays([p], {"w": np.ones((2, 2)), "adam.m.w": np.zeros((2, 2))})
    assert p.value.sum() == 4
    with pytest.raises(ValueError):
        ad.assign_arrays([p], {"w": np.ones(4)})
    with pytest.raises(ValueError):
        ad.assign_arrays([p], {"v": np.ones((2, 2))})

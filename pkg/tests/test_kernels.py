"""Kernel backends: numpy/compiled parity and per-kernel gradient checks."""

import numpy as np
import pytest

from blocklm import ops
from blocklm.autograd import Tensor, parameter
from blocklm.backend import available_backends
from blocklm.layers import rotary_tables
from conftest import check_op_grads

BACKENDS = available_backends()
needs_compiled = pytest.mark.skipif("compiled" not in BACKENDS,
                                    reason="compiled extension not built")


def _p(rng, *shape):
    return parameter(rng.normal(size=shape).astype(np.float32))


# --- backend parity ---------------------------------------------------------

@needs_compiled
def test_backend_parity_rowwise(rng):
    py, cy = BACKENDS["numpy"], BACKENDS["compiled"]
    x = rng.normal(size=(37, 19)).astype(np.float32)
    np.testing.assert_allclose(py.softmax_fwd(x), cy.softmax_fwd(x), atol=1e-6)
    y = py.softmax_fwd(x)
    dy = rng.normal(size=x.shape).astype(np.float32)
    np.testing.assert_allclose(py.softmax_bwd(y, dy), cy.softmax_bwd(y, dy), atol=1e-6)

    g = rng.normal(size=19).astype(np.float32)
    b = rng.normal(size=19).astype(np.float32)
    y1, m1, r1 = py.layernorm_fwd(x, g, b, 1e-5)
    y2, m2, r2 = cy.layernorm_fwd(x, g, b, 1e-5)
    np.testing.assert_allclose(y1, y2, atol=1e-5)
    np.testing.assert_allclose(m1, m2, atol=1e-6)
    d1 = py.layernorm_bwd(x, g, m1, r1, dy)
    d2 = cy.layernorm_bwd(x, g, m2, r2, dy)
    for a, bb in zip(d1, d2):
        np.testing.assert_allclose(a, bb, atol=1e-4)


@needs_compiled
def test_backend_parity_masked_softmax(rng):
    py, cy = BACKENDS["numpy"], BACKENDS["compiled"]
    s = rng.normal(size=(6, 5, 9)).astype(np.float32)
    for offset, causal in [(0, True), (4, True), (2, True), (0, False)]:
        a = py.masked_softmax_fwd(s, offset, causal)
        b = cy.masked_softmax_fwd(s, offset, causal)
        np.testing.assert_allclose(a, b, atol=1e-6)
        dp = rng.normal(size=s.shape).astype(np.float32)
        np.testing.assert_allclose(py.masked_softmax_bwd(a, dp, offset, causal),
                                   cy.masked_softmax_bwd(b, dp, offset, causal),
                                   atol=1e-5)


@needs_compiled
def test_backend_parity_gelu_embedding_adamw(rng):
    py, cy = BACKENDS["numpy"], BACKENDS["compiled"]
    x = rng.normal(size=(50, 7)).astype(np.float32)
    y1, t1 = py.gelu_fwd(x.copy())
    y2, t2 = cy.gelu_fwd(x.copy())
    np.testing.assert_allclose(y1, y2, atol=1e-6)
    dy = rng.normal(size=x.shape).astype(np.float32)
    np.testing.assert_allclose(py.gelu_bwd(x, t1, dy), cy.gelu_bwd(x, t2, dy), atol=1e-5)

    ids = rng.integers(0, 11, size=40)
    dyE = rng.normal(size=(40, 5)).astype(np.float32)
    ta = np.zeros((11, 5), np.float32)
    tb = np.zeros((11, 5), np.float32)
    py.embedding_grad(ta, ids, dyE)
    cy.embedding_grad(tb, ids, dyE)
    np.testing.assert_allclose(ta, tb, atol=1e-5)

    p = rng.normal(size=300).astype(np.float32)
    g = rng.normal(size=300).astype(np.float32)
    state = [p.copy(), np.zeros_like(p), np.zeros_like(p)]
    state2 = [p.copy(), np.zeros_like(p), np.zeros_like(p)]
    for step in (1, 2, 3):
        py.adamw_update(state[0], g, state[1], state[2], 1e-3, 0.9, 0.95, 1e-8, 0.1, step)
        cy.adamw_update(state2[0], g, state2[1], state2[2], 1e-3, 0.9, 0.95, 1e-8, 0.1, step)
    np.testing.assert_allclose(state[0], state2[0], atol=1e-6)


# --- spec examples -----------------------------------------------------------

def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = ops.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_symmetry():
    out = ops.softmax(Tensor(np.zeros((1, 3), np.float32)))
    np.testing.assert_allclose(out.data, np.full((1, 3), 1 / 3), atol=1e-7)


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(4, 3, 9)).astype(np.float32) * 5)
    y = ops.softmax(x)
    np.testing.assert_allclose(y.data.sum(-1), np.ones((4, 3)), atol=1e-6)


def test_layernorm_row_statistics(rng):
    x = Tensor(rng.normal(size=(4, 8)).astype(np.float32) * 3 + 1)
    y = ops.layernorm(x, Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32)))
    # direct mean/variance computation as the oracle
    np.testing.assert_allclose(y.data.mean(axis=1), np.zeros(4), atol=1e-5)
    np.testing.assert_allclose(y.data.var(axis=1), np.ones(4), atol=1e-3)


def test_shape_errors_name_extents(rng):
    from blocklm.errors import ShapeError

    a, b = Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((4, 5), np.float32))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(a, b)
    with pytest.raises(ShapeError, match="broadcast"):
        ops.add(Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((4,), np.float32)))


def test_rotary_preserves_norm(rng):
    cos, sin = rotary_tables(16, 8)
    x = Tensor(rng.normal(size=(2, 2, 16, 8)).astype(np.float32))
    y = ops.rotary(x, cos, sin)
    np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1),
                               np.linalg.norm(x.data, axis=-1), rtol=1e-5)


def test_rotary_zero_position_is_identity(rng):
    cos, sin = rotary_tables(4, 8)
    x = Tensor(rng.normal(size=(1, 1, 1, 8)).astype(np.float32))
    y = ops.rotary(x, cos[:1], sin[:1])
    np.testing.assert_allclose(y.data, x.data, atol=1e-7)


def test_causal_attention_upper_triangle_zero(rng):
    q = Tensor(rng.normal(size=(2, 2, 6, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(2, 2, 6, 4)).astype(np.float32))
    v = Tensor(rng.normal(size=(2, 2, 6, 4)).astype(np.float32))
    rec = []
    ops.attention(q, k, v, causal=True, offset=0, record_to=rec)
    probs = rec[0]
    iu = np.triu_indices(6, 1)
    assert np.all(probs[..., iu[0], iu[1]] == 0.0)
    np.testing.assert_allclose(probs.sum(-1), np.ones((2, 2, 6)), atol=1e-5)


# --- gradient checks for every kernel ---------------------------------------

def test_grad_matmul_2d_and_batched(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    proj = Tensor(rng.normal(size=(3, 2)).astype(np.float32))

    def build():
        out = ops.mul(ops.matmul(a, b), proj)
        return ops.cross_entropy(ops.reshape(out, (3, 2)), np.zeros(3, dtype=int))[0]

    check_op_grads(build, [a, b])
    a4, b4 = _p(rng, 2, 2, 3, 4), _p(rng, 2, 2, 4, 3)
    proj4 = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))

    def build4():
        out = ops.mul(ops.matmul(a4, b4), proj4)
        return ops.cross_entropy(ops.reshape(out, (12, 3)), np.zeros(12, dtype=int))[0]

    check_op_grads(build4, [a4, b4])


def _scalarize(out: Tensor) -> Tensor:
    flat = int(np.prod(out.shape[:-1]))
    width = out.shape[-1]
    if width == 1:
        two = ops.concat([ops.reshape(out, (flat, 1))] * 2, axis=1)
        return ops.cross_entropy(two, np.zeros(flat, dtype=int))[0]
    return ops.cross_entropy(ops.reshape(out, (flat, width)),
                             np.zeros(flat, dtype=int))[0]


@pytest.mark.parametrize("name", ["add", "mul", "gelu", "softmax", "layernorm",
                                  "rotary", "attention", "linear", "embedding",
                                  "narrow_concat", "scale_transpose"])
def test_grad_per_kernel(name, rng):
    if name == "add":
        a, b = _p(rng, 3, 5), _p(rng, 5)
        build = lambda: _scalarize(ops.add(a, b))
        params = [a, b]
    elif name == "mul":
        a, b = _p(rng, 3, 5), _p(rng, 3, 1)
        build = lambda: _scalarize(ops.mul(a, b))
        params = [a, b]
    elif name == "gelu":
        a = _p(rng, 4, 5)
        build = lambda: _scalarize(ops.gelu(a))
        params = [a]
    elif name == "softmax":
        a = _p(rng, 4, 5)
        build = lambda: _scalarize(ops.softmax(a))
        params = [a]
    elif name == "layernorm":
        a, g, b = _p(rng, 4, 6), _p(rng, 6), _p(rng, 6)
        build = lambda: _scalarize(ops.layernorm(a, g, b))
        params = [a, g, b]
    elif name == "rotary":
        cos, sin = rotary_tables(5, 6)
        a = _p(rng, 1, 2, 5, 6)
        build = lambda: _scalarize(ops.reshape(ops.rotary(a, cos, sin), (10, 6)))
        params = [a]
    elif name == "attention":
        q, k, v = _p(rng, 1, 2, 4, 4), _p(rng, 1, 2, 6, 4), _p(rng, 1, 2, 6, 4)
        build = lambda: _scalarize(ops.reshape(
            ops.attention(q, k, v, causal=True, offset=2), (8, 4)))
        params = [q, k, v]
    elif name == "linear":
        x, w, b = _p(rng, 2, 3, 4), _p(rng, 4, 5), _p(rng, 5)
        build = lambda: _scalarize(ops.linear(x, w, b))
        params = [x, w, b]
    elif name == "embedding":
        table = _p(rng, 7, 5)
        ids = rng.integers(0, 7, size=(2, 3))
        build = lambda: _scalarize(ops.embedding(table, ids))
        params = [table]
    elif name == "narrow_concat":
        a, b = _p(rng, 3, 4), _p(rng, 3, 2)
        build = lambda: _scalarize(ops.narrow(ops.concat([a, b], axis=1), 1, 1, 4))
        params = [a, b]
    else:  # scale_transpose
        a = _p(rng, 3, 4)
        build = lambda: _scalarize(ops.scale(ops.transpose(a, (1, 0)), 1.7))
        params = [a]
    check_op_grads(build, params)


def test_grad_cross_entropy_closed_form(rng):
    """d loss / d logits == softmax(logits) - onehot(target), elementwise."""
    from blocklm.autograd import backward

    logits = _p(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    loss, _ = ops.cross_entropy(logits, targets)
    backward(loss)
    x = logits.data.astype(np.float64)
    sm = np.exp(x - x.max(1, keepdims=True))
    sm /= sm.sum(1, keepdims=True)
    expect = sm.copy()
    expect[np.arange(5), targets] -= 1.0
    expect /= 5
    np.testing.assert_allclose(logits.grad, expect, atol=1e-6)

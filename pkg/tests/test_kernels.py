import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sef import kernels

py = kernels.python_kernels
cy = kernels.compiled_kernels
needs_compiled = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def test_backend_name_matches_active_module():
    assert kernels.BACKEND in ("cython", "python")
    assert (kernels.BACKEND == "cython") == (kernels.im2col is getattr(cy, "im2col", None))


def test_im2col_row_layout():
    x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(1, 2, 4, 4)
    cols = py.im2col(x, 3, 3, 1, 0)
    assert cols.shape == (1, 18, 4)
    # row c*9 + i*3 + j holds x[c, oh+i, ow+j]
    np.testing.assert_array_equal(cols[0, 9 + 1 * 3 + 2], x[0, 1, 1:3, 2:4].reshape(-1))


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    cols = py.im2col(x, 3, 3, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * py.col2im(y, x.shape, 3, 3, 2, 1))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.integers(3, 9),
                   st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2))


@needs_compiled
@given(shapes, st.integers(0, 2 ** 32 - 1))
def test_compiled_im2col_col2im_bitwise_equal(shape, seed):
    n, c, h, w, k, stride, pad = shape
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    a, b = py.im2col(x, k, k, stride, pad), cy.im2col(x, k, k, stride, pad)
    assert np.array_equal(a, b)
    g = rng.normal(size=a.shape)
    assert np.array_equal(py.col2im(g, x.shape, k, k, stride, pad),
                          cy.col2im(g, x.shape, k, k, stride, pad))


@needs_compiled
@given(st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(2, 9), st.integers(2, 9)),
       st.integers(1, 3), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_compiled_maxpool_bitwise_equal(shape, k, seed, quantize):
    if shape[2] < k or shape[3] < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    if quantize:  # many ties
        x = np.round(x)
    out_p, idx_p = py.maxpool_forward(x, k)
    out_c, idx_c = cy.maxpool_forward(x, k)
    assert np.array_equal(out_p, out_c) and np.array_equal(idx_p, idx_c)
    g = rng.normal(size=out_p.shape)
    assert np.array_equal(py.maxpool_backward(g, idx_p, x.shape, k),
                          cy.maxpool_backward(g, idx_c, x.shape, k))

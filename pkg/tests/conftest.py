import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_grad_close(analytic, numeric, rel=1e-4, abs_tol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    ok = err <= np.maximum(abs_tol, rel * denom)
    assert ok.all(), (
        f"gradient mismatch: worst err {err.max():.3e} at {np.unravel_index(err.argmax(), err.shape)}, "
        f"analytic {analytic.reshape(-1)[err.argmax()]:.6e} vs numeric {numeric.reshape(-1)[err.argmax()]:.6e}"
    )


def conv_spec(c_out, f, stride=1, bn=False, act="none", drop=0.0, searchable=True):
    from pit.model import LayerSpec
    return LayerSpec(kind="conv1d", c_out_seed=c_out, f_seed=f, stride=stride,
                     has_batchnorm=bn, activation=act, dropout_rate=drop,
                     searchable=searchable)


def small_specs():
    """Strategy for small random networks (convs only, none/pointwise blocks)."""
    from hypothesis import strategies as st
    from pit.model import BlockSpec, NetworkSpec, TaskHead

    @st.composite
    def _specs(draw):
        blocks = []
        for _ in range(draw(st.integers(1, 2))):
            layers = [conv_spec(c_out=draw(st.integers(1, 4)),
                                f=draw(st.integers(1, 6)),
                                stride=draw(st.integers(1, 2)),
                                bn=draw(st.booleans()),
                                act=draw(st.sampled_from(["relu", "none"])),
                                drop=draw(st.sampled_from([0.0, 0.3])),
                                searchable=draw(st.booleans()))
                      for _ in range(draw(st.integers(1, 2)))]
            blocks.append(BlockSpec(layers, residual=draw(
                st.sampled_from(["none", "pointwise"]))))
        return NetworkSpec(draw(st.integers(1, 3)), draw(st.integers(8, 24)),
                           blocks, TaskHead("classification", draw(st.integers(2, 3))))

    return _specs()

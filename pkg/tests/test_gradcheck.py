import copy

import numpy as np
import pytest

from cnnav.checks import MICRO_BACKBONE, MICRO_NAV, build_micro_model, micro_gradcheck
from cnnav.engine import (
    Tensor,
    conv2d,
    gradcheck,
    linear,
    mul,
    param_group,
    shadow_mode,
    sigmoid,
    sum_all,
)
from cnnav.model import Model
from cnnav.navigation import ConvLstmState, compute_loss, convlstm_cell_forward


def _params(rng, **shapes):
    return {k: Tensor(rng.normal(0, 0.5, s), requires_grad=True, name=k) for k, s in shapes.items()}


@pytest.mark.parametrize(
    "name,group",
    [
        ("backbone.stage3.block0.conv1.weight", "backbone"),
        ("nav.sa4.weight", "nav.sa"),
        ("nav.ca5.fc1.bias", "nav.ca"),
        ("nav.convlstm.x.weight", "nav.convlstm"),
        ("baseline.fc.weight", "baseline.fc"),
    ],
)
def test_param_group(name, group):
    assert param_group(name) == group


def test_linear_model_is_exact_to_rounding():
    rng = np.random.default_rng(0)
    with shadow_mode():
        x = Tensor(rng.normal(size=(5, 4)))
        p = _params(rng, w=(3, 4), b=(3,))
        r = Tensor(rng.normal(size=(5, 3)))
        report = gradcheck(lambda q: sum_all(mul(linear(x, q["w"], q["b"]), r)), p, n_samples=15)
    assert report.max_rel_error < 1e-6


def test_conv_sigmoid_stack():
    rng = np.random.default_rng(1)
    with shadow_mode():
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        p = _params(rng, w1=(4, 3, 3, 3), b1=(4,), w2=(2, 4, 3, 3))
        r = Tensor(rng.normal(size=(2, 2, 3, 3)))

        def f(q):
            y = sigmoid(conv2d(x, q["w1"], q["b1"], padding=1))
            return sum_all(mul(sigmoid(conv2d(y, q["w2"], None, stride=2, padding=1)), r))

        report = gradcheck(f, p, n_samples=60)
    assert report.max_rel_error < 1e-4


def test_convlstm_cell():
    rng = np.random.default_rng(2)
    cn = 3
    with shadow_mode():
        x = Tensor(rng.normal(size=(2, cn, 5, 5)))
        h0 = Tensor(rng.uniform(-0.5, 0.5, (2, cn, 5, 5)))
        c0 = Tensor(rng.normal(size=(2, cn, 5, 5)))
        p = _params(rng, **{"cell.x.weight": (4 * cn, cn, 3, 3), "cell.x.bias": (4 * cn,), "cell.h.weight": (4 * cn, cn, 3, 3)})
        w_h = Tensor(rng.normal(size=(2, cn, 5, 5)))
        w_c = Tensor(rng.normal(size=(2, cn, 5, 5)))

        def f(q):
            st = convlstm_cell_forward(x, ConvLstmState(h0, c0), q, prefix="cell")
            return sum_all(mul(st.h, w_h)) + sum_all(mul(st.c, w_c))

        report = gradcheck(f, p, n_samples=80)
    assert report.max_rel_error < 1e-4


def test_report_reduces_over_samples():
    rng = np.random.default_rng(3)
    with shadow_mode():
        x = Tensor(rng.normal(size=(4, 2)))
        p = _params(rng, w=(2, 2), b=(2,))
        report = gradcheck(lambda q: sum_all(mul(linear(x, q["w"], q["b"]), linear(x, q["w"], q["b"]))), p, n_samples=12)
    errs = [c.rel_error for c in report.checks]
    assert len(errs) == 12
    assert report.max_rel_error == max(errs)
    assert report.mean_rel_error == pytest.approx(np.mean(errs))
    assert report.worst.rel_error == report.max_rel_error


def test_sampling_covers_every_tensor():
    model = build_micro_model("full")
    report = micro_gradcheck("full", n_samples=200)
    assert len(report.checks) == 200
    assert {c.name for c in report.checks} >= set(model.params)


@pytest.mark.parametrize("variant", ["baseline", "hl_sum", "hl_lh_sum", "full"])
def test_micro_model_64bit(variant):
    report = micro_gradcheck(variant, n_samples=200)
    assert report.max_rel_error < 1e-4, report.format()


def test_micro_model_32bit_within_1e_2():
    shadow = build_micro_model("full", seed=0)
    single = shadow.clone(np.float32)
    rng = np.random.default_rng(5)
    images64 = rng.random((4, 3, 32, 32))
    labels = rng.integers(0, 3, size=4)
    frozen = copy.deepcopy(shadow.buffers)

    def loss_fn(params):
        dtype = next(iter(params.values())).dtype
        m = Model("full", MICRO_BACKBONE, MICRO_NAV, params, copy.deepcopy(frozen))
        return compute_loss(m.forward(Tensor(images64.astype(dtype)), train=True), labels)

    with shadow_mode():
        report = gradcheck(loss_fn, single.params, n_samples=200, numeric_params=shadow.params)
    assert report.max_rel_error < 1e-2, report.format()

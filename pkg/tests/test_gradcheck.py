import numpy as np
import pytest

from falldetect.gradcheck import (
    TINY_ENSEMBLE,
    check_gradients,
    gradcheck,
    gradcheck_model,
    gradcheck_softmax_xent,
    relative_error,
    run_suite,
)
from falldetect.layers import GRU, LSTM, Conv2D, Dense, MaxPool2D
from falldetect.models import ModelKind, build_model
from falldetect.tensor import SeededRng

TOL = 1e-4


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(0.1)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


def test_detects_a_wrong_gradient():
    w = np.array([1.0, 2.0])

    def loss():
        return float((w ** 2).sum())

    good = check_gradients(loss, {"w": w}, {"w": 2 * w})
    bad = check_gradients(loss, {"w": w}, {"w": 3 * w})
    assert good["w"] < 1e-8
    assert bad["w"] > 0.3


@pytest.mark.parametrize("seed", range(3))
def test_dense_random_8_to_4(seed):
    r = SeededRng(seed)
    assert gradcheck(Dense(8, 4, r.child("d"), "relu"), r.normal(size=(3, 8)), rng=r) < TOL
    assert gradcheck(Dense(8, 4, r.child("d"), "softmax"), r.normal(size=(3, 8)), rng=r) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_conv_two_filters(seed):
    r = SeededRng(seed)
    assert gradcheck(Conv2D(1, 2, (3, 3), r.child("c")), r.normal(size=(1, 1, 3, 8)), rng=r) < TOL


def test_conv_multichannel():
    r = SeededRng(5)
    assert gradcheck(Conv2D(3, 2, (1, 3), r.child("c")), r.normal(size=(2, 3, 1, 9)), rng=r) < TOL


def test_maxpool():
    r = SeededRng(1)
    assert gradcheck(MaxPool2D((1, 2)), r.normal(size=(2, 3, 1, 9)), rng=r) < TOL


@pytest.mark.parametrize("cell", [GRU, LSTM])
def test_recurrent_bptt_t4(cell):
    r = SeededRng(3)
    assert gradcheck(cell(2, 3, r.child("g")), r.normal(size=(2, 4, 2)), rng=r) < TOL


def test_softmax_xent():
    r = SeededRng(0)
    assert gradcheck_softmax_xent(r.normal(size=(5, 2)), np.array([0, 1, 1, 0, 1])) < TOL


@pytest.mark.parametrize("kind", list(ModelKind))
def test_every_model_kind_small(kind):
    r = SeededRng(8)
    model = build_model(kind, r.child("m"), length=12, hidden=3, filters=2, dense_units=4)
    errs = gradcheck_model(model, r.normal(size=(2, 3, 12)), np.array([1, 0]), 1.0, 1e-5, 6, r.child("c"))
    assert max(errs.values()) < TOL, errs


def test_tiny_ensemble_all_coordinates():
    r = SeededRng(21)
    model = build_model(ModelKind.ENSEMBLE_CFG, r.child("m"), **TINY_ENSEMBLE)
    errs = gradcheck_model(model, r.normal(size=(2, 3, 10)), np.array([0, 1]))
    assert set(errs) == set(model.params()) | {"<input>"}
    assert max(errs.values()) < TOL


def test_tiny_ensemble_with_zero_aux_weight():
    r = SeededRng(22)
    model = build_model(ModelKind.ENSEMBLE_CFG, r.child("m"), **TINY_ENSEMBLE)
    errs = gradcheck_model(model, r.normal(size=(3, 3, 10)), np.array([0, 1, 1]), aux_weight=0.0, max_coords=10,
                           rng=r.child("c"))
    assert max(errs.values()) < TOL


def test_suite_small_and_eps_sensitivity():
    fine = run_suite(seeds=2, eps=1e-5, ensemble_coords=4)
    coarse = run_suite(seeds=2, eps=1e-2, ensemble_coords=4)
    assert set(fine) == {"conv2d", "maxpool", "dense", "softmax_xent", "gru_sequence", "lstm_sequence", "ensemble_tiny"}
    assert max(fine.values()) < TOL
    # truncation error grows with eps for the curved (non piecewise-linear) layers
    for name in ("softmax_xent", "gru_sequence", "lstm_sequence", "ensemble_tiny"):
        assert coarse[name] > fine[name]

"""Central finite-difference checks for the hand-written backward passes."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Layer, softmax_xent, softmax_xent_grad
from .tensor import SeededRng


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def check_gradients(
    loss_fn: Callable[[], np.ndarray | float],
    tensors: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: SeededRng | None = None,
) -> dict[str, float]:
    """Max relative error per tensor between ``analytic`` and central differences.

    ``loss_fn`` must re-evaluate the loss from the current contents of
    ``tensors``; each coordinate is nudged in place and restored. It may return
    the loss as an array of terms whose sum is the scalar loss: the terms are
    differenced before summing, which keeps cancellation error down when the
    total is large next to the gradient being checked. With
    ``max_coords`` set, that many coordinates per tensor are drawn from ``rng``
    instead of visiting all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    errors = {}
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"tensor {name!r} is not contiguous")
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort((rng or SeededRng(0)).generator.choice(flat.size, max_coords, replace=False))
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = np.asarray(loss_fn(), dtype=np.float64)
            flat[i] = orig - eps
            f_minus = np.asarray(loss_fn(), dtype=np.float64)
            flat[i] = orig
            num[k] = float(np.sum(f_plus - f_minus)) / (2.0 * eps)
        ana = analytic[name].reshape(-1)[idx]
        errors[name] = float(relative_error(ana, num).max()) if idx.size else 0.0
    return errors


def gradcheck(
    layer: Layer,
    x: np.ndarray,
    eps: float = 1e-5,
    rng: SeededRng | None = None,
    max_coords: int | None = None,
) -> float:
    """Worst relative error over all parameters of ``layer`` and its input.

    The scalar loss is the sum of the outputs weighted by a fixed random
    projection drawn from ``rng`` (all ones when ``rng`` is None).
    """
    x = np.array(x, copy=True)
    out = layer.forward(x)
    proj = np.ones_like(out) if rng is None else rng.child("proj").normal(size=out.shape)
    dx = layer.backward(proj)
    analytic = {**{k: np.array(v) for k, v in layer.grads.items()}, "<input>": dx}
    tensors = {**layer.params, "<input>": x}

    def loss():
        return layer.forward(x) * proj

    sub = rng.child("coords") if rng is not None else None
    return max(check_gradients(loss, tensors, analytic, eps, max_coords, sub).values())


def gradcheck_softmax_xent(logits: np.ndarray, labels: np.ndarray, eps: float = 1e-5) -> float:
    logits = np.array(logits, copy=True)
    probs, _ = softmax_xent(logits, labels)
    analytic = {"logits": softmax_xent_grad(probs, labels)}

    def loss():
        return softmax_xent(logits, labels)[1]

    return check_gradients(loss, {"logits": logits}, analytic, eps)["logits"]


def gradcheck_model(
    model,
    x: np.ndarray,
    labels: np.ndarray,
    aux_weight: float = 1.0,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: SeededRng | None = None,
) -> dict[str, float]:
    """Per-tensor error of the summed total loss over a batch, inputs included."""
    x = np.array(x, copy=True)
    n = len(labels)
    out = model.forward(x)
    # backward yields the batch mean; the check uses the batch sum
    analytic = {"<input>": n * model.backward(out, labels, aux_weight)}
    analytic.update({k: n * np.array(v) for k, v in model.grads().items()})
    tensors = {**model.params(), "<input>": x}

    def loss():
        # total loss split into per-head, per-sample terms
        heads = model.forward(x).head_losses(labels)
        main = heads.pop("main")
        return np.concatenate([main] + [aux_weight * h for h in heads.values()])

    errors = check_gradients(loss, tensors, analytic, eps, max_coords, rng)
    model.clear_cache()
    return errors


TINY_ENSEMBLE = dict(length=10, hidden=4, filters=4, dense_units=8)


def _layer_cases(rng: SeededRng):
    from .layers import GRU, LSTM, Conv2D, Dense, MaxPool2D

    g = rng.child("x")
    return {
        "conv2d": (Conv2D(1, 2, (3, 3), rng.child("conv")), g.normal(size=(2, 1, 3, 8))),
        "maxpool": (MaxPool2D((1, 2)), g.normal(size=(2, 2, 3, 9))),
        "dense": (Dense(8, 4, rng.child("dense"), "relu"), g.normal(size=(3, 8))),
        "gru_sequence": (GRU(2, 3, rng.child("gru")), g.normal(size=(2, 4, 2))),
        "lstm_sequence": (LSTM(2, 3, rng.child("lstm")), g.normal(size=(2, 4, 2))),
    }


def run_suite(
    seeds: int = 100,
    eps: float = 1e-5,
    base_seed: int = 0,
    ensemble_coords: int | None = None,
) -> dict[str, float]:
    """Worst relative error per layer kind over ``seeds`` random instances.

    ``ensemble_coords`` caps how many coordinates per tensor the tiny-ensemble
    check visits (None visits all of them).
    """
    from .models import ModelKind, build_model

    worst: dict[str, float] = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for s in range(seeds):
        rng = SeededRng(base_seed + s)
        for name, (layer, x) in _layer_cases(rng).items():
            note(name, gradcheck(layer, x, eps, rng))
        logits = rng.child("logits").normal(size=(4, 2)) * 3.0
        labels = rng.child("labels").integers(0, 2, size=4)
        note("softmax_xent", gradcheck_softmax_xent(logits, labels, eps))
        model = build_model(ModelKind.ENSEMBLE_CFG, rng.child("model"), **TINY_ENSEMBLE)
        x = rng.child("ens_x").normal(size=(2, 3, 10))
        y = np.array([0, 1])
        errs = gradcheck_model(model, x, y, 1.0, eps, ensemble_coords, rng.child("coords"))
        note("ensemble_tiny", max(errs.values()))
    return worst

"""Ensemble coarse-fine CNN + GRU fall detector and the five comparison baselines.

All models take a ``[B, 3, L]`` batch of tri-axial windows (L = 140 at
20 Hz) and end in a two-way softmax head, class 1 being a fall.

The ensemble concatenates three branches:

* coarse: conv 32@3x3 -> ReLU -> max-pool 1x2 -> flatten
* fine: conv 32@3x3 -> ReLU -> pool 1x2 -> conv 32@1x3 -> ReLU -> pool 1x2 -> flatten
* temporal: two stacked GRU layers (hidden 64) -> flatten of the full sequence

into a dense 64 (ReLU) -> dense 2 trunk. Each branch also feeds its own
dense-2 auxiliary head, and training minimises
``loss_main + aux_weight * (loss_coarse + loss_fine + loss_temporal)``.
Only the trunk head is used for prediction.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .layers import (
    GRU,
    LSTM,
    Conv2D,
    Dense,
    Flatten,
    LastStep,
    MaxPool2D,
    ReLU,
    Reshape,
    Sequential,
    Transpose,
    softmax_xent,
    softmax_xent_grad,
)
from .tensor import DTYPE, SeededRng, ShapeError, softmax

N_CLASSES = 2
ADL, FALL = 0, 1


class ModelKind(str, Enum):
    SIMPLE_CNN = "SimpleCNN"
    SIMPLE_GRU = "SimpleGRU"
    COARSE_FINE_CNN = "CoarseFineCNN"
    CNN_LSTM = "CnnLstm"
    CNN_GRU = "CnnGru"
    ENSEMBLE_CFG = "EnsembleCFG"

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        for kind in cls:
            if kind.value.lower() == name.lower():
                return kind
        raise ValueError(f"unknown model kind {name!r}; valid kinds: {', '.join(k.value for k in cls)}")


# comparison-table row order
TABLE_ORDER = [
    ModelKind.SIMPLE_CNN,
    ModelKind.SIMPLE_GRU,
    ModelKind.COARSE_FINE_CNN,
    ModelKind.CNN_LSTM,
    ModelKind.CNN_GRU,
    ModelKind.ENSEMBLE_CFG,
]

# flattened branch widths of the full-size ensemble on a 3x140 window
ENSEMBLE_WIDTHS = {"coarse": 2208, "fine": 1056, "temporal": 8960}
ENSEMBLE_CONCAT = 12224


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind = ModelKind.ENSEMBLE_CFG
    channels: int = 3
    length: int = 140
    filters: int = 32
    hidden: int = 64
    dense_units: int = 64
    temporal_flatten: str = "sequence"  # or "last"
    aux_heads: bool = True  # ensemble only

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.temporal_flatten not in ("sequence", "last"):
            raise ValueError(f"temporal_flatten must be 'sequence' or 'last', got {self.temporal_flatten!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def is_default_size(self) -> bool:
        return (self.channels, self.length, self.filters, self.hidden) == (3, 140, 32, 64)


def _conv_stack(cfg: ModelConfig, rng: SeededRng, n_groups: int) -> list:
    layers = [
        ("reshape", Reshape((1, cfg.channels, cfg.length))),
        ("conv1", Conv2D(1, cfg.filters, (3, 3), rng.child("conv1"))),
        ("relu1", ReLU()),
        ("pool1", MaxPool2D((1, 2))),
    ]
    if n_groups == 2:
        layers += [
            ("conv2", Conv2D(cfg.filters, cfg.filters, (1, 3), rng.child("conv2"))),
            ("relu2", ReLU()),
            ("pool2", MaxPool2D((1, 2))),
        ]
    return layers


def _seq_tail(cfg: ModelConfig):
    return ("flatten", Flatten()) if cfg.temporal_flatten == "sequence" else ("last", LastStep())


def coarse_branch(cfg: ModelConfig, rng: SeededRng) -> Sequential:
    return Sequential(_conv_stack(cfg, rng, 1) + [("flatten", Flatten())])


def fine_branch(cfg: ModelConfig, rng: SeededRng) -> Sequential:
    return Sequential(_conv_stack(cfg, rng, 2) + [("flatten", Flatten())])


def temporal_branch(cfg: ModelConfig, rng: SeededRng) -> Sequential:
    return Sequential([
        ("to_seq", Transpose()),
        ("gru", GRU(cfg.channels, cfg.hidden, rng.child("gru"), num_layers=2)),
        _seq_tail(cfg),
    ])


def conv_recurrent_branch(cfg: ModelConfig, rng: SeededRng, cell: type) -> Sequential:
    """Two conv/pool groups whose feature map is read as a sequence by two recurrent layers."""
    stack = _conv_stack(cfg, rng, 2)
    feat = Sequential(stack).output_shape((cfg.channels, cfg.length))  # (F, 1, T')
    name = "lstm" if cell is LSTM else "gru"
    return Sequential(stack + [
        ("squeeze", Reshape((feat[0], feat[1] * feat[2]))),
        ("to_seq", Transpose()),
        (name, cell(cfg.filters, cfg.hidden, rng.child(name), num_layers=2)),
        _seq_tail(cfg),
    ])


def _branches_for(cfg: ModelConfig, rng: SeededRng) -> list[tuple[str, Sequential]]:
    k = cfg.kind
    if k is ModelKind.SIMPLE_CNN:
        return [("fine", fine_branch(cfg, rng.child("fine")))]
    if k is ModelKind.SIMPLE_GRU:
        return [("temporal", temporal_branch(cfg, rng.child("temporal")))]
    if k is ModelKind.COARSE_FINE_CNN:
        return [("coarse", coarse_branch(cfg, rng.child("coarse"))), ("fine", fine_branch(cfg, rng.child("fine")))]
    if k is ModelKind.CNN_LSTM:
        return [("cnn_lstm", conv_recurrent_branch(cfg, rng.child("cnn_lstm"), LSTM))]
    if k is ModelKind.CNN_GRU:
        return [("cnn_gru", conv_recurrent_branch(cfg, rng.child("cnn_gru"), GRU))]
    return [
        ("coarse", coarse_branch(cfg, rng.child("coarse"))),
        ("fine", fine_branch(cfg, rng.child("fine"))),
        ("temporal", temporal_branch(cfg, rng.child("temporal"))),
    ]


@dataclass
class BranchOutputs:
    main_logits: np.ndarray
    main_probs: np.ndarray
    aux_logits: dict[str, np.ndarray] = field(default_factory=dict)
    aux_probs: dict[str, np.ndarray] = field(default_factory=dict)

    def head_losses(self, labels) -> dict[str, np.ndarray]:
        """Per-sample cross-entropy of every head: ``main`` plus one entry per branch."""
        out = {"main": softmax_xent(self.main_logits, labels)[1]}
        for name, logits in self.aux_logits.items():
            out[name] = softmax_xent(logits, labels)[1]
        return out


def total_loss(outputs: BranchOutputs, labels, aux_weight: float = 1.0) -> np.ndarray:
    """``loss_main + aux_weight * sum(branch losses)`` per sample."""
    if aux_weight < 0:
        raise ValueError("aux_weight must be >= 0")
    losses = outputs.head_losses(labels)
    total = losses.pop("main")
    for branch_loss in losses.values():
        total = total + aux_weight * branch_loss
    return total


class FallModel:
    def __init__(self, config: ModelConfig, rng: SeededRng):
        self.config = config
        self.seed = rng.seed
        self.in_shape = (config.channels, config.length)
        self.branches = _branches_for(config, rng)
        self.widths = {}
        for name, branch in self.branches:
            (width,) = branch.output_shape(self.in_shape)
            self.widths[name] = width
        self.concat_width = sum(self.widths.values())
        if config.kind is ModelKind.ENSEMBLE_CFG and config.is_default_size and config.temporal_flatten == "sequence":
            if self.widths != ENSEMBLE_WIDTHS or self.concat_width != ENSEMBLE_CONCAT:
                raise ShapeError(f"ensemble branch widths {self.widths} do not match {ENSEMBLE_WIDTHS}")
        trunk_rng = rng.child("trunk")
        self.trunk = Sequential([
            ("fc1", Dense(self.concat_width, config.dense_units, trunk_rng.child("fc1"), "relu")),
            ("fc2", Dense(config.dense_units, N_CLASSES, trunk_rng.child("fc2"))),
        ])
        self.aux: dict[str, Dense] = {}
        if config.kind is ModelKind.ENSEMBLE_CFG and config.aux_heads:
            aux_rng = rng.child("aux")
            for name, _ in self.branches:
                self.aux[name] = Dense(self.widths[name], N_CLASSES, aux_rng.child(name))

    @property
    def kind(self) -> ModelKind:
        return self.config.kind

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, branch in self.branches:
            out.update({f"{name}.{k}": v for k, v in branch.params.items()})
        out.update({f"trunk.{k}": v for k, v in self.trunk.params.items()})
        for name, head in self.aux.items():
            out.update({f"aux.{name}.{k}": v for k, v in head.params.items()})
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, branch in self.branches:
            out.update({f"{name}.{k}": v for k, v in branch.grads.items()})
        out.update({f"trunk.{k}": v for k, v in self.trunk.grads.items()})
        for name, head in self.aux.items():
            out.update({f"aux.{name}.{k}": v for k, v in head.grads.items()})
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"expected input of shape {self.in_shape} (optionally batched), got {x.shape}")
        return x

    def forward(self, x) -> BranchOutputs:
        x = self._check_input(x)
        feats = []
        for name, branch in self.branches:
            f = branch.forward(x)
            if f.shape[1] != self.widths[name]:
                raise ShapeError(f"branch {name} produced width {f.shape[1]}, expected {self.widths[name]}")
            feats.append(f)
        joined = np.concatenate(feats, axis=1)
        logits = self.trunk.forward(joined)
        out = BranchOutputs(logits, softmax(logits))
        for (name, _), f in zip(self.branches, feats):
            if name in self.aux:
                a = self.aux[name].forward(f)
                out.aux_logits[name] = a
                out.aux_probs[name] = softmax(a)
        return out

    def backward(self, outputs: BranchOutputs, labels, aux_weight: float = 1.0) -> np.ndarray:
        """Gradients of the batch-mean total loss, left in ``grads()``; returns the input gradient.

        With ``aux_weight == 0`` the auxiliary heads are detached: their
        gradients are zero and nothing flows from them into the branches.
        """
        labels = np.asarray(labels)
        n = len(labels)
        d_main = softmax_xent_grad(outputs.main_probs, labels) / n
        d_joined = self.trunk.backward(d_main)
        start = 0
        d_x = 0.0
        for name, branch in self.branches:
            width = self.widths[name]
            d_feat = d_joined[:, start:start + width]
            start += width
            if name in self.aux:
                head = self.aux[name]
                if aux_weight != 0:
                    d_aux = aux_weight * softmax_xent_grad(outputs.aux_probs[name], labels) / n
                    d_feat = d_feat + head.backward(d_aux)
                else:
                    head.grads = {k: np.zeros_like(v) for k, v in head.params.items()}
            d_x = d_x + branch.backward(np.ascontiguousarray(d_feat))
        return d_x

    def loss_and_grads(self, x, labels, aux_weight: float = 1.0) -> np.ndarray:
        """Forward + backward on one batch; returns the per-sample total losses."""
        out = self.forward(x)
        losses = total_loss(out, labels, aux_weight)
        self.backward(out, labels, aux_weight)
        return losses

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = self._check_input(x)
        probs = [self.forward(x[i:i + batch_size]).main_probs for i in range(0, len(x), batch_size)]
        self.clear_cache()
        return np.concatenate(probs)

    def clear_cache(self) -> None:
        for _, branch in self.branches:
            branch.clear_cache()
        self.trunk.clear_cache()
        for head in self.aux.values():
            head.clear_cache()


def build_model(kind: ModelKind | str, rng: SeededRng, **overrides) -> FallModel:
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    cfg = replace(ModelConfig(kind=kind), **overrides)
    return FallModel(cfg, rng)


def predict_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax over the two classes; an exact tie goes to ADL (0)."""
    probs = np.asarray(probs)
    return (probs[..., FALL] > probs[..., ADL]).astype(int)


def predict(model: FallModel, x) -> np.ndarray | int:
    single = np.asarray(x).ndim == 2
    pred = predict_from_probs(model.predict_proba(x))
    return int(pred[0]) if single else pred

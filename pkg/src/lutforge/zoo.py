"""Small reference models ("desk models") and the float MLP baseline."""
from __future__ import annotations

import numpy as np

from . import datasets
from .data import Dataset
from .layers import Activation, Flatten, LutConv, LutDense, QDense, Sequential
from .trainer import TrainConfig, TrainResult, train


def dense(rng) -> Sequential:
    return Sequential([LutDense(4, 6, rng=rng), LutDense(6, 3, rng=rng)], (4,))


def dense_bn(rng) -> Sequential:
    return Sequential([LutDense(4, 6, use_batchnorm=True, rng=rng),
                       LutDense(6, 3, hidden=(3,), rng=rng)], (4,))


def conv1d(rng) -> Sequential:
    return Sequential([LutConv(1, 4, 3, stride=2, rng=rng), Flatten(), LutDense(28, 3, rng=rng)], (16, 1))


def conv2d(rng) -> Sequential:
    return Sequential([LutConv(1, 3, (3, 3), stride=2, padding="same", rng=rng), Flatten(),
                       LutDense(27, 3, rng=rng)], (6, 6, 1))


def hybrid(rng) -> Sequential:
    return Sequential([QDense(4, 8, rng=rng), LutDense(8, 3, rng=rng)], (4,))


DESK_MODELS = {"dense": dense, "dense_bn": dense_bn, "conv1d": conv1d, "conv2d": conv2d, "hybrid": hybrid}


def desk_dataset(name: str, n: int = 3000, seed: int = 0) -> Dataset:
    if name == "conv1d":
        x, y = datasets.sequences(n, 16, 3, seed)
    elif name == "conv2d":
        x, y = datasets.images(n, 6, 3, seed)
    else:
        x, y = datasets.blobs(n, 4, 3, seed)
    return datasets.to_dataset(x, y, 3, seed)


def train_desk_model(name: str, seed: int = 0, epochs: int = 4, out_dir=None) -> tuple[Sequential, TrainResult]:
    """Build, train and return one desk model (the final-epoch weights)."""
    if name not in DESK_MODELS:
        raise KeyError(f"unknown desk model {name!r}; choose from {sorted(DESK_MODELS)}")
    model = DESK_MODELS[name](np.random.default_rng(seed))
    data = desk_dataset(name, seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=64, lr_base=1e-2, restart_period=200, seed=seed,
                      beta_start=1e-6, beta_end=1e-4)
    result = train(model, data, cfg, out_dir, provenance={"desk_model": name})
    return model, result


def jet_lut_model(rng, hidden: int = 20, n_classes: int = 5, n_features: int = 16,
                  lut_hidden=(2,)) -> Sequential:
    return Sequential([LutDense(n_features, hidden, hidden=lut_hidden, use_batchnorm=True, rng=rng),
                       LutDense(hidden, n_classes, hidden=lut_hidden, rng=rng)], (n_features,))


def float_mlp(rng, n_features: int = 16, widths=(64, 32, 32), n_classes: int = 5) -> Sequential:
    """Unquantized MLP built from QDense layers with quantizers disabled."""
    layers, c = [], n_features
    for w in widths:
        layers += [QDense(c, w, rng=rng, quantized=False), Activation("relu")]
        c = w
    layers.append(QDense(c, n_classes, rng=rng, quantized=False))
    return Sequential(layers, (n_features,))


def model_from_config(cfg: dict, seed: int = 0) -> Sequential:
    """Build a model from a config mapping.

    ``cfg`` has ``input_shape`` and a ``layers`` list; each layer entry has a
    ``kind`` (lut_dense, lut_conv, qdense, activation, flatten) and ``c_out``
    where applicable.  Input widths are inferred from the previous layer.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(cfg["input_shape"])
    layers = []
    for k, spec in enumerate(cfg["layers"]):
        spec = dict(spec)
        kind = spec.pop("kind", None)
        c = shape[-1]
        if kind == "lut_dense":
            layer = LutDense(c, spec.pop("c_out"), hidden=tuple(spec.pop("hidden", (2,))),
                             activation=spec.pop("activation", "tanh"),
                             use_batchnorm=bool(spec.pop("batchnorm", False)), rng=rng)
        elif kind == "lut_conv":
            layer = LutConv(c, spec.pop("c_out"), spec.pop("kernel_size"), spec.pop("stride", 1),
                            spec.pop("padding", "valid"), hidden=tuple(spec.pop("hidden", (2,))),
                            activation=spec.pop("activation", "tanh"),
                            use_batchnorm=bool(spec.pop("batchnorm", False)), rng=rng)
        elif kind == "qdense":
            layer = QDense(c, spec.pop("c_out"), rng=rng, quantized=bool(spec.pop("quantized", True)))
        elif kind == "activation":
            layer = Activation(spec.pop("activation", "tanh"))
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ValueError(f"layer {k}: unknown kind {kind!r}")
        if spec:
            raise ValueError(f"layer {k} ({kind}): unknown keys {sorted(spec)}")
        layers.append(layer)
        shape = layer.output_shape(shape)
    return Sequential(layers, cfg["input_shape"])

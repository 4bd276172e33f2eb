"""Model manifest: a self-contained JSON document with base64 tensor blobs."""
from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

from .fxp import QuantizerState
from .layers import Activation, BatchNormState, Flatten, LutConv, LutDense, QDense, Sequential

FORMAT = "lutforge-manifest"
VERSION = 1


class ManifestError(ValueError):
    pass


def _blob(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    dtype = {"f": "<f8", "i": "<i8", "b": "|b1", "u": "<i8"}[arr.dtype.kind]
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return {"dtype": dtype, "shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}


def _unblob(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).copy()


def _quantizer(q: QuantizerState) -> dict:
    return {"shape": list(q.shape), "mode": q.mode, "rounding": q.rounding, "min_f": q.min_f,
            "max_f": q.max_f, "enabled": q.enabled, "calibrated": q.calibrated,
            "f_raw": _blob(q.f_raw), "frac_bits": _blob(q.frac_bits), "i_cal": _blob(q.i_cal),
            "signed": _blob(q.signed)}


def _unquantizer(d: dict) -> QuantizerState:
    return QuantizerState(tuple(d["shape"]), d["mode"], d["rounding"], int(d["min_f"]), int(d["max_f"]),
                          bool(d["enabled"]), bool(d["calibrated"]), f_raw=_unblob(d["f_raw"]),
                          i_cal=_unblob(d["i_cal"]), signed=_unblob(d["signed"]))


def _dense_dict(layer: LutDense) -> dict:
    d = {"c_in": layer.c_in, "c_out": layer.c_out, "hidden": list(layer.hidden),
         "activation": layer.activation,
         "W": [_blob(w) for w in layer.W], "B": [_blob(b) for b in layer.B],
         "q_in": _quantizer(layer.q_in), "q_out": _quantizer(layer.q_out), "bn": None}
    if layer.bn is not None:
        bn = layer.bn
        d["bn"] = {"gamma": _blob(bn.gamma), "beta": _blob(bn.beta), "running_mean": _blob(bn.running_mean),
                   "running_var": _blob(bn.running_var), "momentum": bn.momentum, "eps": bn.eps,
                   "updates": bn.updates}
    return d


def _dense_from(d: dict) -> LutDense:
    layer = LutDense(d["c_in"], d["c_out"], hidden=tuple(d["hidden"]), activation=d["activation"],
                     use_batchnorm=d["bn"] is not None, q_in=_unquantizer(d["q_in"]),
                     q_out=_unquantizer(d["q_out"]))
    layer.W = [_unblob(w) for w in d["W"]]
    layer.B = [_unblob(b) for b in d["B"]]
    if d["bn"] is not None:
        bn = BatchNormState(layer.B[-1].shape, d["bn"]["momentum"], d["bn"]["eps"])
        for key in ("gamma", "beta", "running_mean", "running_var"):
            setattr(bn, key, _unblob(d["bn"][key]))
        bn.updates = int(d["bn"]["updates"])
        layer.bn = bn
    return layer


def layer_to_dict(layer) -> dict:
    if isinstance(layer, LutConv):
        return {"kind": layer.kind, "channels": layer.channels, "kernel_size": list(layer.kernel_size),
                "stride": list(layer.stride), "padding": layer.padding, "inner": _dense_dict(layer.inner)}
    if isinstance(layer, LutDense):
        return {"kind": layer.kind, **_dense_dict(layer)}
    if isinstance(layer, QDense):
        return {"kind": layer.kind, "c_in": layer.c_in, "c_out": layer.c_out,
                "weights": _blob(layer.weights), "bias": _blob(layer.bias),
                "q_act": _quantizer(layer.q_act), "q_w": _quantizer(layer.q_w), "q_b": _quantizer(layer.q_b)}
    if isinstance(layer, Activation):
        return {"kind": layer.kind, "activation": layer.activation}
    if isinstance(layer, Flatten):
        return {"kind": layer.kind}
    raise ManifestError(f"cannot serialize layer {type(layer).__name__}")


def layer_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "lut_conv":
        inner = _dense_from(d["inner"])
        return LutConv(d["channels"], inner.c_out, d["kernel_size"], d["stride"], d["padding"], inner=inner)
    if kind == "lut_dense":
        return _dense_from(d)
    if kind == "qdense":
        layer = QDense(d["c_in"], d["c_out"])
        layer.weights = _unblob(d["weights"])
        layer.bias = _unblob(d["bias"])
        layer.q_act, layer.q_w, layer.q_b = (_unquantizer(d[k]) for k in ("q_act", "q_w", "q_b"))
        return layer
    if kind == "activation":
        return Activation(d["activation"])
    if kind == "flatten":
        return Flatten()
    raise ManifestError(f"unknown layer kind {kind!r}")


def to_dict(model: Sequential, provenance: dict | None = None) -> dict:
    return {"format": FORMAT, "version": VERSION, "input_shape": list(model.input_shape),
            "layers": [layer_to_dict(layer) for layer in model.layers],
            "provenance": dict(provenance if provenance is not None else model.provenance)}


def from_dict(d: dict) -> Sequential:
    if d.get("format") != FORMAT:
        raise ManifestError("not a lutforge model manifest")
    if d.get("version") != VERSION:
        raise ManifestError(f"unsupported manifest version {d.get('version')}")
    try:
        model = Sequential([layer_from_dict(ld) for ld in d["layers"]], tuple(d["input_shape"]))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: missing {exc}") from exc
    model.provenance = dict(d.get("provenance", {}))
    return model


def dumps(model: Sequential, provenance: dict | None = None) -> str:
    return json.dumps(to_dict(model, provenance), sort_keys=True, indent=1) + "\n"


def loads(text: str) -> Sequential:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    return from_dict(d)


def save(model: Sequential, path, provenance: dict | None = None) -> None:
    from .util import atomic_write_text

    atomic_write_text(path, dumps(model, provenance))


def load(path) -> Sequential:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]

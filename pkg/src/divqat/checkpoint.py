"""Model checkpoints: architecture header plus parameters and quantization buffers.

Binary and JSON variants share one header and decode to bit-identical models.
"""
import numpy as np

from . import containers
from .errors import DatasetFormatError
from .nn import Conv2d, Dense, Flatten, Model, ReLU, Sigmoid


def _layer_from(desc):
    kind = desc["kind"]
    if kind == "dense":
        return Dense(desc["in"], desc["out"])
    if kind == "conv2d":
        return Conv2d(desc["in"], desc["out"], desc["k"], desc["padding"], desc["stride"])
    simple = {"relu": ReLU, "sigmoid": Sigmoid, "flatten": Flatten}
    if kind not in simple:
        raise DatasetFormatError(f"unknown layer kind {kind!r} in checkpoint")
    return simple[kind]()


def checkpoint_meta(model, seed=None, extra=None):
    meta = {
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": model.describe(),
        "seed": seed,
        "quant_spec": model.quant_spec.to_dict() if model.quant_spec is not None else None,
        "fake_quant": {name: {"observe": n.observe, "enabled": n.enabled} for name, n in model.fake_quant_nodes()},
    }
    if getattr(model, "output_image_shape", None) is not None:
        meta["output_image_shape"] = list(model.output_image_shape)
    if extra:
        meta["extra"] = extra
    return meta


def save_checkpoint(model, path, fmt=None, seed=None, extra=None):
    containers.save(path, "checkpoint", checkpoint_meta(model, seed, extra), model.state_arrays(), fmt)


def model_from_state(meta, arrays):
    from .quant import QuantSpec, prepare_qat

    model = Model([_layer_from(d) for d in meta["layers"]], meta["input_shape"], arch=meta["arch"])
    for name, p in model.named_parameters():
        if name not in arrays:
            raise DatasetFormatError(f"checkpoint lacks parameter {name}")
        src = arrays[name]
        if src.shape != p.data.shape:
            raise DatasetFormatError(f"parameter {name} has shape {src.shape}, expected {p.data.shape}")
        p.data = np.array(src, dtype=src.dtype)
        p.grad = np.zeros_like(p.data)
    if "output_image_shape" in meta:
        model.output_image_shape = tuple(meta["output_image_shape"])
    if meta.get("quant_spec"):
        model = prepare_qat(model, QuantSpec(**meta["quant_spec"]))
        for name, node in model.fake_quant_nodes():
            node.load_state_arrays({k: arrays[f"{name}.{k}"] for k in ("scale", "zero_point", "obs_min", "obs_max")})
            flags = meta["fake_quant"].get(name, {})
            node.observe = flags.get("observe", True)
            node.enabled = flags.get("enabled", True)
    return model.eval()


def load_checkpoint(path):
    """Return ``(model, meta)``; the model comes back in eval mode."""
    header, arrays = containers.load(path, "checkpoint")
    return model_from_state(header["meta"], arrays), header["meta"]

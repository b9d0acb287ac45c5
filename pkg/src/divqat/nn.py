"""Layers, models and the desk-scale reference architectures."""
import copy
import hashlib

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor, no_grad


class Parameter(Tensor):
    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True):
        arr = np.asarray(data)
        super().__init__(np.array(arr, dtype=np.float64 if arr.dtype == np.float64 else np.float32))
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Layer:
    kind = "layer"

    def __init__(self):
        self.weight_fq = None
        self.act_fq = None

    def params(self):
        return []

    def output_shape(self, shape):
        return shape

    def describe(self):
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / in_features)
        self.weight = Parameter(rng.normal(0.0, std, (in_features, out_features)).astype(np.float32))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, training):
        w = self.weight if self.weight_fq is None else self.weight_fq(self.weight, training)
        return x @ w + self.bias

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ConfigError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def describe(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1, stride=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))
        self.padding = padding
        self.stride = stride

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, training):
        w = self.weight if self.weight_fq is None else self.weight_fq(self.weight, training)
        return T.conv2d(x, w, self.bias, self.padding, self.stride)

    def output_shape(self, shape):
        o, c, kh, kw = self.weight.shape
        if len(shape) != 3 or shape[0] != c:
            raise ConfigError(f"conv2d expects ({c}, H, W), got {shape}")
        h = (shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ConfigError(f"conv2d output would be empty for input {shape}")
        return (o, h, w)

    def describe(self):
        o, c, k, _ = self.weight.shape
        return {"kind": self.kind, "in": c, "out": o, "k": k, "padding": self.padding, "stride": self.stride}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        return T.relu(x)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, training):
        return T.sigmoid(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training):
        return x.reshape(x.shape[0], -1)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Model:
    """An ordered stack of layers mapping ``[B, *input_shape]`` to logits ``[B, K]``."""

    def __init__(self, layers, input_shape, arch="custom"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.arch = arch
        self.training = True
        self.quant_spec = None
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ConfigError(f"model must end in a vector, got output shape {shape}")
        self.num_classes = shape[0]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x):
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"batch shape {x.shape} does not match model input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, self.training)
            if layer.act_fq is not None:
                x = layer.act_fq(x, self.training)
        return x

    __call__ = forward

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"{i}.{name}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def fake_quant_nodes(self):
        nodes = []
        for i, layer in enumerate(self.layers):
            if layer.weight_fq is not None:
                nodes.append((f"{i}.weight_fq", layer.weight_fq))
            if layer.act_fq is not None:
                nodes.append((f"{i}.act_fq", layer.act_fq))
        return nodes

    def predict_logits(self, x, batch_size=500):
        if len(x) == 0:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        prev = self.training
        self.eval()
        try:
            with no_grad():
                chunks = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            self.training = prev
        return np.concatenate(chunks, axis=0)

    def predict_proba(self, x, batch_size=500):
        """Softmax probabilities in float64, computed in eval mode without recording."""
        return T.softmax(self.predict_logits(x, batch_size).astype(np.float64))

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Deep copy with every parameter cast (used for float64 gradient checks)."""
        m = self.copy()
        for p in m.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return m

    def state_arrays(self):
        """Ordered name -> array map of parameters then quantization buffers."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, node in self.fake_quant_nodes():
            for k, v in node.state_arrays().items():
                out[f"{name}.{k}"] = v
        return out

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def describe(self):
        return [layer.describe() for layer in self.layers]


ARCHITECTURES = ("mini_conv", "mini_conv_wide", "mlp", "generator")


def build_model(arch, input_shape, num_classes, seed=0, latent_dim=None):
    """Construct a registered architecture with weights drawn from ``seed``.

    ``mini_conv``: conv3x3x8, relu, conv3x3x16, relu, flatten, dense K.
    ``mini_conv_wide``: same with 16/32 channels.
    ``mlp``: flatten, dense 64, relu, dense 64, relu, dense K.
    ``generator``: latent -> dense 64 -> relu -> dense prod(input_shape) -> sigmoid,
    reshaped to ``input_shape`` by the caller.
    """
    rng = np.random.default_rng(seed)
    input_shape = tuple(int(s) for s in input_shape)
    if arch in ("mini_conv", "mini_conv_wide"):
        if len(input_shape) != 3:
            raise ConfigError(f"{arch} needs an image input (C, H, W), got {input_shape}")
        c, h, w = input_shape
        c1, c2 = (8, 16) if arch == "mini_conv" else (16, 32)
        layers = [Conv2d(c, c1, 3, 1, rng=rng), ReLU(), Conv2d(c1, c2, 3, 1, rng=rng), ReLU(),
                  Flatten(), Dense(c2 * h * w, num_classes, rng=rng)]
    elif arch == "mlp":
        d = int(np.prod(input_shape))
        layers = [Flatten()] if len(input_shape) > 1 else []
        layers += [Dense(d, 64, rng=rng), ReLU(), Dense(64, 64, rng=rng), ReLU(), Dense(64, num_classes, rng=rng)]
    elif arch == "generator":
        if latent_dim is None:
            raise ConfigError("generator needs latent_dim")
        d = int(np.prod(input_shape))
        layers = [Dense(latent_dim, 64, rng=rng), ReLU(), Dense(64, d, rng=rng), Sigmoid()]
        model = Model(layers, (latent_dim,), arch="generator")
        model.output_image_shape = input_shape
        return model
    else:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return Model(layers, input_shape, arch=arch)

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from modules.loss import LossConfig, hinge_sd_grad, hinge_sd_loss
from utils.data_io import read_bytes
from utils.data_processing import DescriptorField, image_patches, normalize_patches
from utils.errors import BadMagicError, NetError, TruncatedFileError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFNC"
CHECKPOINT_VERSION = 1

# Floor inside the square root of descriptor distances
DISTANCE_EPS = 1e-8

# Pixels per forward batch in describe_field; fixed so results never depend on worker count
FIELD_CHUNK_PIXELS = 1024


def default_architecture(descriptor_dim=64):
    """Three strided tanh convolutions followed by a dense map to the descriptor"""
    return [
        {"type": "conv", "channels": 16, "kernel": 5, "stride": 2},
        {"type": "tanh"},
        {"type": "conv", "channels": 32, "kernel": 5, "stride": 2},
        {"type": "tanh"},
        {"type": "conv", "channels": 64, "kernel": 3, "stride": 2},
        {"type": "tanh"},
        {"type": "dense", "units": descriptor_dim},
    ]


class Conv2D:
    """Valid (unpadded) strided convolution over (N, C, H, W) inputs"""

    kind = "conv"

    def __init__(self, in_channels, channels, kernel, stride=1):
        self.in_channels = in_channels
        self.channels = channels
        self.kernel = kernel
        self.stride = stride

    def param_shapes(self):
        return [(self.channels, self.in_channels, self.kernel, self.kernel), (self.channels,)]

    def fans(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.channels * k2

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise NetError(f"Convolution expects {self.in_channels} channels, got {c}")
        if h < self.kernel or w < self.kernel:
            raise NetError(f"Input {h}x{w} is smaller than the {self.kernel}x{self.kernel} kernel")
        return (self.channels, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def _windows(self, x):
        s = self.stride
        return sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x, params):
        weight, bias = params
        windows = self._windows(x)
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
        return np.ascontiguousarray(out), x

    def backward(self, grad_out, cache, params):
        weight, _ = params
        x = cache
        windows = self._windows(x)
        grad_weight = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = grad_out.sum(axis=(0, 2, 3))

        s = self.stride
        out_h, out_w = grad_out.shape[2], grad_out.shape[3]
        spread = np.tensordot(grad_out, weight, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        grad_x = np.zeros_like(x)
        for i in range(self.kernel):
            for j in range(self.kernel):
                grad_x[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += \
                    spread[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grad_x, [grad_weight, grad_bias]


class Tanh:
    kind = "tanh"

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, params):
        y = np.tanh(x)
        return y, y

    def backward(self, grad_out, cache, params):
        return grad_out * (1.0 - cache ** 2), []


class Dense:
    """Affine map of the flattened input"""

    kind = "dense"

    def __init__(self, in_features, units):
        self.in_features = in_features
        self.units = units

    def param_shapes(self):
        return [(self.units, self.in_features), (self.units,)]

    def fans(self):
        return self.in_features, self.units

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise NetError(f"Dense layer expects {self.in_features} inputs, got shape {in_shape}")
        return (self.units,)

    def forward(self, x, params):
        weight, bias = params
        flat = x.reshape(x.shape[0], -1)
        return flat @ weight.T + bias, (flat, x.shape)

    def backward(self, grad_out, cache, params):
        weight, _ = params
        flat, in_shape = cache
        grad_weight = grad_out.T @ flat
        grad_bias = grad_out.sum(axis=0)
        grad_x = (grad_out @ weight).reshape(in_shape)
        return grad_x, [grad_weight, grad_bias]


class DescriptorNet:
    """
    Feed-forward stack of convolution, tanh and dense layers

    The same class backs the patch descriptor network and the small digit
    classifier of the schedule benchmark.
    """

    def __init__(self, layer_specs, input_size, in_channels=1, seed=0, parameters=None):
        """
        Build the layers and initialize (or load) their parameters

        Args:
            layer_specs (list): Dicts with "type" in {"conv", "tanh", "dense"}
            input_size (int): Side length of the square input
            in_channels (int): Input channels
            seed (int): Seed of the uniform Glorot initialization
            parameters (list): Optional parameter arrays in enumeration order
        """
        self.layer_specs = [dict(spec) for spec in layer_specs]
        self.input_size = int(input_size)
        self.in_channels = int(in_channels)
        self.seed = int(seed)
        self.logger = logging.getLogger(__name__)

        self.layers = []
        shape = (self.in_channels, self.input_size, self.input_size)
        for spec in self.layer_specs:
            kind = spec.get("type")
            if kind == "conv":
                layer = Conv2D(shape[0], int(spec["channels"]), int(spec["kernel"]), int(spec.get("stride", 1)))
            elif kind == "tanh":
                layer = Tanh()
            elif kind == "dense":
                layer = Dense(int(np.prod(shape)), int(spec["units"]))
            else:
                raise NetError(f"Unknown layer type: {kind}")
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if len(shape) != 1:
            raise NetError("Network must end with a dense layer")
        self.output_dim = shape[0]

        if parameters is None:
            parameters = self._initialize()
        self.params = self._check_parameters(parameters)

    def _initialize(self):
        rng = np.random.default_rng(self.seed)
        params = []
        for layer in self.layers:
            shapes = layer.param_shapes()
            if not shapes:
                continue
            fan_in, fan_out = layer.fans()
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-limit, limit, size=shapes[0]))
            params.append(np.zeros(shapes[1]))
        return params

    def _check_parameters(self, parameters):
        expected = [shape for layer in self.layers for shape in layer.param_shapes()]
        if len(parameters) != len(expected):
            raise NetError(f"Expected {len(expected)} parameter arrays, got {len(parameters)}")
        checked = []
        for array, shape in zip(parameters, expected):
            array = np.array(array, dtype=np.float64, copy=True)
            if array.shape != tuple(shape):
                raise NetError(f"Parameter shape {array.shape} does not match {tuple(shape)}")
            if not np.all(np.isfinite(array)):
                raise NetError("Parameters must be finite")
            checked.append(array)
        return checked

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params))

    def architecture(self):
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "seed": self.seed,
            "layers": self.layer_specs,
        }

    def with_parameters(self, parameters):
        return DescriptorNet(self.layer_specs, self.input_size, self.in_channels, self.seed, parameters)

    def _layer_params(self):
        cursor = 0
        for layer in self.layers:
            count = len(layer.param_shapes())
            yield layer, self.params[cursor:cursor + count]
            cursor += count

    def forward(self, x):
        """
        Run a batch of inputs (N, C, S, S) through the stack

        Returns:
            tuple: (outputs of shape (N, D), per-layer caches for backward)
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.input_size, self.input_size):
            raise NetError(
                f"Expected input of shape (N, {self.in_channels}, {self.input_size}, {self.input_size}), "
                f"got {x.shape}"
            )
        caches = []
        for layer, params in self._layer_params():
            x, cache = layer.forward(x, params)
            caches.append(cache)
        return x, caches

    def backward(self, grad_out, caches):
        """Gradients of all parameters, in enumeration order, given dL/d(outputs)"""
        grads = []
        layer_params = list(self._layer_params())
        for (layer, params), cache in zip(reversed(layer_params), reversed(caches)):
            grad_out, layer_grads = layer.backward(grad_out, cache, params)
            grads = layer_grads + grads
        return grads

    def predict(self, x):
        return self.forward(x)[0]


@dataclass
class TripletPatches:
    """Normalized anchor, positive and negative patches, each (n, P, P)"""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.anchors)

    def subset(self, index):
        return TripletPatches(self.anchors[index], self.positives[index], self.negatives[index])


@dataclass
class OptState:
    """SGD with classical momentum; the learning rate halves every halving_epochs"""

    learning_rate: float
    momentum: float
    velocity: list
    epoch: int = 0
    halving_epochs: int = 100

    @classmethod
    def create(cls, net, learning_rate=0.01, momentum=0.9, halving_epochs=100):
        return cls(learning_rate, momentum, [np.zeros_like(p) for p in net.params], 0, halving_epochs)

    @property
    def current_lr(self):
        if self.halving_epochs <= 0:
            return self.learning_rate
        return self.learning_rate * 0.5 ** (self.epoch // self.halving_epochs)

    def next_epoch(self):
        return OptState(self.learning_rate, self.momentum, self.velocity, self.epoch + 1, self.halving_epochs)


def describe(net, patch):
    """
    Descriptor of a single patch

    Args:
        net (DescriptorNet): Network
        patch (Patch): Input patch (already normalized when used for matching)

    Returns:
        numpy.ndarray: Length-D descriptor
    """
    if patch.size != net.input_size:
        raise NetError(f"Patch size {patch.size} does not match network input {net.input_size}")
    return net.predict(patch.data[None, None])[0]


def _describe_rows(net, img, patch_size, rows):
    patches = normalize_patches(image_patches(img, patch_size, rows))
    batch = patches.reshape(-1, 1, patch_size, patch_size)
    return net.predict(batch).reshape(len(rows), img.width, net.output_dim)


def describe_field(net, img, patch_size=None, workers=1):
    """
    Per-pixel descriptors of a whole image

    Every pixel is described from its normalized, mirror-padded window, so the
    result matches describe(net, normalize_patch(extract_patch(img, p, P))).

    Args:
        net (DescriptorNet): Network
        img (GrayImage): Image
        patch_size (int): Patch side length (defaults to the network input size)
        workers (int): Threads used for the forward passes

    Returns:
        DescriptorField: Field of shape (height, width, D)
    """
    patch_size = net.input_size if patch_size is None else int(patch_size)
    if patch_size != net.input_size:
        raise NetError(f"Patch size {patch_size} does not match network input {net.input_size}")

    rows_per_chunk = max(1, FIELD_CHUNK_PIXELS // img.width)
    chunks = [range(start, min(start + rows_per_chunk, img.height))
              for start in range(0, img.height, rows_per_chunk)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            blocks = list(executor.map(lambda rows: _describe_rows(net, img, patch_size, rows), chunks))
    else:
        blocks = [_describe_rows(net, img, patch_size, rows) for rows in chunks]

    return DescriptorField.from_array(np.concatenate(blocks, axis=0))


def _distances(diff):
    squared = np.sum(diff ** 2, axis=1)
    return np.sqrt(np.maximum(squared, DISTANCE_EPS)), squared > DISTANCE_EPS


def _forward_triplets(net, batch):
    n = len(batch)
    if n == 0:
        raise NetError("Triplet batch must not be empty")
    x = np.concatenate([batch.anchors, batch.positives, batch.negatives], axis=0)[:, None]
    out, caches = net.forward(x)
    return out[:n], out[n:2 * n], out[2 * n:], caches


def triplet_distances(net, batch):
    """Descriptor distances (d_match, d_nonmatch) of every triplet in a batch"""
    anchors, positives, negatives, _ = _forward_triplets(net, batch)
    d_match, _ = _distances(anchors - positives)
    d_nonmatch, _ = _distances(anchors - negatives)
    return d_match, d_nonmatch


def loss_and_grad(net, batch, loss_cfg=None):
    """
    Hinge+SD loss of a triplet batch and its exact parameter gradients

    Args:
        net (DescriptorNet): Network
        batch (TripletPatches): Normalized triplet patches
        loss_cfg (LossConfig): Margin and mixing weight

    Returns:
        tuple: (loss value, list of gradients aligned with net.params)
    """
    loss_cfg = loss_cfg or LossConfig()
    anchors, positives, negatives, caches = _forward_triplets(net, batch)

    diff_match = anchors - positives
    diff_nonmatch = anchors - negatives
    d_match, live_match = _distances(diff_match)
    d_nonmatch, live_nonmatch = _distances(diff_nonmatch)

    loss = hinge_sd_loss(d_match, d_nonmatch, loss_cfg)
    g_match, g_nonmatch = hinge_sd_grad(d_match, d_nonmatch, loss_cfg)

    # d sqrt(|diff|^2) / d diff = diff / distance, zero under the floor
    coef_match = np.where(live_match, g_match / d_match, 0.0)[:, None]
    coef_nonmatch = np.where(live_nonmatch, g_nonmatch / d_nonmatch, 0.0)[:, None]

    grad_out = np.concatenate([
        coef_match * diff_match + coef_nonmatch * diff_nonmatch,
        -coef_match * diff_match,
        -coef_nonmatch * diff_nonmatch,
    ], axis=0)
    return loss, net.backward(grad_out, caches)


def sgd_step(net, grads, opt):
    """
    One momentum SGD update: v <- momentum * v - lr * g; theta <- theta + v

    Returns:
        tuple: (updated DescriptorNet, updated OptState)
    """
    if len(grads) != len(net.params) or len(opt.velocity) != len(net.params):
        raise NetError("Gradient and velocity lists must match the network parameters")
    lr = opt.current_lr
    new_params, new_velocity = [], []
    for param, grad, velocity in zip(net.params, grads, opt.velocity):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape or velocity.shape != param.shape:
            raise NetError(f"Gradient shape {grad.shape} does not match parameter shape {param.shape}")
        velocity = opt.momentum * velocity - lr * grad
        new_velocity.append(velocity)
        new_params.append(param + velocity)
    new_opt = OptState(opt.learning_rate, opt.momentum, new_velocity, opt.epoch, opt.halving_epochs)
    return net.with_parameters(new_params), new_opt


def save_checkpoint(path, net):
    """
    Write a network to a versioned binary checkpoint

    Layout: magic "DFNC", uint32 version, uint32 length + UTF-8 JSON
    architecture, uint64 parameter count, then the parameters as
    little-endian float64 in enumeration order.
    """
    header = json.dumps(net.architecture(), sort_keys=True).encode("utf-8")
    values = np.concatenate([p.ravel() for p in net.params]).astype("<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<Q", values.size))
        f.write(values.tobytes())
    logger.info(f"Saved checkpoint with {values.size} parameters to {path}")


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint"""
    blob = read_bytes(path, module="net")
    if len(blob) < 12:
        raise TruncatedFileError(f"Checkpoint {path} is truncated", module="net")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"Checkpoint {path} has bad magic {blob[:4]!r}", module="net")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise NetError(f"Unsupported checkpoint version {version}")
    offset = 12 + header_len
    if len(blob) < offset + 8:
        raise TruncatedFileError(f"Checkpoint {path} is truncated in its header", module="net")
    arch = json.loads(blob[12:offset].decode("utf-8"))
    (count,) = struct.unpack("<Q", blob[offset:offset + 8])
    body = blob[offset + 8:]
    if len(body) != count * 8:
        raise TruncatedFileError(f"Checkpoint {path} holds {len(body)} parameter bytes, expected {count * 8}",
                                 module="net")

    shell = DescriptorNet(arch["layers"], arch["input_size"], arch["in_channels"], arch["seed"])
    if shell.param_count != count:
        raise NetError(f"Checkpoint parameter count {count} does not match architecture ({shell.param_count})")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params, cursor = [], 0
    for p in shell.params:
        params.append(values[cursor:cursor + p.size].reshape(p.shape))
        cursor += p.size
    return shell.with_parameters(params)

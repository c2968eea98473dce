"""Quantization-aware training in floating point.

The sim forward pass computes exactly what the integer runtime computes: input
codes are floor(p / 16), weights are rounded and saturated, and every SBNQ
layer emits clamp(floor((act - round(mu)) / 2^shift)). All of these are exact
in floating point, so eval-mode logits equal the integer logits bit for bit.

Gradients use a clipped straight-through estimator for both the activation
quantizer and weight rounding.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import itensor
from .data import LabeledDataset, batches
from .model import Conv2D, Flatten, Linear, MaxPool, ModelGraph, SimSBNQ
from .quantcore import QuantSpec, fused_shift, round_half_away, weight_init_std

log = logging.getLogger(__name__)

# the state type of a sim SBNQ layer is the graph layer itself
SimSbnqState = SimSBNQ


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 12
    batch_size: int = 64
    seed: int = 0
    weight_bitwidth: int = 4
    activation_bitwidth: int = 4
    lr_step: int = 5  # multiply lr by lr_gamma every lr_step epochs; 0 = constant
    lr_gamma: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be > 0 and momentum in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.weight_bitwidth < 2 or self.activation_bitwidth < 2:
            raise ValueError("bitwidths must be >= 2")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


def sigma_floor(bits: int) -> float:
    return 2.0 ** (3 - bits - 30)


def init_weights(shape, bits: int, seed: int) -> np.ndarray:
    """Gaussian weights with std 2^(N-3), so +-4 sigma spans the integer range."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, weight_init_std(bits), size=tuple(shape))


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------

def round_half_away_t(x: torch.Tensor) -> torch.Tensor:
    t = torch.trunc(x)
    return t + torch.sign(x) * ((x - t).abs() >= 0.5).to(x.dtype)


def saturation_mask(y: torch.Tensor, lo: int, hi: int) -> torch.Tensor:
    """True where floor(y) lies inside [lo, hi], i.e. the quantizer did not saturate."""
    f = torch.floor(y)
    return (f >= lo) & (f <= hi)


class _FloorClamp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y, lo, hi):
        ctx.save_for_backward(y)
        ctx.bounds = (lo, hi)
        return torch.clamp(torch.floor(y), lo, hi)

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        return ste_mask_grad(grad, y, *ctx.bounds), None, None


def ste_mask_grad(grad: torch.Tensor, y: torch.Tensor, lo: int, hi: int) -> torch.Tensor:
    return grad * saturation_mask(y, lo, hi).to(grad.dtype)


def fake_quant_weight(w: torch.Tensor, bits: int) -> torch.Tensor:
    """round + saturate in the forward pass; identity gradient unless saturated."""
    spec = QuantSpec(bits, True)
    q = round_half_away_t(w)
    mask = ((q >= spec.qmin) & (q <= spec.qmax)).to(w.dtype)
    q = torch.clamp(q, spec.qmin, spec.qmax)
    return q.detach() + (w - w.detach()) * mask


def pixels_to_codes(images_u8) -> torch.Tensor:
    """floor(p / 16), the float mirror of the integer p >> 4."""
    x = torch.as_tensor(np.asarray(images_u8), dtype=torch.float64)
    return torch.floor(x / 16.0)


# ---------------------------------------------------------------------------
# SBNQ simulation
# ---------------------------------------------------------------------------

def _channel_view(v: torch.Tensor, ndim: int) -> torch.Tensor:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_dims(act: torch.Tensor):
    return [0] + list(range(2, act.dim()))


def _used_stats(act, state: SimSBNQ, training: bool):
    """(mu, sigma) tensors the forward pass divides by; updates running stats in training."""
    if not training:
        mu = torch.as_tensor(state.running_mu, dtype=act.dtype)
        sigma = torch.as_tensor(state.running_sigma, dtype=act.dtype)
        return mu, sigma
    dims = _reduce_dims(act)
    mu = act.mean(dims)
    var = act.var(dims, unbiased=False)
    if not (torch.isfinite(mu).all() and torch.isfinite(var).all()):
        raise DivergenceError("non-finite activations reached an SBNQ layer")
    sigma = torch.sqrt(var.clamp_min(sigma_floor(state.bits) ** 2))
    m = state.momentum
    batch_mu = mu.detach().double().cpu().numpy()
    batch_sigma = sigma.detach().double().cpu().numpy()
    state.running_mu = (1 - m) * state.running_mu + m * batch_mu
    state.running_sigma = np.maximum((1 - m) * state.running_sigma + m * batch_sigma, sigma_floor(state.bits))
    state.batches_seen += 1
    return mu, sigma


def sim_sbnq_pre(act: torch.Tensor, state: SimSBNQ, training: bool) -> torch.Tensor:
    """The real value the quantizer floors: (act - round(mu)) / 2^shift.

    In training, round(mu) passes gradients as mu does, and 2^shift passes
    gradients as c * sigma with c = 2^shift / sigma held constant; the forward
    value is exactly the integer-path one either way.
    """
    if act.shape[1] != state.channels:
        raise ValueError(f"SBNQ layer has {state.channels} channels, input has {act.shape[1]}")
    mu, sigma = _used_stats(act, state, training)
    bias_val = torch.as_tensor(round_half_away(mu.detach().double().cpu().numpy()), dtype=act.dtype)
    shift = fused_shift(sigma.detach().double().cpu().numpy(), state.spec)
    pow2 = torch.as_tensor(np.ldexp(1.0, np.atleast_1d(shift)), dtype=act.dtype)
    if training:
        bias = mu + (bias_val - mu).detach()
        scaled = sigma * (pow2 / sigma).detach()
        divisor = pow2 + (scaled - scaled.detach())
    else:
        bias, divisor = bias_val, pow2
    return (act - _channel_view(bias, act.dim())) / _channel_view(divisor, act.dim())


def sim_sbnq_forward(act: torch.Tensor, state: SimSBNQ, training: bool) -> torch.Tensor:
    """Float mirror of ``sbnq_int``, with batch stats (training) or running stats."""
    y = sim_sbnq_pre(act, state, training)
    spec = state.spec
    # with ReLU fused, floor(max(y, 0)) clamped below at 0 is the same as clamping floor(y)
    return _FloorClamp.apply(y, spec.qmin, spec.qmax)


def ste_backward(upstream_grad: torch.Tensor, act: torch.Tensor, state: SimSBNQ) -> torch.Tensor:
    """Gradient of the SBNQ quantizer w.r.t. its pre-quantization value.

    Passes ``upstream_grad`` through where the quantizer did not saturate and
    zeroes it where it did. Uses the running statistics.
    """
    with torch.no_grad():
        y = sim_sbnq_pre(act, state, training=False)
    spec = state.spec
    return ste_mask_grad(upstream_grad, y, spec.qmin, spec.qmax)


# ---------------------------------------------------------------------------
# sim network
# ---------------------------------------------------------------------------

def _head_index(graph: ModelGraph) -> int:
    return max(i for i, l in enumerate(graph.layers) if isinstance(l, (Conv2D, Linear)))


class SimNet(nn.Module):
    """Trainable torch view of a sim graph. Shares SBNQ state objects with the graph."""

    def __init__(self, graph: ModelGraph, dtype=torch.float32):
        super().__init__()
        if graph.flavor != "sim":
            raise ValueError("SimNet needs a sim-flavor graph")
        self.graph = graph
        self.weights = nn.ParameterList()
        self.plan = []
        for layer in graph.layers:
            if isinstance(layer, (Conv2D, Linear)):
                self.weights.append(nn.Parameter(torch.as_tensor(layer.weight, dtype=dtype)))
                self.plan.append((layer, len(self.weights) - 1))
            else:
                self.plan.append((layer, None))
        fan_in = graph.layers[_head_index(graph)].weight[0].size
        # loss-only logit temperature; argmax is unaffected, so it is not exported
        init = 1.0 / (weight_init_std(graph.weight_bits) * math.sqrt(fan_in) * 2.0)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(init), dtype=dtype))

    def forward(self, x: torch.Tensor, training: bool | None = None) -> torch.Tensor:
        training = self.training if training is None else training
        bits = self.graph.weight_bits
        for layer, k in self.plan:
            if isinstance(layer, Conv2D):
                w = fake_quant_weight(self.weights[k], bits)
                x = F.conv2d(x, w.to(x.dtype), stride=layer.stride, padding=layer.padding)
            elif isinstance(layer, Linear):
                w = fake_quant_weight(self.weights[k], bits)
                x = F.linear(x, w.to(x.dtype))
            elif isinstance(layer, SimSBNQ):
                x = sim_sbnq_forward(x, layer, training)
            elif isinstance(layer, MaxPool):
                x = F.max_pool2d(x, layer.window, layer.stride)
            elif isinstance(layer, Flatten):
                x = torch.flatten(x, 1)
        return x

    def write_back(self):
        for layer, k in self.plan:
            if k is not None:
                layer.weight = self.weights[k].detach().double().cpu().numpy().copy()


def sim_logits(graph: ModelGraph, images_u8: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode sim forward in float64; returns integer-valued logits as int64."""
    net = SimNet(graph, dtype=torch.float64).eval()
    outs = []
    with torch.no_grad():
        for s in range(0, len(images_u8), batch_size):
            outs.append(net(pixels_to_codes(images_u8[s:s + batch_size]), training=False).numpy())
    if not outs:
        return np.zeros((0, graph.num_classes), dtype=np.int64)
    logits = np.concatenate(outs)
    if not np.array_equal(logits, np.round(logits)):
        raise ArithmeticError("sim logits are not integer-valued")
    return logits.astype(np.int64)


def evaluate_sim(graph: ModelGraph, ds: LabeledDataset, batch_size: int = 500) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(sim_logits(graph, ds.images, batch_size).argmax(1) == ds.labels))


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _set_threads():
    torch.set_num_threads(itensor.num_threads())


def _param_groups(net: SimNet, lr: float) -> list[dict]:
    # each weight layer feeds a normalizer, so raw gradients shrink like 1/sqrt(fan_in)
    groups = [{"params": [w], "lr": lr * math.sqrt(w[0].numel())} for w in net.weights]
    groups.append({"params": [net.log_temperature], "lr": lr})
    return groups


def train(
    model: ModelGraph,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    val: LabeledDataset | None = None,
    progress=None,
) -> tuple[ModelGraph, list[EpochMetrics]]:
    """SGD with momentum on cross-entropy, returning a trained copy of ``model``.

    Weights are fake-quantized on every forward pass; SBNQ layers use batch
    statistics and update their moving averages. Validation accuracy is the
    eval-mode sim accuracy, which equals integer-path accuracy.
    """
    if model.flavor != "sim":
        raise ValueError("train needs a sim-flavor graph")
    if len(dataset) == 0:
        raise ValueError("empty training set")
    graph = model.copy()
    metrics: list[EpochMetrics] = []
    if cfg.epochs == 0:
        return graph, metrics
    _seed_everything(cfg.seed)
    _set_threads()
    net = SimNet(graph)
    opt = torch.optim.SGD(_param_groups(net, cfg.learning_rate), lr=cfg.learning_rate, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_step, cfg.lr_gamma) if cfg.lr_step else None
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        total_loss, correct, seen = 0.0, 0, 0
        for images, labels in batches(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed * 1000 + epoch):
            x = pixels_to_codes(images).float()
            y = torch.as_tensor(labels)
            logits = net(x)
            loss = F.cross_entropy(logits * net.log_temperature.exp(), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(labels)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(labels)
        if sched is not None:
            sched.step()
        net.write_back()
        val_acc = evaluate_sim(graph, val) if val is not None and len(val) else float("nan")
        m = EpochMetrics(epoch, total_loss / seen, correct / seen, val_acc)
        metrics.append(m)
        if progress is not None:
            progress(m)
    return graph, metrics


def write_metrics(path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for m in metrics:
            w.writerow([m.epoch, repr(m.train_loss), repr(m.train_acc), repr(m.val_acc)])


# ---------------------------------------------------------------------------
# float baseline
# ---------------------------------------------------------------------------

class FloatNet(nn.Module):
    """Same topology with float weights and ordinary BatchNorm (+ReLU where SBNQ fuses it)."""

    def __init__(self, graph: ModelGraph):
        super().__init__()
        mods = []
        layers = graph.layers
        head = _head_index(graph)
        for i, layer in enumerate(layers):
            if isinstance(layer, Conv2D):
                mods.append(nn.Conv2d(layer.in_channels, layer.out_channels, layer.kernel,
                                      layer.stride, layer.padding, bias=i == head))
            elif isinstance(layer, Linear):
                mods.append(nn.Linear(layer.in_features, layer.out_features, bias=i == head))
            elif isinstance(layer, SimSBNQ):
                prev = layers[i - 1]
                mods.append(nn.BatchNorm2d(layer.channels) if isinstance(prev, Conv2D) else nn.BatchNorm1d(layer.channels))
                if layer.fuse_relu:
                    mods.append(nn.ReLU())
            elif isinstance(layer, MaxPool):
                mods.append(nn.MaxPool2d(layer.window, layer.stride))
            elif isinstance(layer, Flatten):
                mods.append(nn.Flatten())
        self.body = nn.Sequential(*mods)

    def forward(self, x):
        return self.body(x)


def _float_inputs(images) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images), dtype=torch.float32) / 255.0


def evaluate_float(net: FloatNet, ds: LabeledDataset, batch_size: int = 500) -> float:
    net.eval()
    correct = 0
    with torch.no_grad():
        for images, labels in batches(ds, batch_size):
            correct += int((net(_float_inputs(images)).argmax(1).numpy() == labels).sum())
    return correct / len(ds) if len(ds) else float("nan")


def train_float_baseline(
    model: ModelGraph, dataset: LabeledDataset, cfg: TrainConfig,
    val: LabeledDataset | None = None, progress=None,
) -> tuple[FloatNet, list[EpochMetrics]]:
    """Train the float counterpart of a sim graph's topology, same optimizer."""
    _seed_everything(cfg.seed)
    _set_threads()
    net = FloatNet(model)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_step, cfg.lr_gamma) if cfg.lr_step else None
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        total_loss, correct, seen = 0.0, 0, 0
        for images, labels in batches(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed * 1000 + epoch):
            y = torch.as_tensor(labels)
            logits = net(_float_inputs(images))
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(labels)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(labels)
        if sched is not None:
            sched.step()
        val_acc = evaluate_float(net, val) if val is not None and len(val) else float("nan")
        m = EpochMetrics(epoch, total_loss / seen, correct / seen, val_acc)
        metrics.append(m)
        if progress is not None:
            progress(m)
    return net, metrics

"""Symmetric uniform fake quantization with a clipped straight-through gradient.

A value ``v`` is mapped to ``clamp(round(S * v), -qmax, qmax) / S`` where
``qmax = 2**(k-1) - 1`` and ``S = qmax / max|x|``. Rounding is half away from
zero so the quantizer is an odd function.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateRange, UnsupportedLayer

log = logging.getLogger(__name__)

ACT_DECAY = 0.9


def qmax_for(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float
    zero_point: float = 0.0

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point = 0) is supported")

    @property
    def clamp_hi(self) -> int:
        return qmax_for(self.bits)

    @property
    def clamp_lo(self) -> int:
        return -qmax_for(self.bits)


def compute_scale(tensor, bits: int) -> float:
    """Per-tensor scale ``(2**(bits-1) - 1) / max|tensor|``."""
    if bits < 2:
        raise ValueError("bits must be >= 2")
    t = torch.as_tensor(tensor)
    if t.numel() == 0:
        raise ValueError("cannot compute a scale for an empty tensor")
    peak = float(t.detach().abs().max())
    if peak == 0.0:
        raise DegenerateRange("max |x| is zero")
    return qmax_for(bits) / peak


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    # x - trunc(x) is exact in floating point, so ties are detected exactly.
    t = torch.trunc(x)
    return torch.where((x - t).abs() >= 0.5, t + torch.sign(x), t)


class _FakeQuantSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale, qmax):
        scaled = x * scale
        ctx.save_for_backward(scaled.abs() <= qmax)
        return torch.clamp(round_half_away(scaled), -qmax, qmax) / scale

    @staticmethod
    def backward(ctx, grad):
        (in_range,) = ctx.saved_tensors
        return grad * in_range.to(grad.dtype), None, None


def _fq(x: torch.Tensor, scale, bits: int) -> torch.Tensor:
    if bits > 24 and x.dtype in (torch.float16, torch.bfloat16, torch.float32):
        # grid finer than the float32 mantissa: do the arithmetic in float64
        scale = torch.as_tensor(scale, dtype=torch.float64)
        return _FakeQuantSTE.apply(x.double(), scale, float(qmax_for(bits))).to(x.dtype)
    scale = torch.as_tensor(scale, dtype=x.dtype)
    return _FakeQuantSTE.apply(x, scale, float(qmax_for(bits)))


def fake_quantize(value, spec: QuantSpec):
    """Quantize-dequantize ``value`` on the grid described by ``spec``.

    Accepts torch tensors (differentiable via the clipped STE), numpy arrays
    or Python scalars; the return type follows the input.
    """
    if isinstance(value, torch.Tensor):
        return _fq(value, spec.scale, spec.bits)
    arr = np.asarray(value, dtype=np.float64)
    out = _fq(torch.from_numpy(arr), spec.scale, spec.bits).numpy()
    return out if out.ndim else float(out)


def ste_gradient(upstream, value, spec: QuantSpec):
    """Gradient the fake quantizer sends back: ``upstream`` where ``|S v| <= qmax``, else 0."""
    up, v = torch.as_tensor(upstream), torch.as_tensor(value)
    if up.shape != v.shape:
        raise ValueError(f"shape mismatch {tuple(up.shape)} vs {tuple(v.shape)}")
    mask = (v * spec.scale).abs() <= spec.clamp_hi
    out = up * mask.to(up.dtype)
    return out if isinstance(upstream, torch.Tensor) else out.numpy()


# --------------------------------------------------------------------------
# module wrappers

class WeightQuantizer(nn.Module):
    """Scale recomputed from the live weight tensor on every forward."""

    def __init__(self, bits: int):
        super().__init__()
        self.bits = bits

    def scale_for(self, w: torch.Tensor) -> torch.Tensor:
        peak = w.detach().abs().max()
        if peak == 0:
            log.warning("all-zero weight tensor; using scale 1")
            return torch.ones((), dtype=w.dtype)
        return qmax_for(self.bits) / peak

    def forward(self, w):
        return _fq(w, self.scale_for(w), self.bits)

    def spec(self, w: torch.Tensor) -> QuantSpec:
        return QuantSpec(self.bits, float(self.scale_for(w)))

    def extra_repr(self):
        return f"bits={self.bits}"


class ActivationQuantizer(nn.Module):
    """Scale from an exponential running max of |x|, updated only in training mode."""

    def __init__(self, bits: int, decay: float = ACT_DECAY):
        super().__init__()
        self.bits = bits
        self.decay = decay
        self.register_buffer("running_max", torch.zeros(()))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @torch.no_grad()
    def observe(self, x: torch.Tensor) -> None:
        peak = x.detach().abs().max().to(self.running_max.dtype)
        if bool(self.initialized):
            self.running_max.mul_(self.decay).add_((1.0 - self.decay) * peak)
        else:
            self.running_max.copy_(peak)
            self.initialized.fill_(True)

    def current_scale(self) -> float:
        rm = float(self.running_max)
        return qmax_for(self.bits) / rm if rm > 0 else 1.0

    def forward(self, x):
        if self.training:
            self.observe(x)
        elif not bool(self.initialized):
            # never calibrated: fall back to a per-batch scale, leave stats untouched
            peak = float(x.detach().abs().max())
            return _fq(x, qmax_for(self.bits) / peak if peak > 0 else 1.0, self.bits)
        return _fq(x, self.current_scale(), self.bits)

    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.current_scale())

    def extra_repr(self):
        return f"bits={self.bits}, decay={self.decay}"


class QuantConv2d(nn.Conv2d):
    def __init__(self, conv: nn.Conv2d, bits_w: int, bits_a: int):
        super().__init__(conv.in_channels, conv.out_channels, conv.kernel_size,
                         stride=conv.stride, padding=conv.padding, dilation=conv.dilation,
                         groups=conv.groups, bias=conv.bias is not None,
                         padding_mode=conv.padding_mode)
        self.load_state_dict(conv.state_dict())
        self.weight_quant = WeightQuantizer(bits_w)
        self.act_quant = ActivationQuantizer(bits_a)

    def forward(self, x):
        return self._conv_forward(self.act_quant(x), self.weight_quant(self.weight), self.bias)


class QuantLinear(nn.Linear):
    def __init__(self, linear: nn.Linear, bits_w: int, bits_a: int):
        super().__init__(linear.in_features, linear.out_features, bias=linear.bias is not None)
        self.load_state_dict(linear.state_dict())
        self.weight_quant = WeightQuantizer(bits_w)
        self.act_quant = ActivationQuantizer(bits_a)

    def forward(self, x):
        return F.linear(self.act_quant(x), self.weight_quant(self.weight), self.bias)


_PASSTHROUGH = (nn.modules.batchnorm._BatchNorm, nn.Identity)


class QuantizedModelHandle(nn.Module):
    """A trainable fake-quantized copy of a float model.

    Batch-norm layers stay full precision. With ``freeze_bn`` (default) they
    also stay in eval mode while the handle trains, so their running
    statistics keep the teacher's values and only the affine parameters move.
    """

    def __init__(self, model: nn.Module, bits_w: int, bits_a: int, freeze_bn: bool = True):
        super().__init__()
        self.model = model
        self.bits_w = bits_w
        self.bits_a = bits_a
        self.freeze_bn = freeze_bn

    def forward(self, x):
        return self.model(x)

    def forward_features(self, x):
        return self.model.forward_features(x)

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and self.freeze_bn:
            for m in self.model.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    m.eval()
        return self

    def quant_layers(self) -> list[tuple[str, nn.Module]]:
        return [(n, m) for n, m in self.model.named_modules()
                if isinstance(m, (QuantConv2d, QuantLinear))]

    def weight_specs(self) -> dict[str, QuantSpec]:
        return {n: m.weight_quant.spec(m.weight) for n, m in self.quant_layers()}

    def activation_specs(self) -> dict[str, QuantSpec]:
        return {n: m.act_quant.spec() for n, m in self.quant_layers()}

    @torch.no_grad()
    def calibrate(self, *batches: torch.Tensor) -> None:
        """Feed batches through with only the activation quantizers observing."""
        was_training = self.training
        self.eval()
        quants = [m for m in self.model.modules() if isinstance(m, ActivationQuantizer)]
        for q in quants:
            q.train()
        try:
            for b in batches:
                self.model(b)
        finally:
            self.train(was_training)


def _check_supported(model: nn.Module) -> None:
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, *_PASSTHROUGH)):
            continue
        if any(True for _ in m.parameters(recurse=False)):
            raise UnsupportedLayer(f"no quantization rule for {name or '<root>'}: {type(m).__name__}")


def wrap_model(float_model: nn.Module, bits_w: int, bits_a: int,
               quantize_first_last: bool = True, freeze_bn: bool = True) -> QuantizedModelHandle:
    """Deep-copy ``float_model`` and swap every Conv2d/Linear for a fake-quantized twin."""
    for b in (bits_w, bits_a):
        if not 2 <= b <= 32:
            raise ValueError(f"bit-width must be in [2, 32], got {b}")
    _check_supported(float_model)
    model = copy.deepcopy(float_model)
    for p in model.parameters():
        p.requires_grad_(True)
    targets = [(n, m) for n, m in model.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    if not quantize_first_last and len(targets) >= 2:
        targets = targets[1:-1]
    for name, m in targets:
        parent_name, _, child = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        cls = QuantConv2d if isinstance(m, nn.Conv2d) else QuantLinear
        setattr(parent, child, cls(m, bits_w, bits_a))
    handle = QuantizedModelHandle(model, bits_w, bits_a, freeze_bn)
    handle.train(float_model.training)
    return handle

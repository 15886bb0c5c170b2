"""Layers, the Conv-4 feature extractor and the global-branch head.

Feature maps are NHWC throughout. Conv kernels are stored as (kh, kw, Cin, Cout).
"""
from __future__ import annotations

import json
import struct
from collections.abc import Iterator
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, ShapeError, get_default_dtype, tensor_from_bytes, tensor_to_bytes

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
CHECKPOINT_FORMAT_VERSION = 1


class UninitializedStatsError(RuntimeError):
    pass


# -- functional ops -------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of NHWC ``x`` with a (kh, kw, Cin, Cout) kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-d kernel, got {x.shape} and {w.shape}")
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {cin}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho, Wo = xd.shape[1] - kh + 1, xd.shape[2] - kw + 1
    if kh == 1 and kw == 1:
        cols = xd.reshape(-1, C)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(1, 2))  # B,Ho,Wo,C,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.data.reshape(kh * kw * C, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, cout)
    padded_shape = xd.shape

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if kh == 1 and kw == 1:
                gxp = dcols.reshape(padded_shape)
            else:
                dcols = dcols.reshape(B, Ho, Wo, kh, kw, C)
                gxp = np.zeros(padded_shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + Ho, j:j + Wo] += dcols[:, :, :, i, j]
            gx = gxp[:, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(out, parents, vjp, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2, floor semantics. Ties route to the first cell in row-major order."""
    B, H, W, C = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"input {H}x{W} too small to pool")
    cells = [x.data[:, di:Ho * 2:2, dj:Wo * 2:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))
    # winner = first cell equal to the max
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for cell in cells:
        m = (cell == out) & ~taken
        taken |= m
        masks.append(m)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for (di, dj), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            gx[:, di:Ho * 2:2, dj:Wo * 2:2] = g * m
        return (gx,)

    return Tensor._make(out, (x,), vjp, "max_pool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray | None = None,
               var: np.ndarray | None = None, eps: float = BN_EPS) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalisation over every axis but the last.

    With ``mean``/``var`` given the statistics are treated as constants (eval mode);
    otherwise batch statistics are used and differentiated through. Returns the output
    and the (mean, biased var) actually used.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm parameters {gamma.shape}/{beta.shape} do not match {C} channels")
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    batch_stats = mean is None
    if batch_stats:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
    mean = mean.astype(xd.dtype, copy=False)
    var = var.astype(xd.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data
    n = xd.size // C

    def vjp(g):
        gsum = g.sum(axis=axes)
        gxhat_sum = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            if batch_stats:
                gx = (gamma.data * inv / n) * (n * g - gsum - xhat * gxhat_sum)
            else:
                gx = g * (gamma.data * inv)
        return gx, gxhat_sum, gsum

    return Tensor._make(out, (x, gamma, beta), vjp, "batch_norm"), mean, var


# -- modules --------------------------------------------------------------------

class Module:
    """Minimal container: parameters, buffers and child modules keyed by name."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, "Module"]]:
        for name, b in self.buffers.items():
            yield prefix + name, b, self
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}/")

    def param_store(self) -> "ParamStore":
        return ParamStore(dict(self.named_parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ParamStore:
    """Trainable tensors by path, iterated in lexicographic path order."""

    def __init__(self, params: dict[str, Tensor]):
        self._params = {k: params[k] for k in sorted(params)}
        ids = [id(p) for p in self._params.values()]
        if len(set(ids)) != len(ids):
            raise ValueError("a parameter tensor is registered under more than one path")

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def total_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def counts_by_prefix(self, depth: int = 1) -> dict[str, int]:
        counts: dict[str, int] = {}
        for path, p in self._params.items():
            key = "/".join(path.split("/")[:depth])
            counts[key] = counts.get(key, 0) + p.size
        return counts

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, padding: int | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        dtype = get_default_dtype()
        self.params["weight"] = Tensor(kaiming_uniform(rng, (kernel, kernel, cin, cout), fan_in),
                                       requires_grad=True, dtype=dtype)
        if bias:
            b = rng.uniform(-1, 1, size=cout) / np.sqrt(fan_in)
            self.params["bias"] = Tensor(b, requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params["weight"], self.params.get("bias"), self.padding)


class BatchNorm2d(Module):
    """Batch norm with running statistics (momentum 0.1, unbiased running variance)."""

    def __init__(self, channels: int):
        super().__init__()
        dtype = get_default_dtype()
        self.params["gamma"] = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.params["beta"] = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float64)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float64)
        self.initialized = False

    def forward(self, x: Tensor) -> Tensor:
        g, b = self.params["gamma"], self.params["beta"]
        if self.training:
            out, mean, var = batch_norm(x, g, b)
            n = x.size // x.shape[-1]
            unbiased = var.astype(np.float64) * (n / max(n - 1, 1))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * unbiased
            self.initialized = True
            return out
        if not self.initialized:
            raise UninitializedStatsError("uninitialized running statistics")
        out, _, _ = batch_norm(x, g, b, self.buffers["running_mean"], self.buffers["running_var"])
        return out


class ConvBlock(Module):
    """conv (no bias) -> batch norm -> ReLU -> optional 2x2 max pool."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, pool: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.pool = pool
        self.add("conv", Conv2d(cin, cout, kernel, bias=False, rng=rng))
        self.add("bn", BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        y = self.children["bn"](self.children["conv"](x)).relu()
        return max_pool2d(y) if self.pool else y


class Backbone(Module):
    """Stack of conv blocks; the default is the 4-block, 64-channel extractor with every block pooled."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (64, 64, 64, 64),
                 pools: Sequence[bool] | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        pools = [True] * len(widths) if pools is None else list(pools)
        if len(pools) != len(widths):
            raise ValueError("pools and widths must have the same length")
        self.pools = pools
        self.out_channels = widths[-1]
        cin = in_channels
        for i, (cout, pool) in enumerate(zip(widths, pools)):
            self.add(f"block{i}", ConvBlock(cin, cout, 3, pool, rng))
            cin = cout

    def output_hw(self, size: int) -> int:
        for pool in self.pools:
            size = size // 2 if pool else size
        return size

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.children["block0"].children["conv"].params["weight"].shape[2]:
            raise ShapeError(f"backbone expects NHWC images with matching channels, got {x.shape}")
        for block in self.children.values():
            x = block(x)
        return x


HCONV_VARIANTS = ("conv3x3", "conv1x1", "identity")


class HConv(Module):
    """Two unpooled conv blocks applied before the global cosine; spatial size preserved."""

    def __init__(self, channels: int = 64, variant: str = "conv3x3", rng: np.random.Generator | None = None):
        super().__init__()
        if variant not in HCONV_VARIANTS:
            raise ValueError(f"unknown h_conv variant {variant!r}; choose from {HCONV_VARIANTS}")
        self.variant = variant
        if variant != "identity":
            k = 3 if variant == "conv3x3" else 1
            self.add("block0", ConvBlock(channels, channels, k, pool=False, rng=rng))
            self.add("block1", ConvBlock(channels, channels, k, pool=False, rng=rng))

    def forward(self, x: Tensor) -> Tensor:
        for block in self.children.values():
            x = block(x)
        return x


def backbone_param_count(in_channels: int = 3, widths: Sequence[int] = (64, 64, 64, 64)) -> int:
    """Closed form: 9*cin*cout conv weights plus 2*cout batch-norm affine terms per block."""
    total, cin = 0, in_channels
    for cout in widths:
        total += 9 * cin * cout + 2 * cout
        cin = cout
    return total


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, header: dict, records: dict[str, np.ndarray | Tensor]) -> None:
    """JSON header line, then (u32 path length, utf-8 path, tensor) records in path order."""
    head = dict(header)
    head.setdefault("format_version", CHECKPOINT_FORMAT_VERSION)
    chunks = [json.dumps(head, sort_keys=True).encode() + b"\n"]
    for key in sorted(records):
        name = key.encode()
        chunks.append(struct.pack("<I", len(name)) + name + tensor_to_bytes(records[key]))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    nl = buf.index(b"\n")
    header = json.loads(buf[:nl].decode())
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    records: dict[str, np.ndarray] = {}
    pos = nl + 1
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + n].decode()
        t, pos = tensor_from_bytes(buf, pos + 4 + n)
        records[name] = t.data
    return header, records


def module_state(module: Module) -> dict[str, np.ndarray]:
    state = {path: p.data for path, p in module.named_parameters()}
    for path, buf, _ in module.named_buffers():
        state[path] = buf
    return state


def load_module_state(module: Module, state: dict[str, np.ndarray]) -> None:
    for path, p in module.named_parameters():
        if path not in state:
            raise KeyError(f"checkpoint lacks parameter {path}")
        if state[path].shape != p.shape:
            raise ShapeError(f"{path}: checkpoint shape {state[path].shape} != {p.shape}")
        p.data = state[path].astype(p.dtype, copy=True)
    for path, buf, owner in module.named_buffers():
        if path in state:
            buf[...] = state[path]
            if isinstance(owner, BatchNorm2d):
                owner.initialized = True

"""Building blocks: convolutional block, grouped self-attention block,
AdamW optimizer, and the cosine learning-rate schedule.

A convolutional block is two 3x3 convolutions (stride 1, padding 1, each
followed by a rectifier) and one max-pool.  The pool factor defaults to 2
but is configurable per block, since the published extent ladders need
blocks that downsample by 1, 2, or 4 depending on the input size.

A self-attention block is pre-norm multi-head self-attention with a
residual connection and nothing else; there is no feed-forward sublayer.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .tensor import (
    ConvKernel,
    Tensor,
    add,
    concat,
    conv2d,
    layer_norm,
    log_softmax,
    matmul,
    maxpool2d,
    narrow,
    relu,
    scale,
    softmax,
    tensor_sum,
    transpose,
)


def _uniform_init(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def make_conv_kernel(rng, in_ch: int, out_ch: int, size: int = 3, stride: int = 1,
                     padding: int = 1) -> ConvKernel:
    fan_in = in_ch * size * size
    return ConvKernel(
        _uniform_init(rng, (out_ch, in_ch, size, size), fan_in),
        _uniform_init(rng, (out_ch,), fan_in),
        stride=stride,
        padding=padding,
    )


class Linear:
    """Affine map x @ weight + bias with weight stored [in, out]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"linear weight {weight.shape} and bias {bias.shape} are inconsistent"
            )
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng, in_features: int, out_features: int) -> "Linear":
        return cls(
            _uniform_init(rng, (in_features, out_features), in_features),
            _uniform_init(rng, (out_features,), in_features),
        )

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, x.shape[0])
        out = add(matmul(x, self.weight), self.bias)
        if squeeze:
            out = out.reshape(out.shape[1])
        return out

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def clone(self) -> "Linear":
        return Linear(self.weight.clone(), self.bias.clone())


class LayerNorm:
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    @classmethod
    def create(cls, dim: int) -> "LayerNorm":
        return cls(
            Tensor(np.ones(dim), requires_grad=True),
            Tensor(np.zeros(dim), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def clone(self) -> "LayerNorm":
        return LayerNorm(self.gamma.clone(), self.beta.clone(), self.eps)


class ConvBlock:
    """Two 3x3 conv+rectifier passes, then one max-pool of the given factor.

    pool_window == 1 skips pooling; otherwise spatial extents must divide
    by the factor exactly.
    """

    def __init__(self, conv1: ConvKernel, conv2: ConvKernel, pool_window: int = 2):
        if conv1.out_channels != conv2.in_channels:
            raise ConfigError(
                f"conv1 yields {conv1.out_channels} channels but conv2 expects "
                f"{conv2.in_channels}"
            )
        if pool_window < 1:
            raise ConfigError(f"pool window must be >= 1, got {pool_window}")
        self.conv1 = conv1
        self.conv2 = conv2
        self.pool_window = pool_window

    @classmethod
    def create(cls, rng, in_ch: int, out_ch: int, pool_window: int = 2) -> "ConvBlock":
        return cls(
            make_conv_kernel(rng, in_ch, out_ch),
            make_conv_kernel(rng, out_ch, out_ch),
            pool_window,
        )

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    def forward(self, x: Tensor) -> Tensor:
        h = relu(conv2d(x, self.conv1))
        h = relu(conv2d(h, self.conv2))
        if self.pool_window == 1:
            return h
        _, hh, ww = h.shape
        if hh % self.pool_window or ww % self.pool_window:
            raise ConfigError(
                f"spatial extent {hh}x{ww} not divisible by pool window {self.pool_window}"
            )
        return maxpool2d(h, self.pool_window, self.pool_window)

    def parameters(self):
        return [
            ("conv1.weight", self.conv1.weights),
            ("conv1.bias", self.conv1.bias),
            ("conv2.weight", self.conv2.weights),
            ("conv2.bias", self.conv2.bias),
        ]

    def clone(self) -> "ConvBlock":
        return ConvBlock(self.conv1.clone(), self.conv2.clone(), self.pool_window)


def conv_block_forward(x: Tensor, block: ConvBlock) -> Tensor:
    return block.forward(x)


class MHSABlock:
    """Pre-norm multi-head self-attention with a residual connection."""

    def __init__(self, dim: int, num_heads: int, norm: LayerNorm, wq: Linear,
                 wk: Linear, wv: Linear, wo: Linear):
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.norm = norm
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo
        self.last_attention = None

    @classmethod
    def create(cls, rng, dim: int, num_heads: int) -> "MHSABlock":
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        return cls(
            dim,
            num_heads,
            LayerNorm.create(dim),
            Linear.create(rng, dim, dim),
            Linear.create(rng, dim, dim),
            Linear.create(rng, dim, dim),
            Linear.create(rng, dim, dim),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise ShapeError(
                f"attention expects [T, {self.dim}] tokens, got {tokens.shape}"
            )
        head_dim = self.dim // self.num_heads
        inv_scale = 1.0 / math.sqrt(head_dim)
        normed = self.norm(tokens)
        q = self.wq(normed)
        k = self.wk(normed)
        v = self.wv(normed)
        head_outs = []
        attention = []
        for h in range(self.num_heads):
            lo = h * head_dim
            qh = narrow(q, 1, lo, head_dim)
            kh = narrow(k, 1, lo, head_dim)
            vh = narrow(v, 1, lo, head_dim)
            weights = softmax(scale(matmul(qh, transpose(kh)), inv_scale))
            attention.append(weights.data)
            head_outs.append(matmul(weights, vh))
        self.last_attention = attention
        merged = head_outs[0] if len(head_outs) == 1 else concat(head_outs, axis=1)
        return add(tokens, self.wo(merged))

    def parameters(self):
        out = [("norm." + n, p) for n, p in self.norm.parameters()]
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend((f"{tag}.{n}", p) for n, p in lin.parameters())
        return out

    def clone(self) -> "MHSABlock":
        return MHSABlock(
            self.dim,
            self.num_heads,
            self.norm.clone(),
            self.wq.clone(),
            self.wk.clone(),
            self.wv.clone(),
            self.wo.clone(),
        )


def mhsa_forward(tokens: Tensor, block: MHSABlock) -> Tensor:
    return block.forward(tokens)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of one class under softmax logits."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise UsageError(f"label {label} out of range for {logits.shape[0]} classes")
    picked = narrow(log_softmax(logits), 0, int(label), 1)
    return scale(tensor_sum(picked), -1.0)


class AdamW:
    """Adam with decoupled weight decay.

    The update applies decay directly to the parameter (p -= lr*wd*p) and
    then the bias-corrected moment step; decay never enters the moments.
    """

    def __init__(self, named_params, lr: float = 1e-3, weight_decay: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or weight_decay < 0:
            raise ConfigError(f"lr {lr} and weight decay {weight_decay} must be >= 0")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1): got {beta1}, {beta2}")
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names passed to the optimizer")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.named_params:
            if p.grad is None:
                raise UsageError(f"parameter '{name}' has no gradient; run backward first")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * self.weight_decay * p.data + self.lr * update


def adamw_step(optimizer: AdamW) -> None:
    optimizer.step()


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if base_lr < 0:
        raise ConfigError(f"base_lr must be >= 0, got {base_lr}")
    step = min(step, total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

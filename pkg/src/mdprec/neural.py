"""Dense tensor kernel for the convolutional preconditioner.

Implements exactly the op set the three-level U-net needs - 3D
convolution (cross-correlation with zero padding), transposed convolution
with stride 2, 2x2x2 max pooling, ReLU and channel concatenation - each
with a hand-written adjoint, plus Adam and a binary checkpoint format.
Everything is float64 numpy; convolutions are lowered to matrix products
over z-slabs so peak memory stays bounded on large grids.

Tensor layout: ``(channels, n1, n2, n3)`` with an optional leading batch
axis.  Flattening the spatial axes in C order reproduces the grid's
lexicographic node ordering (``index = i + j*n + k*n**2``), so a grid
vector reshapes losslessly into a one-channel tensor and back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

_COLS_BUDGET_BYTES = 12 * 2**20  # keep per-slab patch matrices cache-friendly


# ---------------------------------------------------------------------------
# layout helpers

def grid_to_channel(v: np.ndarray, n: int) -> np.ndarray:
    """Flat grid vector -> one-channel spatial tensor (lossless)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (n**3,):
        raise ValueError(f"expected {n**3} entries, got {v.shape}")
    return v.reshape(1, n, n, n)


def channel_to_grid(t: np.ndarray) -> np.ndarray:
    """Inverse of grid_to_channel for a (1, n, n, n) tensor."""
    if t.ndim != 4 or t.shape[0] != 1:
        raise ValueError("expected a one-channel spatial tensor")
    return t.reshape(-1)


def _batched(x: np.ndarray) -> tuple:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ValueError(f"expected a 4D or 5D tensor, got shape {x.shape}")


def _debatch(y: np.ndarray, squeeze: bool) -> np.ndarray:
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# convolution

def _slab_extent(m2, m3, cin, ks, budget=_COLS_BUDGET_BYTES):
    per_plane = m2 * m3 * cin * ks**3 * 8
    return max(1, budget // max(per_plane, 1))


@njit(cache=True)
def _im2col_kernel(xp, ks, z0, mz, m2, m3, out):
    b, cin = xp.shape[0], xp.shape[1]
    for bi in range(b):
        for ci in range(cin):
            for dz in range(ks):
                for dy in range(ks):
                    for dx in range(ks):
                        row = ((ci * ks + dz) * ks + dy) * ks + dx
                        idx = 0
                        for z in range(mz):
                            for y in range(m2):
                                for x in range(m3):
                                    out[bi, row, idx] = \
                                        xp[bi, ci, z0 + dz + z, dy + y, dx + x]
                                    idx += 1


@njit(cache=True)
def _col2im_kernel(gwin, ks, z0, mz, m2, m3, gxp_item):
    # gwin: (cin*ks^3, voxels); accumulate into one padded-item gradient
    cin = gxp_item.shape[0]
    for ci in range(cin):
        for dz in range(ks):
            for dy in range(ks):
                for dx in range(ks):
                    row = ((ci * ks + dz) * ks + dy) * ks + dx
                    idx = 0
                    for z in range(mz):
                        for y in range(m2):
                            for x in range(m3):
                                gxp_item[ci, z0 + dz + z, dy + y, dx + x] += \
                                    gwin[row, idx]
                                idx += 1


def _im2col(xp: np.ndarray, ks: int, mz: int, m2: int, m3: int,
            z0: int = 0) -> np.ndarray:
    """Contiguous (b, cin*ks^3, voxels) patch matrix for one z-slab."""
    b, cin = xp.shape[:2]
    cols = np.empty((b, cin * ks**3, mz * m2 * m3))
    _im2col_kernel(np.ascontiguousarray(xp), ks, z0, mz, m2, m3, cols)
    return cols


def conv3d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None,
           padding: int | None = None,
           _cols_sink: list | None = None) -> np.ndarray:
    """Same-size 3D cross-correlation with zero padding.

    ``kernels`` has shape (c_out, c_in, s, s, s) with odd s when padding
    keeps the spatial size; ``padding`` defaults to (s-1)//2.  A list
    passed as ``_cols_sink`` collects the per-slab patch matrices so a
    following adjoint call can skip rebuilding them.
    """
    xb, squeeze = _batched(x)
    cout, cin, ks, _, _ = kernels.shape
    if padding is None:
        padding = (ks - 1) // 2
    if padding > 0 and ks % 2 == 0:
        raise ValueError("same-padding layers need an odd kernel size")
    if xb.shape[1] != cin:
        raise ValueError(f"kernel expects {cin} channels, input has {xb.shape[1]}")
    b, _, n1, n2, n3 = xb.shape
    m1, m2, m3 = (n1 + 2 * padding - ks + 1, n2 + 2 * padding - ks + 1,
                  n3 + 2 * padding - ks + 1)
    if min(m1, m2, m3) < 1:
        raise ValueError("kernel larger than padded input")
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(xb, pad) if padding else xb
    if ks == 1:
        y = np.matmul(kernels.reshape(cout, cin),
                      xb.reshape(b, cin, n1 * n2 * n3)).reshape(
            b, cout, n1, n2, n3).copy()
    else:
        # one batch item and one z-slab at a time keeps the patch matrix
        # cache-resident, which dominates cost on bandwidth-bound hosts
        W = kernels.reshape(cout, cin * ks**3)
        y = np.empty((b, cout, m1, m2, m3))
        step = _slab_extent(m2, m3, cin, ks)
        for bi in range(b):
            for z0 in range(0, m1, step):
                z1 = min(z0 + step, m1)
                cols = _im2col(xp[bi:bi + 1], ks, z1 - z0, m2, m3, z0)
                if _cols_sink is not None:
                    _cols_sink.append(cols)
                y[bi, :, z0:z1] = (W @ cols[0]).reshape(cout, z1 - z0, m2, m3)
    if bias is not None:
        y += bias[None, :, None, None, None]
    return _debatch(y, squeeze)


def conv3d_adjoint(x: np.ndarray, kernels: np.ndarray, grad_y: np.ndarray,
                   padding: int | None = None, with_bias: bool = True,
                   _cols_saved: list | None = None) -> tuple:
    """Gradients of conv3d w.r.t. input, kernels and bias.

    The input gradient is itself a cross-correlation of the output
    gradient with spatially flipped, channel-transposed kernels, so it
    reuses the forward kernel; the weight gradient contracts the patch
    matrix against the output gradient.
    """
    xb, squeeze = _batched(x)
    gyb, _ = _batched(grad_y)
    cout, cin, ks, _, _ = kernels.shape
    if padding is None:
        padding = (ks - 1) // 2
    b, _, n1, n2, n3 = xb.shape
    m1, m2, m3 = gyb.shape[2:]

    if ks == 1:
        gk_flat = np.matmul(gyb.reshape(b, cout, -1),
                            xb.reshape(b, cin, -1).transpose(0, 2, 1)).sum(0)
        gx = np.matmul(kernels.reshape(cout, cin).T,
                       gyb.reshape(b, cout, -1)).reshape(xb.shape).copy()
    else:
        pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
        xp = np.pad(xb, pad) if padding else xb
        W = kernels.reshape(cout, cin * ks**3)
        gk_flat = np.zeros((cout, cin * ks**3))
        scatter_gx = cin <= cout  # pick the smaller patch matrix for gx
        if scatter_gx:
            gxp = np.zeros_like(xp)
        else:
            flipped = np.ascontiguousarray(
                kernels[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        step = _slab_extent(m2, m3, cin, ks)
        saved = iter(_cols_saved) if _cols_saved is not None else None
        for bi in range(b):
            for z0 in range(0, m1, step):
                z1 = min(z0 + step, m1)
                cols = next(saved) if saved is not None else \
                    _im2col(xp[bi:bi + 1], ks, z1 - z0, m2, m3, z0)
                gy_flat = gyb[bi, :, z0:z1].reshape(cout, (z1 - z0) * m2 * m3)
                gk_flat += gy_flat @ cols[0].T
                if scatter_gx:
                    _col2im_kernel(W.T @ gy_flat, ks, z0, z1 - z0, m2, m3,
                                   gxp[bi])
        if scatter_gx:
            gx = gxp[:, :, padding:padding + n1, padding:padding + n2,
                     padding:padding + n3] if padding else gxp
        else:
            gx = conv3d(gyb, flipped, padding=ks - 1 - padding)
    gb = gyb.sum(axis=(0, 2, 3, 4)) if with_bias else None
    return _debatch(gx, squeeze), gk_flat.reshape(kernels.shape), gb


# ---------------------------------------------------------------------------
# transposed convolution (kernel 2, stride 2)

def transposed_conv3d(x: np.ndarray, kernels: np.ndarray, stride: int = 2,
                      output_padding: int = 0,
                      bias: np.ndarray | None = None) -> np.ndarray:
    """Stride-2 transposed convolution: spatial size 2n + output_padding.

    ``kernels`` has shape (c_in, c_out, 2, 2, 2); output positions beyond
    the last stride window stay at the bias value when output_padding is 1.
    """
    if stride != 2:
        raise ValueError("the architecture fixes stride 2")
    if output_padding not in (0, 1):
        raise ValueError("output_padding must be 0 or 1")
    xb, squeeze = _batched(x)
    cin, cout, ks, _, _ = kernels.shape
    if ks != 2:
        raise ValueError("the architecture fixes kernel size 2")
    if xb.shape[1] != cin:
        raise ValueError(f"kernel expects {cin} channels, input has {xb.shape[1]}")
    b, _, n1, n2, n3 = xb.shape
    o1, o2, o3 = 2 * n1 + output_padding, 2 * n2 + output_padding, \
        2 * n3 + output_padding
    y = np.zeros((b, cout, o1, o2, o3))
    for a in range(2):
        for c in range(2):
            for d in range(2):
                contrib = np.tensordot(xb, kernels[:, :, a, c, d],
                                       axes=([1], [0]))  # (b,n1,n2,n3,cout)
                y[:, :, a:a + 2 * n1:2, c:c + 2 * n2:2, d:d + 2 * n3:2] = \
                    contrib.transpose(0, 4, 1, 2, 3)
    if bias is not None:
        y += bias[None, :, None, None, None]
    return _debatch(y, squeeze)


def transposed_conv3d_adjoint(x: np.ndarray, kernels: np.ndarray,
                              grad_y: np.ndarray, output_padding: int = 0,
                              with_bias: bool = True) -> tuple:
    """Gradients of transposed_conv3d w.r.t. input, kernels and bias."""
    xb, squeeze = _batched(x)
    gyb, _ = _batched(grad_y)
    cin, cout = kernels.shape[:2]
    b, _, n1, n2, n3 = xb.shape
    gx = np.zeros_like(xb)
    gk = np.zeros_like(kernels)
    for a in range(2):
        for c in range(2):
            for d in range(2):
                gy_s = gyb[:, :, a:a + 2 * n1:2, c:c + 2 * n2:2,
                           d:d + 2 * n3:2]
                gx += np.tensordot(gy_s, kernels[:, :, a, c, d],
                                   axes=([1], [1])).transpose(0, 4, 1, 2, 3)
                gk[:, :, a, c, d] = np.tensordot(
                    xb, gy_s, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gb = gyb.sum(axis=(0, 2, 3, 4)) if with_bias else None
    return _debatch(gx, squeeze), gk, gb


# ---------------------------------------------------------------------------
# max pooling (window 2, stride 2, floor on odd sizes)

def maxpool3d(x: np.ndarray) -> tuple:
    """Returns the pooled tensor and the argmax record for the adjoint.

    Ties go to the lowest flat index within each window (np.argmax picks
    the first maximum, and window offsets are enumerated in flat order).
    """
    xb, squeeze = _batched(x)
    b, c, n1, n2, n3 = xb.shape
    m1, m2, m3 = n1 // 2, n2 // 2, n3 // 2
    if min(m1, m2, m3) < 1:
        raise ValueError("input too small to pool")
    t = xb[:, :, :2 * m1, :2 * m2, :2 * m3].reshape(b, c, m1, 2, m2, 2, m3, 2)
    win = t.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, m1, m2, m3, 8)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return _debatch(y, squeeze), arg


def maxpool3d_adjoint(arg: np.ndarray, in_shape: tuple,
                      grad_y: np.ndarray) -> np.ndarray:
    """Routes the incoming gradient to each window's argmax position."""
    gyb, _ = _batched(grad_y)
    squeeze = len(in_shape) == 4
    shape = (1,) + tuple(in_shape) if squeeze else tuple(in_shape)
    b, c, n1, n2, n3 = shape
    m1, m2, m3 = gyb.shape[2:]
    gwin = np.zeros((b, c, m1, m2, m3, 8))
    np.put_along_axis(gwin, arg.reshape(b, c, m1, m2, m3)[..., None],
                      gyb[..., None], axis=-1)
    gx = np.zeros(shape)
    gx[:, :, :2 * m1, :2 * m2, :2 * m3] = gwin.reshape(
        b, c, m1, m2, m3, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(
        b, c, 2 * m1, 2 * m2, 2 * m3)
    return _debatch(gx, squeeze)


# ---------------------------------------------------------------------------
# pointwise ops

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_adjoint(y: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Mask by the forward output (zero at the kink)."""
    return np.where(y > 0.0, grad_y, 0.0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack along the channel axis, ``a`` first."""
    ca = a.shape[-4]
    if a.shape[-3:] != b.shape[-3:] or a.ndim != b.ndim:
        raise ValueError("channel concatenation needs equal spatial shapes")
    return np.concatenate([a, b], axis=a.ndim - 4)


def split_channels(grad: np.ndarray, c_first: int) -> tuple:
    """Adjoint of concat_channels."""
    axis = grad.ndim - 4
    return (np.take(grad, np.arange(c_first), axis=axis),
            np.take(grad, np.arange(c_first, grad.shape[axis]), axis=axis))


# ---------------------------------------------------------------------------
# the three-level U-net

# name, op, c_in, c_out, kernel size, has bias
ARCHITECTURE = (
    ("enc1a", "conv", 2, 16, 3, True),
    ("enc1b", "conv", 16, 32, 3, True),
    ("enc2", "conv", 32, 64, 3, False),
    ("enc3", "conv", 64, 128, 3, False),
    ("bottleneck", "conv", 128, 128, 3, False),
    ("up2", "tconv", 128, 64, 2, False),
    ("dec2", "conv", 128, 64, 3, True),
    ("up1", "tconv", 64, 32, 2, True),
    ("dec1", "conv", 64, 32, 3, True),
    ("head1", "conv", 32, 16, 1, True),
    ("head2", "conv", 16, 1, 1, True),
)

MIN_INPUT_SIZE = 8


@dataclass
class UNetParams:
    """Trainable weights, keyed by block name in architecture order."""

    blocks: dict = field(default_factory=dict)

    def arrays(self):
        """Deterministic (key, array) pairs across kernels and biases."""
        out = []
        for name, _, _, _, _, has_bias in ARCHITECTURE:
            out.append((f"{name}.kernel", self.blocks[name]["kernel"]))
            if has_bias:
                out.append((f"{name}.bias", self.blocks[name]["bias"]))
        return out

    def num_params(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def copy(self) -> "UNetParams":
        return UNetParams({k: {"kernel": v["kernel"].copy(),
                               "bias": None if v["bias"] is None
                               else v["bias"].copy()}
                           for k, v in self.blocks.items()})

    def set_array(self, key: str, value: np.ndarray) -> None:
        name, part = key.split(".")
        self.blocks[name][part] = value


RESIDUAL_CHANNEL_GAIN = 16.0


def init_unet_params(seed: int = 0) -> UNetParams:
    """Fan-in-scaled uniform kernels, zero biases, fixed by the seed.

    Two per-channel corrections make the short training budgets used here
    effective: the first layer's weights on the residual channel are
    scaled up (unit-norm grid vectors have entries of order ``1/sqrt(N)``
    while the raw distance channel is order one, and He-style fan-in
    scaling assumes comparable input magnitudes), and the output head
    starts at zero so the network begins as the zero map instead of
    emitting large random fields the optimizer first has to cancel.
    """
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, op, cin, cout, ks, has_bias in ARCHITECTURE:
        fan_in = cin * ks**3
        limit = np.sqrt(6.0 / fan_in)
        shape = (cin, cout, ks, ks, ks) if op == "tconv" \
            else (cout, cin, ks, ks, ks)
        blocks[name] = {
            "kernel": rng.uniform(-limit, limit, size=shape),
            "bias": np.zeros(cout) if has_bias else None,
        }
    blocks["enc1a"]["kernel"][:, 0] *= RESIDUAL_CHANNEL_GAIN
    blocks["head2"]["kernel"][...] = 0.0
    return UNetParams(blocks)


def _block(params, name):
    blk = params.blocks[name]
    return blk["kernel"], blk["bias"]


def unet_forward(params: UNetParams, x: np.ndarray,
                 ctx: dict | None = None) -> np.ndarray:
    """Forward pass; stashes intermediates in ``ctx`` when provided.

    Accepts a two-channel tensor with or without a batch axis; the output
    has one channel and the spatial size of the input for any admissible
    size (two poolings must stay well-defined, so n >= 8).
    """
    xb, squeeze = _batched(x)
    if xb.shape[1] != 2:
        raise ValueError("the preconditioner expects exactly 2 input channels")
    if min(xb.shape[2:]) < MIN_INPUT_SIZE:
        raise ValueError(f"spatial size must be at least {MIN_INPUT_SIZE}")

    def step(name, inp, **kw):
        k, b = _block(params, name)
        if name.startswith("up"):
            out = transposed_conv3d(inp, k, output_padding=kw["op"], bias=b)
        else:
            sink = None
            if ctx is not None and k.shape[-1] > 1:
                sink = ctx.setdefault("cols", {}).setdefault(name, [])
            out = conv3d(inp, k, bias=b, _cols_sink=sink)
        if name != "head2":
            out = relu(out)
        return out

    a1 = step("enc1a", xb)
    skip1 = step("enc1b", a1)                     # 32 channels at n
    e2 = step("enc2", skip1)
    skip2, arg1 = maxpool3d(e2)                   # 64 channels at n//2
    e3 = step("enc3", skip2)
    p2, arg2 = maxpool3d(e3)                      # 128 channels at n//4
    bott = step("bottleneck", p2)
    op2 = skip2.shape[2] - 2 * bott.shape[2]
    u2 = step("up2", bott, op=op2)
    c2 = concat_channels(u2, skip2)               # 128 channels at n//2
    d2 = step("dec2", c2)
    op1 = skip1.shape[2] - 2 * d2.shape[2]
    u1 = step("up1", d2, op=op1)
    c1 = concat_channels(u1, skip1)               # 64 channels at n
    d1 = step("dec1", c1)
    h1 = step("head1", d1)
    y = step("head2", h1)

    if ctx is not None:
        ctx.update(x=xb, a1=a1, skip1=skip1, e2=e2, arg1=arg1, skip2=skip2,
                   e3=e3, arg2=arg2, p2=p2, bott=bott, op2=op2, u2=u2, c2=c2,
                   d2=d2, op1=op1, u1=u1, c1=c1, d1=d1, h1=h1, squeeze=squeeze)
    return _debatch(y, squeeze)


def unet_backward(params: UNetParams, ctx: dict, grad_y: np.ndarray) -> dict:
    """Reverse pass over a stored forward context; returns grads by key."""
    grads = {}

    def conv_back(name, inp, out_relu, g):
        k, b = _block(params, name)
        if out_relu is not None:
            g = relu_adjoint(out_relu, g)
        saved = ctx.get("cols", {}).pop(name, None)
        gx, gk, gb = conv3d_adjoint(inp, k, g, with_bias=b is not None,
                                    _cols_saved=saved)
        grads[f"{name}.kernel"] = gk
        if b is not None:
            grads[f"{name}.bias"] = gb
        return gx

    def tconv_back(name, inp, out_relu, g, op):
        k, b = _block(params, name)
        g = relu_adjoint(out_relu, g)
        gx, gk, gb = transposed_conv3d_adjoint(inp, k, g, output_padding=op,
                                               with_bias=b is not None)
        grads[f"{name}.kernel"] = gk
        if b is not None:
            grads[f"{name}.bias"] = gb
        return gx

    g, _ = _batched(grad_y)
    g = conv_back("head2", ctx["h1"], None, g)
    g = conv_back("head1", ctx["d1"], ctx["h1"], g)
    g = conv_back("dec1", ctx["c1"], ctx["d1"], g)
    g_u1, g_skip1 = split_channels(g, ctx["u1"].shape[1])
    g = tconv_back("up1", ctx["d2"], ctx["u1"], g_u1, ctx["op1"])
    g = conv_back("dec2", ctx["c2"], ctx["d2"], g)
    g_u2, g_skip2 = split_channels(g, ctx["u2"].shape[1])
    g = tconv_back("up2", ctx["bott"], ctx["u2"], g_u2, ctx["op2"])
    g = conv_back("bottleneck", ctx["p2"], ctx["bott"], g)
    g = maxpool3d_adjoint(ctx["arg2"], ctx["e3"].shape, g)
    g = conv_back("enc3", ctx["skip2"], ctx["e3"], g)
    g = maxpool3d_adjoint(ctx["arg1"], ctx["e2"].shape, g + g_skip2)
    g = conv_back("enc2", ctx["skip1"], ctx["e2"], g)
    g = conv_back("enc1b", ctx["a1"], ctx["skip1"], g + g_skip1)
    conv_back("enc1a", ctx["x"], ctx["a1"], g)
    return grads


# ---------------------------------------------------------------------------
# Adam

@dataclass
class GradStore:
    """Gradients plus Adam moment accumulators, mirroring UNetParams."""

    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_grad_store(params: UNetParams) -> GradStore:
    store = GradStore()
    for key, arr in params.arrays():
        store.grads[key] = np.zeros_like(arr)
        store.m[key] = np.zeros_like(arr)
        store.v[key] = np.zeros_like(arr)
    return store


def adam_step(params: UNetParams, store: GradStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> UNetParams:
    """One bias-corrected Adam update; returns fresh parameters."""
    store.step += 1
    t = store.step
    out = params.copy()
    for key, arr in params.arrays():
        g = store.grads[key]
        store.m[key] = beta1 * store.m[key] + (1 - beta1) * g
        store.v[key] = beta2 * store.v[key] + (1 - beta2) * g * g
        m_hat = store.m[key] / (1 - beta1**t)
        v_hat = store.v[key] / (1 - beta2**t)
        out.set_array(key, arr - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"MDU3"
_CKPT_VERSION = 1
_KIND = {"conv.kernel": 0, "bias": 1, "tconv.kernel": 2}


def save_checkpoint(params: UNetParams, path) -> None:
    """Versioned binary checkpoint: f32 little-endian weights per layer."""
    entries = []
    for name, op, *_ , has_bias in ARCHITECTURE:
        kern = params.blocks[name]["kernel"]
        kind = _KIND["tconv.kernel"] if op == "tconv" else _KIND["conv.kernel"]
        entries.append((kind, kern))
        if has_bias:
            entries.append((_KIND["bias"], params.blocks[name]["bias"]))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for kind, arr in entries:
            fh.write(struct.pack("<BB", kind, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> UNetParams:
    """Read a checkpoint, validating magic, version and layer shapes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    version, n_entries = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    arrays = []
    for _ in range(n_entries):
        if offset + 2 > len(raw):
            raise ValueError("truncated checkpoint")
        kind, ndim = struct.unpack_from("<BB", raw, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(shape))
        if offset + 4 * count > len(raw):
            raise ValueError("truncated checkpoint")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        arrays.append((kind, np.ascontiguousarray(data, dtype=float)
                       .reshape(shape)))
    blocks = {}
    pos = 0
    for name, op, cin, cout, ks, has_bias in ARCHITECTURE:
        want_kind = _KIND["tconv.kernel"] if op == "tconv" \
            else _KIND["conv.kernel"]
        want_shape = (cin, cout, ks, ks, ks) if op == "tconv" \
            else (cout, cin, ks, ks, ks)
        if pos >= len(arrays):
            raise ValueError("checkpoint has too few layers")
        kind, kern = arrays[pos]
        pos += 1
        if kind != want_kind or kern.shape != want_shape:
            raise ValueError(f"layer {name}: unexpected kind/shape in checkpoint")
        bias = None
        if has_bias:
            kind_b, bias = arrays[pos]
            pos += 1
            if kind_b != _KIND["bias"] or bias.shape != (cout,):
                raise ValueError(f"layer {name}: unexpected bias in checkpoint")
        blocks[name] = {"kernel": kern, "bias": bias}
    if pos != len(arrays):
        raise ValueError("checkpoint has extra layers")
    return UNetParams(blocks)

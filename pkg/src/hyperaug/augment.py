"""Differentiable image augmentation operations.

Images are (batch, channels, height, width) arrays in [0, 1].  Every op takes
an internal magnitude ``mu`` in [0, 1] that is rescaled to the op's native
range; ``mu = 0`` leaves the image unchanged.

Geometric ops are bilinear affine warps, exactly differentiable in ``mu``.
Brightness, Contrast, Color, Sharpness and Solarize are smooth blends.
Posterize, Equalize and AutoContrast compute their exact (piecewise constant)
forward pass and borrow gradients from a smooth surrogate.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from .autodiff import Tensor, as_tensor
from .autodiff import ops

__all__ = [
    "OpKind",
    "OPS",
    "MAGNITUDE_OPS",
    "SMOOTH_OPS",
    "MAGNITUDE_RANGE",
    "native_magnitude",
    "apply_op",
    "apply_with_probability",
    "straight_through",
    "relaxed_bernoulli",
    "check_images",
]

SOLARIZE_SHARPNESS = 50.0
SHARPEN_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


class OpKind(str, enum.Enum):
    SHEAR_X = "ShearX"
    SHEAR_Y = "ShearY"
    TRANSLATE_X = "TranslateX"
    TRANSLATE_Y = "TranslateY"
    ROTATE = "Rotate"
    INVERT = "Invert"
    AUTO_CONTRAST = "AutoContrast"
    EQUALIZE = "Equalize"
    SOLARIZE = "Solarize"
    COLOR = "Color"
    POSTERIZE = "Posterize"
    CONTRAST = "Contrast"
    BRIGHTNESS = "Brightness"
    SHARPNESS = "Sharpness"

    @property
    def has_magnitude(self) -> bool:
        return self not in (OpKind.INVERT, OpKind.AUTO_CONTRAST, OpKind.EQUALIZE)

    @classmethod
    def parse(cls, value) -> "OpKind":
        if isinstance(value, OpKind):
            return value
        for op in cls:
            if value in (op.value, op.name):
                return op
        raise ValueError(f"unknown augmentation op {value!r}")


OPS: tuple[OpKind, ...] = tuple(OpKind)
MAGNITUDE_OPS: tuple[OpKind, ...] = tuple(op for op in OPS if op.has_magnitude)
SMOOTH_OPS: tuple[OpKind, ...] = (
    OpKind.SHEAR_X,
    OpKind.SHEAR_Y,
    OpKind.TRANSLATE_X,
    OpKind.TRANSLATE_Y,
    OpKind.ROTATE,
    OpKind.SOLARIZE,
    OpKind.COLOR,
    OpKind.CONTRAST,
    OpKind.BRIGHTNESS,
    OpKind.SHARPNESS,
)

# native range is [0, upper]; translate is a fraction of the image side
MAGNITUDE_RANGE: dict[OpKind, float] = {
    OpKind.SHEAR_X: 0.3,
    OpKind.SHEAR_Y: 0.3,
    OpKind.TRANSLATE_X: 0.45,
    OpKind.TRANSLATE_Y: 0.45,
    OpKind.ROTATE: 30.0,
    OpKind.SOLARIZE: 256.0,
    OpKind.COLOR: 2.0,
    OpKind.POSTERIZE: 4.0,
    OpKind.CONTRAST: 2.0,
    OpKind.BRIGHTNESS: 2.0,
    OpKind.SHARPNESS: 2.0,
}


def native_magnitude(kind: OpKind, mu):
    return as_tensor(mu) * MAGNITUDE_RANGE[OpKind.parse(kind)]


def check_images(x) -> None:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 4:
        raise ValueError(f"image batch must be (B, C, H, W), got shape {data.shape}")
    if data.size and (np.isnan(data).any() or data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")


# ---------------------------------------------------------------- geometry
def _warp(x: Tensor, src_x, src_y) -> Tensor:
    b = x.shape[0]
    p = x.shape[2] * x.shape[3]
    sx = ops.broadcast_to(ops.reshape(src_x, (1, p)), (b, p))
    sy = ops.broadcast_to(ops.reshape(src_y, (1, p)), (b, p))
    return ops.grid_sample(x, sx, sy)


def _pixel_grid(h, w, dtype):
    i, j = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return i.reshape(-1), j.reshape(-1), (h - 1) / 2.0, (w - 1) / 2.0


def _geometric(kind: OpKind, x: Tensor, m: Tensor) -> Tensor:
    _, _, h, w = x.shape
    i, j, cy, cx = _pixel_grid(h, w, x.dtype)
    if kind is OpKind.SHEAR_X:
        sx, sy = j + m * (i - cy), i
    elif kind is OpKind.SHEAR_Y:
        sx, sy = j, i + m * (j - cx)
    elif kind is OpKind.TRANSLATE_X:
        sx, sy = j + m * float(w), i
    elif kind is OpKind.TRANSLATE_Y:
        sx, sy = j, i + m * float(h)
    else:  # rotate about the image centre by m degrees
        theta = m * (math.pi / 180.0)
        c, s = ops.cos(theta), ops.sin(theta)
        dx, dy = j - cx, i - cy
        sx = c * dx + s * dy + cx
        sy = c * dy - s * dx + cy
    return _warp(x, sx, sy)


# ---------------------------------------------------------------- colour
def _grayscale(x: Tensor) -> Tensor:
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ValueError("colour ops need 1 or 3 channels")
    w = np.array([0.299, 0.587, 0.114], dtype=x.dtype).reshape(1, 3, 1, 1)
    return ops.sum(x * w, axis=1, keepdims=True)


def _blurred(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    flat = ops.reshape(x, (b * c, 1, h, w))
    kernel = SHARPEN_KERNEL.astype(x.dtype).reshape(1, 1, 3, 3)
    smooth = ops.reshape(ops.conv2d(flat, kernel, pad=1), (b, c, h, w))
    border = np.ones((1, 1, h, w), dtype=bool)
    border[..., 1:-1, 1:-1] = False
    return ops.where(np.broadcast_to(border, x.shape), x, smooth)


def _blend(x: Tensor, variant, m: Tensor) -> Tensor:
    return x + m * (variant - x)


def _soft_step(x, threshold):
    return ops.sigmoid((x - threshold) * SOLARIZE_SHARPNESS)


def _solarize(x: Tensor, mu: Tensor) -> Tensor:
    # threshold 256 (1 - mu) on the 0..255 scale; the second term cancels the
    # soft step's tail so that mu = 0 is exactly the identity
    full = 256.0 / 255.0
    gate = _soft_step(x, (1.0 - mu) * full) - (1.0 - mu) * _soft_step(x, full)
    return x + gate * (1.0 - 2.0 * x)


# ---------------------------------------------------------------- straight-through
def straight_through(exact_forward, surrogate, x, mu=None) -> Tensor:
    """Value of ``exact_forward``; gradient of ``surrogate``.

    ``exact_forward(x_array, mu_array)`` works on plain arrays and
    ``surrogate(x, mu)`` on tensors.  Implemented as
    ``surrogate + stop_gradient(exact - surrogate)``.
    """
    x = as_tensor(x)
    mu_t = None if mu is None else as_tensor(mu)
    smooth = surrogate(x, mu_t)
    exact = np.asarray(exact_forward(x.data, None if mu_t is None else mu_t.data), dtype=x.dtype)
    return smooth + (exact - smooth.data)


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _posterize_bits(native) -> int:
    return max(1, int(np.floor(8.0 - float(native) + 0.5)))


def posterize_exact(a: np.ndarray, native) -> np.ndarray:
    bits = _posterize_bits(native)
    if bits >= 8:
        return a.copy()
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return (_quantize(a) & mask).astype(a.dtype) / 255.0


def posterize_surrogate(x: Tensor, native: Tensor) -> Tensor:
    """Mean-shift of floor quantisation with a continuous step 2**m (in 1/255 units)."""
    step = ops.exp(native * math.log(2.0))
    return x - (step - 1.0) * (0.5 / 255.0)


def autocontrast_exact(a: np.ndarray, _mu=None) -> np.ndarray:
    lo = a.min(axis=(2, 3), keepdims=True)
    hi = a.max(axis=(2, 3), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (a - lo) / safe, a)


def equalize_exact(a: np.ndarray, _mu=None) -> np.ndarray:
    """Per-image, per-channel histogram equalisation on 8-bit levels."""
    q = _quantize(a)
    out = np.empty(a.shape, dtype=a.dtype)
    b, c = a.shape[:2]
    for bi in range(b):
        for ci in range(c):
            plane = q[bi, ci]
            hist = np.bincount(plane.reshape(-1), minlength=256)
            nonzero = hist[hist > 0]
            step = (int(nonzero.sum()) - int(nonzero[-1])) // 255 if nonzero.size > 1 else 0
            if step == 0:
                out[bi, ci] = a[bi, ci]
                continue
            before = np.concatenate([[0], np.cumsum(hist)[:-1]])
            lut = np.minimum((before + step // 2) // step, 255)
            out[bi, ci] = lut[plane] / 255.0
    return out


def _identity(x, _mu=None):
    return x


# ---------------------------------------------------------------- dispatch
def apply_op(kind, x, mu=None) -> Tensor:
    """Apply one augmentation with internal magnitude ``mu`` in [0, 1].

    ``mu`` is ignored for Invert, AutoContrast and Equalize.  Output values
    are clamped to [0, 1].
    """
    kind = OpKind.parse(kind)
    x = as_tensor(x)
    check_images(x)
    if kind.has_magnitude:
        if mu is None:
            raise ValueError(f"{kind.value} needs a magnitude")
        mu = as_tensor(mu)
        mval = np.asarray(mu.data)
        if mval.size != 1:
            raise ValueError(f"magnitude must be a scalar, got shape {mval.shape}")
        if np.isnan(mval).any():
            raise ValueError(f"{kind.value}: magnitude is NaN")
        if mval.min() < 0.0 or mval.max() > 1.0:
            raise ValueError(f"{kind.value}: magnitude {float(mval.reshape(-1)[0])} outside [0, 1]")
        mu = ops.reshape(mu, ())
        m = mu * MAGNITUDE_RANGE[kind]

    if kind in (OpKind.SHEAR_X, OpKind.SHEAR_Y, OpKind.TRANSLATE_X, OpKind.TRANSLATE_Y, OpKind.ROTATE):
        out = _geometric(kind, x, m)
    elif kind is OpKind.INVERT:
        out = 1.0 - x
    elif kind is OpKind.AUTO_CONTRAST:
        out = straight_through(autocontrast_exact, _identity, x)
    elif kind is OpKind.EQUALIZE:
        out = straight_through(equalize_exact, _identity, x)
    elif kind is OpKind.SOLARIZE:
        out = _solarize(x, mu)
    elif kind is OpKind.POSTERIZE:
        out = straight_through(posterize_exact, posterize_surrogate, x, m)
    elif kind is OpKind.COLOR:
        out = _blend(x, _grayscale(x), m)
    elif kind is OpKind.CONTRAST:
        out = _blend(x, ops.mean(_grayscale(x), axis=(1, 2, 3), keepdims=True), m)
    elif kind is OpKind.BRIGHTNESS:
        out = _blend(x, 0.0, m)
    else:
        out = _blend(x, _blurred(x), m)
    return ops.clamp(out, 0.0, 1.0)


def relaxed_bernoulli(p, noise, temperature: float) -> Tensor:
    """Binary-concrete sample sigmoid((logit(p) + L) / temperature)."""
    p = as_tensor(p)
    logit = ops.log(p) - ops.log(1.0 - p)
    return ops.sigmoid((logit + np.asarray(noise, dtype=p.dtype)) * (1.0 / temperature))


def logistic_noise(rng: np.random.Generator, size, dtype=np.float64) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=size)
    return (np.log(u) - np.log1p(-u)).astype(dtype)


def apply_with_probability(
    kind,
    x,
    mu,
    p,
    temperature: float = 0.05,
    rng_seed: int | None = None,
    noise=None,
) -> Tensor:
    """``b * op(x) + (1 - b) * x`` with ``b`` a relaxed Bernoulli(p) per image.

    The logistic noise comes from ``noise`` if given, otherwise from a
    generator seeded with ``rng_seed``.
    """
    x = as_tensor(x)
    b = x.shape[0]
    if noise is None:
        noise = logistic_noise(np.random.default_rng(rng_seed), b)
    noise = np.asarray(noise).reshape(b)
    gate = relaxed_bernoulli(ops.reshape(as_tensor(p), ()), noise, temperature)
    gate = ops.reshape(gate, (b, 1, 1, 1))
    out = apply_op(kind, x, mu)
    return ops.clamp(gate * out + (1.0 - gate) * x, 0.0, 1.0)

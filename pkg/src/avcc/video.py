"""Identity/pose decomposition of face video over a linear motion space.

The I-frame maps through a small convolutional encoder to a 64-dim identity
latent. Every P-frame's latent delta against the identity projects onto a
learned dictionary of unit-norm motion directions; the projections, uniformly
quantized to B bits, are the entire per-frame payload. Decoding re-composes
identity + coefficients * directions and renders through the mirror generator.

The quantizer uses 2^B - 1 levels centered on zero with step 2*c_max/(2^B - 1),
so zero is exactly representable (static frames cost nothing after entropy
coding) and the absolute error never exceeds c_max/(2^B - 1), including at the
clamp edge.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, CorruptionError, DataError, FormatError, InputError
from .nn import Conv2d, Linear, Module, _normal
from .tensor import Tensor, no_grad, upsample2x

D_ID = 64
POSE_M = 16
POSE_C_MAX = 3.0
POSE_BITS = 6
FRAME_SIZE = 64


@dataclass(frozen=True)
class VideoFrame:
    """One RGB frame, float32 pixels in [0, 1]."""

    pixels: np.ndarray  # [H, W, 3]
    frame_index: int

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InputError("frame pixels must be [H, W, 3]")
        if not np.isfinite(px).all():
            raise InputError("frame contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InputError("frame pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class IdentityCode:
    """C_id: the I-frame's latent."""

    latent: np.ndarray  # [D_ID] float32
    source_frame: int

    def __post_init__(self):
        z = np.ascontiguousarray(self.latent, dtype=np.float32)
        if z.ndim != 1:
            raise InputError("identity latent must be a vector")
        if not np.isfinite(z).all():
            raise InputError("identity latent contains non-finite values")
        object.__setattr__(self, "latent", z)


@dataclass(frozen=True)
class PoseCode:
    """C_vi for one P-frame: quantized projection indices."""

    coefficients: np.ndarray  # [M] int64 in [0, 2^B)
    frame_index: int

    def __post_init__(self):
        q = np.ascontiguousarray(self.coefficients, dtype=np.int64)
        if q.ndim != 1:
            raise InputError("pose coefficients must be a vector")
        if q.size and q.min() < 0:
            raise InputError("pose coefficient index is negative")
        object.__setattr__(self, "coefficients", q)


class FrameEncoder(Module):
    """Three stride-2 conv blocks then a linear head to the identity latent."""

    def __init__(self, seed, d_id=D_ID, size=FRAME_SIZE, base=16, name="pose.enc"):
        super().__init__()
        if size % 8:
            raise ConfigError("frame size must be divisible by 8")
        self.size = size
        self.d_id = d_id
        self.c1 = self.mod("c1", Conv2d(name + ".c1", seed, 3, 3, base, stride=2, pad=1))
        self.c2 = self.mod("c2", Conv2d(name + ".c2", seed, 3, base, 2 * base, stride=2, pad=1))
        self.c3 = self.mod("c3", Conv2d(name + ".c3", seed, 3, 2 * base, 4 * base, stride=2, pad=1))
        self.fc = self.mod("fc", Linear(name + ".fc", seed, (size // 8) ** 2 * 4 * base, d_id))

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w = x.shape[0], x.shape[1], x.shape[2]
        if (h, w) != (self.size, self.size):
            raise ConfigError(f"encoder trained for {self.size}x{self.size}, got {h}x{w}")
        y = self.c3(self.c2(self.c1(x).leaky_relu(0.2)).leaky_relu(0.2)).leaky_relu(0.2)
        return self.fc(y.reshape(b, -1))


class FrameGenerator(Module):
    """Mirror of :class:`FrameEncoder`: latent to sigmoid RGB."""

    def __init__(self, seed, d_id=D_ID, size=FRAME_SIZE, base=16, name="pose.gen"):
        super().__init__()
        if size % 8:
            raise ConfigError("frame size must be divisible by 8")
        self.size = size
        self.base = base
        self.fc = self.mod("fc", Linear(name + ".fc", seed, d_id, (size // 8) ** 2 * 4 * base))
        self.c1 = self.mod("c1", Conv2d(name + ".c1", seed, 3, 4 * base, 2 * base, stride=1, pad=1))
        self.c2 = self.mod("c2", Conv2d(name + ".c2", seed, 3, 2 * base, base, stride=1, pad=1))
        self.c3 = self.mod("c3", Conv2d(name + ".c3", seed, 3, base, 3, stride=1, pad=1))

    def __call__(self, z: Tensor) -> Tensor:
        b = z.shape[0]
        side = self.size // 8
        y = self.fc(z).leaky_relu(0.2).reshape(b, side, side, 4 * self.base)
        y = self.c1(upsample2x(y)).leaky_relu(0.2)
        y = self.c2(upsample2x(y)).leaky_relu(0.2)
        return self.c3(upsample2x(y)).sigmoid()


class MotionDictionary(Module):
    """M learned motion directions spanning the pose subspace of the latent."""

    def __init__(self, seed, m=POSE_M, d_id=D_ID, name="pose.dict"):
        super().__init__()
        raw = _normal(seed, name + ".directions", (m, d_id), 1.0)
        self.directions = self.param("directions", Tensor(raw, requires_grad=True))
        self.normalize()

    @property
    def m(self) -> int:
        return self.directions.shape[0]

    def normalize(self):
        """Rescale rows to unit L2 norm in place (no gradient)."""
        d = self.directions.data
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)

    def project(self, delta: Tensor) -> Tensor:
        """Coefficients [*, M] of latent deltas against the directions."""
        from .tensor import matmul

        return matmul(delta, self.directions.transpose_last())

    def compose(self, coeffs: Tensor) -> Tensor:
        """Latent offsets [*, D] from coefficients."""
        from .tensor import matmul

        return matmul(coeffs, self.directions)


def pose_levels(bits) -> int:
    """Number of emittable quantizer levels for a B-bit pose coefficient."""
    if bits < 1:
        raise InputError("pose quantizer needs at least 1 bit")
    return (1 << bits) - 1


def quantize_coefficients(values, bits=POSE_BITS, c_max=POSE_C_MAX) -> np.ndarray:
    """Map real coefficients to level indices in [0, 2^B - 1)."""
    levels = pose_levels(bits)
    half = (levels - 1) // 2
    step = 2.0 * c_max / levels
    x = np.clip(np.asarray(values, dtype=np.float64), -c_max, c_max)
    if levels == 1:
        return np.zeros(x.shape, dtype=np.int64)
    return (np.clip(np.round(x / step), -half, half) + half).astype(np.int64)


def dequantize_coefficients(indices, bits=POSE_BITS, c_max=POSE_C_MAX) -> np.ndarray:
    levels = pose_levels(bits)
    half = (levels - 1) // 2
    step = 2.0 * c_max / levels
    q = np.asarray(indices, dtype=np.int64)
    if q.size and (q.min() < 0 or q.max() >= levels):
        raise DataError(f"pose index outside [0, {levels}) for {bits}-bit quantizer")
    return ((q - half) * step).astype(np.float32)


def extract_identity(iframe: VideoFrame, encoder: FrameEncoder) -> IdentityCode:
    """C_id from the I-frame."""
    with no_grad():
        z = encoder(Tensor(iframe.pixels[None]))
    return IdentityCode(z.data[0], iframe.frame_index)


def extract_pose(frame: VideoFrame, identity: IdentityCode, dictionary: MotionDictionary,
                 encoder: FrameEncoder, bits=POSE_BITS, c_max=POSE_C_MAX) -> PoseCode:
    """C_vi: quantized projections of the frame's latent delta."""
    with no_grad():
        z = encoder(Tensor(frame.pixels[None]))
    delta = z.data[0] - identity.latent
    coeffs = delta.astype(np.float64) @ dictionary.directions.data.astype(np.float64).T
    return PoseCode(quantize_coefficients(coeffs, bits, c_max), frame.frame_index)


def apply_motion(identity: IdentityCode, pose: PoseCode, dictionary: MotionDictionary,
                 generator: FrameGenerator, bits=POSE_BITS, c_max=POSE_C_MAX) -> VideoFrame:
    """Render identity + decoded motion; pixels clipped to [0, 1]."""
    coeffs = dequantize_coefficients(pose.coefficients, bits, c_max)
    z = identity.latent + coeffs @ dictionary.directions.data
    with no_grad():
        px = generator(Tensor(z[None]))
    return VideoFrame(np.clip(px.data[0], 0.0, 1.0), pose.frame_index)


def write_avraw(path, frames, fps) -> None:
    """Planar RGB float32 file: magic AVVR, H, W, N, fps, then R/G/B planes."""
    if not frames:
        raise InputError("cannot write an empty frame sequence")
    h, w, _ = frames[0].pixels.shape
    parts = [b"AVVR", struct.pack("<IIIf", h, w, len(frames), float(fps))]
    for frame in frames:
        if frame.pixels.shape != (h, w, 3):
            raise InputError("all frames must share one size")
        planes = np.ascontiguousarray(frame.pixels.transpose(2, 0, 1), dtype="<f4")
        parts.append(planes.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_avraw(path):
    """Returns (frames, fps). Pixels are clipped into [0, 1] on load."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"AVVR":
        raise FormatError("not a raw video file (bad magic)")
    if len(blob) < 20:
        raise CorruptionError("raw video file truncated in header")
    h, w, n, fps = struct.unpack("<IIIf", blob[4:20])
    frame_bytes = h * w * 3 * 4
    need = 20 + n * frame_bytes
    if len(blob) < need:
        raise CorruptionError("raw video file truncated")
    if len(blob) > need:
        raise CorruptionError("raw video file has trailing bytes")
    frames = []
    for i in range(n):
        flat = np.frombuffer(blob, dtype="<f4", count=h * w * 3, offset=20 + i * frame_bytes)
        px = np.clip(flat.reshape(3, h, w).transpose(1, 2, 0), 0.0, 1.0)
        if not np.isfinite(px).all():
            raise CorruptionError(f"frame {i} contains non-finite pixels")
        frames.append(VideoFrame(px, i))
    return frames, fps


def export_png(frame: VideoFrame, path) -> None:
    """8-bit PNG snapshot of a frame, for inspection only."""
    img = np.clip(np.round(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(str(path), format="PNG")

"""Lossless toy GOP codec: one I frame followed by motion-compensated P frames.

Frames are ``uint8`` arrays of shape ``(h, w, c)``. A P frame stores one
integer motion vector ``(dy, dx)`` per macroblock and an ``int16`` residual
plane, and reconstructs as ``P[t][i] = P[t-1][i - T[i]] + residual[i]`` with
reference coordinates clamped to the frame.

Binary layouts (little-endian):

RGOP  ``"RGOP" u8:version u16:h u16:w u8:c u16:frame_count u8:mb u8:search_range``,
      I frame (h*w*c u8), then per P frame ``(h/mb)*(w/mb)`` pairs of ``i8 dy, i8 dx``
      in row-major block order followed by h*w*c ``i16`` residuals.
RRAW  ``"RRAW" u8:version u16:h u16:w u8:c u16:frame_count``, then the frames as u8.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .tensor import Tensor

VERSION = 1
_GOP_HEADER = struct.Struct("<4sBHHBHBB")
_RAW_HEADER = struct.Struct("<4sBHHBH")


class ContainerError(ValueError):
    """A malformed byte stream; ``offset`` is where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedStreamError(ContainerError):
    pass


class InvariantViolationError(ContainerError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    mb: int = 8
    search_range: int = 4

    def __post_init__(self):
        if not 1 <= self.mb <= 255:
            raise ValueError(f"macroblock size must be in 1..255, got {self.mb}")
        if not 0 <= self.search_range <= 127:
            raise ValueError(f"search range must be in 0..127, got {self.search_range}")


@dataclass
class PFrame:
    motion: np.ndarray    # (h/mb, w/mb, 2) int, (dy, dx) per macroblock
    residual: np.ndarray  # (h, w, c) int16


@dataclass(eq=False)
class Gop:
    i_frame: np.ndarray
    p_frames: list[PFrame] = field(default_factory=list)
    config: CodecConfig = field(default_factory=CodecConfig)

    @property
    def frame_count(self) -> int:
        return 1 + len(self.p_frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.i_frame.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Gop):
            return NotImplemented
        if self.config != other.config or len(self.p_frames) != len(other.p_frames):
            return False
        if not _same(self.i_frame, other.i_frame):
            return False
        return all(_same(a.motion, b.motion) and _same(a.residual, b.residual)
                   for a, b in zip(self.p_frames, other.p_frames))


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a, b))


def _check_frames(frames: Sequence[np.ndarray]) -> np.ndarray:
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    stack = []
    for k, f in enumerate(frames):
        f = np.asarray(f)
        if f.ndim == 2:
            f = f[:, :, None]
        if f.ndim != 3 or f.shape[2] not in (1, 3):
            raise ValueError(f"frame {k}: expected (h, w, c) with c in {{1, 3}}, got {f.shape}")
        if stack and f.shape != stack[0].shape:
            raise ValueError(f"frame {k}: dimensions {f.shape} differ from frame 0 {stack[0].shape}")
        if f.dtype != np.uint8:
            if np.any((f < 0) | (f > 255)) or np.any(f != np.round(f)):
                raise ValueError(f"frame {k}: pixels must be integers in 0..255")
            f = f.astype(np.uint8)
        stack.append(f)
    return np.stack(stack)


def _shifted(prev: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = prev[clamp(y - dy), clamp(x - dx)]``."""
    h, w = prev.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return prev[rows[:, None], cols[None, :]]


def candidate_vectors(search_range: int) -> list[tuple[int, int]]:
    """All displacements within the window in tie-breaking order."""
    r = range(-search_range, search_range + 1)
    cands = [(dy, dx) for dy in r for dx in r]
    return sorted(cands, key=lambda v: (abs(v[0]) + abs(v[1]), v[0], v[1]))


def motion_compensate(prev: np.ndarray, motion: np.ndarray, mb: int) -> np.ndarray:
    """Prediction of the next frame from ``prev`` under a per-block motion field."""
    h, w = prev.shape[:2]
    vy = np.repeat(np.repeat(motion[:, :, 0], mb, axis=0), mb, axis=1).astype(np.int64)
    vx = np.repeat(np.repeat(motion[:, :, 1], mb, axis=0), mb, axis=1).astype(np.int64)
    rows = np.clip(np.arange(h)[:, None] - vy, 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - vx, 0, w - 1)
    return prev[rows, cols]


def estimate_motion(prev: np.ndarray, cur: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Exhaustive SAD block matching; first minimum in :func:`candidate_vectors` order wins."""
    h, w, c = cur.shape
    mb = config.mb
    sr = config.search_range
    cands = candidate_vectors(sr)
    cur_i = cur.astype(np.int32)
    # edge padding by sr reproduces coordinate clamping for every |d| <= sr
    padded = np.pad(prev.astype(np.int32), ((sr, sr), (sr, sr), (0, 0)), mode="edge")
    sads = np.empty((len(cands), h // mb, w // mb), dtype=np.int64)
    for k, (dy, dx) in enumerate(cands):
        ref = padded[sr - dy:sr - dy + h, sr - dx:sr - dx + w]
        diff = np.abs(cur_i - ref)
        sads[k] = diff.reshape(h // mb, mb, w // mb, mb, c).sum(axis=(1, 3, 4))
    best = np.argmin(sads, axis=0)
    return np.asarray(cands, dtype=np.int8)[best]


def encode_gop(frames: Sequence[np.ndarray], config: CodecConfig | None = None) -> Gop:
    config = CodecConfig() if config is None else config
    stack = _check_frames(frames)
    _, h, w, _ = stack.shape
    if h % config.mb or w % config.mb:
        raise ValueError(f"frame size {h}x{w} not divisible by macroblock size {config.mb}")
    gop = Gop(stack[0].copy(), [], config)
    recon = stack[0]
    for cur in stack[1:]:
        motion = estimate_motion(recon, cur, config)
        pred = motion_compensate(recon, motion, config.mb)
        residual = cur.astype(np.int16) - pred.astype(np.int16)
        gop.p_frames.append(PFrame(motion, residual))
        # lossless: the reconstruction is the current frame itself
        recon = cur
    return gop


def _check_index(gop: Gop, t: int) -> None:
    if not 0 <= t < gop.frame_count:
        raise IndexError(f"frame index {t} out of range for GOP of {gop.frame_count} frames")


def decode_frame(gop: Gop, t: int) -> np.ndarray:
    """Reconstruct frame ``t`` reading only the I frame and P frames ``1..t``."""
    _check_index(gop, t)
    frame = gop.i_frame
    for k in range(t):
        pf = gop.p_frames[k]
        pred = motion_compensate(frame, pf.motion, gop.config.mb)
        out = pred.astype(np.int16) + pf.residual
        if out.min() < 0 or out.max() > 255:
            raise ValueError(f"P frame {k + 1} reconstructs outside 0..255")
        frame = out.astype(np.uint8)
    return frame.copy()


def decode_all(gop: Gop) -> np.ndarray:
    frames = [gop.i_frame.copy()]
    for k, pf in enumerate(gop.p_frames):
        pred = motion_compensate(frames[-1], pf.motion, gop.config.mb)
        out = pred.astype(np.int16) + pf.residual
        if out.min() < 0 or out.max() > 255:
            raise ValueError(f"P frame {k + 1} reconstructs outside 0..255")
        frames.append(out.astype(np.uint8))
    return np.stack(frames)


def accumulate_to_apex(gop: Gop, apex_idx: int) -> np.ndarray:
    """Apex frame recovered by accumulating residuals from the I frame."""
    return decode_frame(gop, apex_idx)


def residual_array(gop: Gop, t: int, with_motion: bool = False) -> np.ndarray:
    if t == 0:
        raise ValueError("frame 0 is the I frame and has no residual")
    _check_index(gop, t)
    pf = gop.p_frames[t - 1]
    planes = pf.residual.astype(np.float64).transpose(2, 0, 1) / 255.0
    if with_motion:
        mb = gop.config.mb
        up = np.repeat(np.repeat(pf.motion.astype(np.float64), mb, axis=0), mb, axis=1)
        sr = gop.config.search_range
        up = up / sr if sr else up * 0.0
        planes = np.concatenate([planes, up.transpose(2, 0, 1)], axis=0)
    return planes


def residual_input(gop: Gop, t: int, with_motion: bool = False) -> Tensor:
    """Residual of frame ``t`` as a ``(c, h, w)`` tensor in [-1, 1].

    With ``with_motion`` two more channels hold the nearest-neighbour
    upsampled motion field divided by the search range.
    """
    return Tensor(residual_array(gop, t, with_motion))


# ---------------------------------------------------------------------------
# containers


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(f"truncated stream while reading {what}: need {n} bytes, "
                                       f"{len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    return source.read()


def _check_magic(reader: _Reader, magic: bytes, header: struct.Struct):
    raw = reader.take(4, "magic")
    if raw != magic:
        raise BadMagicError(f"bad magic {raw!r}, expected {magic!r}", 0)
    version = reader.take(1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    rest = reader.take(header.size - 5, "header")
    return header.unpack(raw + bytes([version]) + rest)


def write_gop(gop: Gop, sink: BinaryIO | None = None) -> bytes:
    """Serialize ``gop``; also write to ``sink`` when given."""
    h, w, c = gop.shape
    cfg = gop.config
    nby, nbx = h // cfg.mb, w // cfg.mb
    parts = [_GOP_HEADER.pack(b"RGOP", VERSION, h, w, c, gop.frame_count, cfg.mb, cfg.search_range),
             np.ascontiguousarray(gop.i_frame, dtype=np.uint8).tobytes()]
    for k, pf in enumerate(gop.p_frames):
        if pf.motion.shape != (nby, nbx, 2) or pf.residual.shape != (h, w, c):
            raise ValueError(f"P frame {k + 1}: shapes {pf.motion.shape}, {pf.residual.shape} "
                             f"do not match the GOP header")
        if np.abs(pf.motion).max(initial=0) > cfg.search_range:
            raise ValueError(f"P frame {k + 1}: motion vector exceeds search range {cfg.search_range}")
        parts.append(pf.motion.astype("<i1").tobytes())
        parts.append(pf.residual.astype("<i2").tobytes())
    blob = b"".join(parts)
    if sink is not None:
        sink.write(blob)
    return blob


def parse_gop(source) -> Gop:
    reader = _Reader(_read_bytes(source))
    _, _, h, w, c, count, mb, sr = _check_magic(reader, b"RGOP", _GOP_HEADER)
    if c not in (1, 3):
        raise InvariantViolationError(f"channel count {c} not in {{1, 3}}", 9)
    if count < 1:
        raise InvariantViolationError("frame count must be at least 1", 10)
    if mb == 0 or h == 0 or w == 0 or h % mb or w % mb:
        raise InvariantViolationError(f"frame {h}x{w} not divisible by macroblock size {mb}", 12)
    if sr > 127:
        raise InvariantViolationError(f"search range {sr} exceeds i8 motion storage", 13)
    npix = h * w * c
    nby, nbx = h // mb, w // mb
    i_frame = np.frombuffer(reader.take(npix, "I frame"), dtype=np.uint8).reshape(h, w, c).copy()
    p_frames = []
    for k in range(1, count):
        at = reader.pos
        motion = np.frombuffer(reader.take(nby * nbx * 2, f"motion field of P frame {k}"),
                               dtype="<i1").reshape(nby, nbx, 2).astype(np.int8)
        if np.abs(motion.astype(np.int16)).max() > sr:
            raise InvariantViolationError(f"P frame {k}: motion vector exceeds search range {sr}", at)
        at = reader.pos
        residual = np.frombuffer(reader.take(npix * 2, f"residual of P frame {k}"),
                                 dtype="<i2").reshape(h, w, c).astype(np.int16)
        if np.abs(residual).max() > 255:
            raise InvariantViolationError(f"P frame {k}: residual outside [-255, 255]", at)
        p_frames.append(PFrame(motion, residual))
    if reader.pos != len(reader.data):
        raise InvariantViolationError(f"{len(reader.data) - reader.pos} trailing bytes after last frame",
                                      reader.pos)
    return Gop(i_frame, p_frames, CodecConfig(mb, sr))


def write_raw(frames: Sequence[np.ndarray], sink: BinaryIO | None = None) -> bytes:
    stack = _check_frames(frames)
    n, h, w, c = stack.shape
    blob = _RAW_HEADER.pack(b"RRAW", VERSION, h, w, c, n) + stack.tobytes()
    if sink is not None:
        sink.write(blob)
    return blob


def parse_raw(source) -> np.ndarray:
    """Frames of an RRAW stream as a ``(n, h, w, c)`` uint8 array."""
    reader = _Reader(_read_bytes(source))
    _, _, h, w, c, count = _check_magic(reader, b"RRAW", _RAW_HEADER)
    if c not in (1, 3):
        raise InvariantViolationError(f"channel count {c} not in {{1, 3}}", 9)
    if count < 1:
        raise InvariantViolationError("frame count must be at least 1", 10)
    body = reader.take(count * h * w * c, "frames")
    if reader.pos != len(reader.data):
        raise InvariantViolationError(f"{len(reader.data) - reader.pos} trailing bytes", reader.pos)
    return np.frombuffer(body, dtype=np.uint8).reshape(count, h, w, c).copy()

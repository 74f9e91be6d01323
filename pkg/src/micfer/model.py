"""Networks and losses of the compressed-domain expression recognizer.

    residual frames --f_E--> per-frame features --LSTM--> z_E --Cls--> class probabilities
    I frame --f_I (frozen)--> z_I
    (z_E, z_I) --Dec--> apex frame estimate
    (z_E, z_I) --T--> statistics for the MI estimate
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .codec import Gop, residual_array
from .mine import StatisticsNet
from .nn import LSTM, Conv2d, Linear, Module
from .tensor import Tensor, no_grad

CE_FLOOR = 1e-12


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per module so one module's init never shifts another's."""
    tag = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass(frozen=True)
class ModelDims:
    channels: int = 1
    height: int = 32
    width: int = 32
    d_e: int = 64
    d_i: int = 32
    n_classes: int = 7
    with_motion: bool = False

    @property
    def c_in(self) -> int:
        return self.channels + (2 if self.with_motion else 0)


class ConvTrunk(Module):
    """conv 3x3/2 (16) -> relu -> conv 3x3/2 (32) -> relu -> flatten -> fully connected."""

    def __init__(self, c_in: int, height: int, width: int, d_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, 16, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(16, 32, 3, rng, stride=2, padding=1)
        h2 = ((height + 1) // 2 + 1) // 2
        w2 = ((width + 1) // 2 + 1) // 2
        self.flat = 32 * h2 * w2
        self.fc = Linear(self.flat, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        return self.fc(x.reshape(x.shape[0], self.flat))


class FrameEncoder(ConvTrunk):
    pass


class IdentityEncoder(ConvTrunk):
    pass


class Classifier(Module):
    def __init__(self, d_e: int, n_classes: int, rng: np.random.Generator):
        self.fc = Linear(d_e, n_classes, rng)

    def logits(self, ze: Tensor) -> Tensor:
        return self.fc(ze)

    def __call__(self, ze: Tensor) -> Tensor:
        return T.softmax(self.fc(ze))


class Decoder(Module):
    def __init__(self, dims: ModelDims, rng: np.random.Generator, hidden: int = 256):
        self.shape = (dims.height, dims.width, dims.channels)
        self.fc1 = Linear(dims.d_e + dims.d_i, hidden, rng)
        self.fc2 = Linear(hidden, dims.height * dims.width * dims.channels, rng)

    def __call__(self, ze: Tensor, zi) -> Tensor:
        h = T.relu(self.fc1(T.concat([ze, T.as_tensor(zi)], axis=1)))
        out = T.sigmoid(self.fc2(h))
        return out.reshape((out.shape[0],) + self.shape)


class ModelBundle(Module):
    def __init__(self, dims: ModelDims, seed: int = 0, identity: IdentityEncoder | None = None):
        self.dims = dims
        self.fE = FrameEncoder(dims.c_in, dims.height, dims.width, dims.d_e, module_rng(seed, "fE"))
        self.lstm = LSTM(dims.d_e, dims.d_e, module_rng(seed, "lstm"))
        self.cls = Classifier(dims.d_e, dims.n_classes, module_rng(seed, "cls"))
        self.dec = Decoder(dims, module_rng(seed, "dec"))
        self.T = StatisticsNet(dims.d_e, dims.d_i, module_rng(seed, "T"))
        if identity is None:
            identity = IdentityEncoder(dims.channels, dims.height, dims.width, dims.d_i,
                                       module_rng(seed, "fI"))
            identity.freeze()
        self.fI = identity

    def encoder_parameters(self) -> list[Tensor]:
        return self.fE.parameters() + self.lstm.parameters()


# ---------------------------------------------------------------------------
# forward passes


def frames_to_nchw(frames: np.ndarray) -> np.ndarray:
    """uint8 ``(n, h, w, c)`` to float ``(n, c, h, w)`` in [0, 1]."""
    return np.asarray(frames, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0


def gop_residuals(gop: Gop, with_motion: bool = False) -> np.ndarray:
    """``(L-1, c, h, w)`` stack of residual inputs for frames ``1..L-1``."""
    if gop.frame_count < 2:
        raise ValueError("GOP has no P frames; expression branch needs residuals")
    return np.stack([residual_array(gop, t, with_motion) for t in range(1, gop.frame_count)])


def encode_expression(bundle: ModelBundle, residuals, lengths: np.ndarray | None = None) -> Tensor:
    """z_E for a ``(n, steps, c, h, w)`` batch of residual sequences."""
    x = T.as_tensor(residuals)
    n, steps = x.shape[:2]
    feats = bundle.fE(x.reshape((n * steps,) + x.shape[2:]))
    return bundle.lstm(feats.reshape(n, steps, bundle.dims.d_e), lengths)


def encode_identity(bundle: ModelBundle, i_frames: np.ndarray) -> np.ndarray:
    """z_I for uint8 I frames ``(n, h, w, c)``; f_I is frozen so no graph is kept."""
    with no_grad():
        return bundle.fI(Tensor(frames_to_nchw(i_frames))).data


def forward_expression(bundle: ModelBundle, gop: Gop) -> tuple[Tensor, Tensor]:
    """(z_E, class probabilities) for one GOP."""
    res = gop_residuals(gop, bundle.dims.with_motion)[None]
    ze = encode_expression(bundle, res)
    return ze, bundle.cls(ze)


# ---------------------------------------------------------------------------
# losses


def loss_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p_y over the batch, p_y floored at 1e-12."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    n, c = probs.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels {labels.tolist()} invalid for {n} rows of {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    p_y = T.sum(probs * onehot, axis=1)
    return -T.mean(T.log(T.clamp_min(p_y, CE_FLOOR)))


def loss_reconstruction(output: Tensor, apex) -> Tensor:
    """Mean squared error against the apex frame scaled to [0, 1]."""
    target = np.asarray(apex.data if isinstance(apex, Tensor) else apex, dtype=np.float64)
    if output.shape != target.shape:
        raise T.ShapeError(f"reconstruction: output {output.shape} vs target {target.shape}")
    return T.mean((output - target) * (output - target))


# ---------------------------------------------------------------------------
# MICM checkpoints


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


_DIM_FIELDS = ("channels", "height", "width", "d_e", "d_i", "n_classes", "with_motion")


def bundle_records(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    d = asdict(bundle.dims)
    meta = np.array([float(d[k]) for k in _DIM_FIELDS])
    return [("meta.dims", meta)] + [(k, p.data) for k, p in bundle.named_parameters().items()]


def write_records(records: list[tuple[str, np.ndarray]], sink: BinaryIO | None = None) -> bytes:
    parts = [b"MICM", struct.pack("<BH", 1, len(records))]
    for name, arr in records:
        raw = name.encode()
        if len(raw) > 255 or arr.ndim > 255:
            raise CheckpointError(f"record {name!r} cannot be stored")
        parts.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(parts)
    if sink is not None:
        sink.write(blob)
    return blob


def read_records(source) -> list[tuple[str, np.ndarray]]:
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != b"MICM":
        raise CheckpointError("bad magic: not a MICM checkpoint")
    version, count = struct.unpack("<BH", take(3, "header"))
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    records = []
    for k in range(count):
        nlen = take(1, f"record {k} name length")[0]
        name = take(nlen, f"record {k} name").decode("utf-8", errors="replace")
        rank = take(1, f"rank of {name!r}")[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * size, f"values of {name!r}"), dtype="<f8").reshape(shape)
        records.append((name, arr.astype(np.float64)))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last record")
    return records


def save_checkpoint(bundle: ModelBundle, sink: BinaryIO | None = None) -> bytes:
    return write_records(bundle_records(bundle), sink)


def load_checkpoint(source) -> ModelBundle:
    records = dict(read_records(source))
    if "meta.dims" not in records:
        raise CheckpointError("missing record 'meta.dims'")
    meta = records.pop("meta.dims")
    if meta.shape != (len(_DIM_FIELDS),):
        raise ShapeMismatchError(f"record 'meta.dims' has shape {meta.shape}")
    vals = dict(zip(_DIM_FIELDS, meta.tolist()))
    dims = ModelDims(**{k: (bool(v) if k == "with_motion" else int(v)) for k, v in vals.items()})
    bundle = ModelBundle(dims)
    load_parameters(bundle, records)
    return bundle


def load_parameters(module: Module, records: dict[str, np.ndarray]) -> None:
    params = module.named_parameters()
    missing = sorted(set(params) - set(records))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing)}")
    extra = sorted(set(records) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint has unknown records: {', '.join(extra)}")
    for name, p in params.items():
        arr = records[name]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"parameter {name!r}: checkpoint shape {arr.shape}, "
                                     f"model expects {p.shape}")
        p.data = arr.copy()


def save_identity(encoder: IdentityEncoder, dims: ModelDims, sink: BinaryIO | None = None) -> bytes:
    """MICM file holding only a pretrained f_I, keyed like the bundle's ``fI.*`` records."""
    meta = np.array([dims.channels, dims.height, dims.width, dims.d_i], dtype=np.float64)
    records = [("meta.identity", meta)]
    records += [(f"fI.{k}", p.data) for k, p in encoder.named_parameters().items()]
    return write_records(records, sink)


def load_identity(source) -> IdentityEncoder:
    records = dict(read_records(source))
    if "meta.identity" not in records:
        raise CheckpointError("missing record 'meta.identity': not an identity-encoder checkpoint")
    meta = records.pop("meta.identity")
    if meta.shape != (4,):
        raise ShapeMismatchError(f"record 'meta.identity' has shape {meta.shape}")
    c, h, w, d_i = (int(v) for v in meta)
    enc = IdentityEncoder(c, h, w, d_i, np.random.default_rng(0))
    load_parameters(enc, {k[3:]: v for k, v in records.items() if k.startswith("fI.")})
    enc.freeze()
    return enc

"""Synthetic expression videos with independent identity and expression factors.

An identity is a fixed texture (a sum of Gaussian blobs). An expression class
is a smooth displacement field localized in one region of the canvas, pushing
the texture along a class-specific direction; its intensity follows either a
ramp (neutral to apex at the last frame) or a peak (apex mid-sequence).

Optionally (``style_spread > 0``) each identity also gets a personal expression
style: gain, a small direction offset, a shift of the moving region and a tempo
exponent on the intensity curve. Style never changes which region moves or the
apex position, so the class stays recoverable, but it puts identity-specific
signal into the motion. The default of 0 renders every identity's expressions
with the shared class template.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecConfig, Gop, encode_gop, parse_gop, write_gop

PROFILES = ("ramp", "peak")
MANIFEST_HEADER = ["path", "expression_label", "identity_label", "apex_idx", "profile"]


@dataclass(frozen=True)
class ExpressionStyle:
    gain: float = 1.0
    angle: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    tempo: float = 1.0


@dataclass(frozen=True)
class SubjectSpec:
    identity_id: int
    base_pattern_seed: int
    height: int = 32
    width: int = 32
    channels: int = 1
    n_blobs: int = 6
    style_spread: float = 0.0   # > 0 gives each identity its own expression style

    def style(self) -> ExpressionStyle:
        rng = np.random.default_rng(np.random.SeedSequence([self.base_pattern_seed, 2]))
        gain, angle, sy, sx, log_tempo = rng.uniform(-1.0, 1.0, size=5) * self.style_spread
        return ExpressionStyle(1.0 + 0.3 * gain, 0.3 * angle, (2.0 * sy, 2.0 * sx),
                               float(np.exp(0.7 * log_tempo)))

    def _blobs(self):
        rng = np.random.default_rng(self.base_pattern_seed)
        centers = rng.uniform([3, 3], [self.height - 3, self.width - 3], size=(self.n_blobs, 2))
        sigmas = rng.uniform(4.0, 8.0, size=self.n_blobs)
        amps = rng.uniform(-1.0, 1.0, size=(self.n_blobs, self.channels))
        return centers, sigmas, amps

    def field(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Unnormalized texture sampled at real coordinates; shape ``ys.shape + (c,)``."""
        centers, sigmas, amps = self._blobs()
        out = np.zeros(ys.shape + (self.channels,))
        for (cy, cx), s, a in zip(centers, sigmas, amps):
            g = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * s * s))
            out += g[..., None] * a
        return out

    def _grid(self):
        return np.meshgrid(np.arange(self.height, dtype=np.float64),
                           np.arange(self.width, dtype=np.float64), indexing="ij")

    def _normalizer(self):
        ref = self.field(*self._grid())
        lo, hi = ref.min(), ref.max()
        span = hi - lo if hi > lo else 1.0
        return lambda v: 32.0 + (v - lo) * (191.0 / span)

    def render(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Texture mapped so the undeformed image spans [32, 223]."""
        return self._normalizer()(self.field(ys, xs))

    def base_image(self) -> np.ndarray:
        return np.round(self.render(*self._grid())).astype(np.uint8)


def subject(identity_id: int, seed: int = 0, **kw) -> SubjectSpec:
    base = int(np.random.SeedSequence([seed, 7919, identity_id]).generate_state(1)[0])
    return SubjectSpec(identity_id, base, **kw)


@dataclass(frozen=True)
class ExpressionTemplate:
    """Class ``k`` displaces a Gaussian region on a ring at angle 2*pi*k/C along that same angle."""

    class_id: int
    n_classes: int = 7
    amplitude: float = 6.0
    ring_radius: float = 10.0
    region_sigma: float = 4.0

    def displacement(self, ys: np.ndarray, xs: np.ndarray, s: float, height: int, width: int,
                     style: ExpressionStyle = ExpressionStyle()):
        phi = 2.0 * math.pi * self.class_id / self.n_classes
        cy = (height - 1) / 2.0 + self.ring_radius * math.sin(phi) + style.shift[0]
        cx = (width - 1) / 2.0 + self.ring_radius * math.cos(phi) + style.shift[1]
        g = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * self.region_sigma ** 2))
        mag = s * self.amplitude * style.gain * g
        direction = phi + style.angle
        return mag * math.sin(direction), mag * math.cos(direction)


def intensity(profile: str, t: int, length: int) -> float:
    if profile == "ramp":
        return t / (length - 1)
    if profile == "peak":
        return 1.0 - abs(2.0 * t / (length - 1) - 1.0)
    raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def apex_index(profile: str, length: int) -> int:
    if profile == "ramp":
        return length - 1
    if profile == "peak":
        return length // 2
    raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


@dataclass
class SequenceSample:
    frames: np.ndarray   # (L, h, w, c) uint8
    label: int
    identity: int
    apex_idx: int
    profile: str


def render_frame(subj: SubjectSpec, template: ExpressionTemplate, s: float) -> np.ndarray:
    """Noise-free frame at intensity ``s`` (backward warp of the texture, subject's style)."""
    ys, xs = subj._grid()
    dy, dx = template.displacement(ys, xs, s, subj.height, subj.width, subj.style())
    return np.round(subj.render(ys - dy, xs - dx))


def render_sequence(subj: SubjectSpec, template: ExpressionTemplate, profile: str = "ramp",
                    length: int = 16, noise_seed: int = 0, noise: int = 2) -> SequenceSample:
    if length < 2:
        raise ValueError(f"sequence length must be >= 2, got {length}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    rng = np.random.default_rng(noise_seed)
    frames = np.empty((length, subj.height, subj.width, subj.channels), dtype=np.uint8)
    tempo = subj.style().tempo
    for t in range(length):
        clean = render_frame(subj, template, intensity(profile, t, length) ** tempo)
        jitter = rng.integers(-noise, noise + 1, size=clean.shape)
        frames[t] = np.clip(clean + jitter, 0, 255).astype(np.uint8)
    return SequenceSample(frames, template.class_id, subj.identity_id,
                          apex_index(profile, length), profile)


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    expression_label: int
    identity_label: int
    apex_idx: int
    profile: str


@dataclass
class DatasetManifest:
    root: Path
    train: list[ManifestEntry]
    test: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def write_manifest(path: Path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.path, e.expression_label, e.identity_label, e.apex_idx, e.profile])


def read_manifest(path: Path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
        out.append(ManifestEntry(row[0], int(row[1]), int(row[2]), int(row[3]), row[4]))
    return out


def generate_dataset(out_dir, n_identities: int = 20, n_classes: int = 7, per_cell: int = 4,
                     profile: str = "ramp", split_seed: int = 0, length: int = 16,
                     size: int = 32, channels: int = 1, test_fraction: float = 0.2,
                     codec: CodecConfig | None = None, style_spread: float = 0.0
                     ) -> DatasetManifest:
    """Render, encode and write every (identity, class, replicate) sequence.

    Writes one RGOP file per sequence plus ``manifest.csv`` (all entries),
    ``train.csv`` and ``test.csv``. Splits are identity-disjoint.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    codec = CodecConfig() if codec is None else codec
    order = np.random.default_rng(split_seed).permutation(n_identities)
    n_test = max(1, int(round(test_fraction * n_identities)))
    test_ids = set(int(i) for i in order[:n_test])
    train, test = [], []
    for ident in range(n_identities):
        subj = subject(ident, split_seed, height=size, width=size, channels=channels,
                       style_spread=style_spread)
        for cls in range(n_classes):
            template = ExpressionTemplate(cls, n_classes)
            for rep in range(per_cell):
                noise_seed = int(np.random.SeedSequence([split_seed, 104729, ident, cls, rep])
                                 .generate_state(1)[0])
                sample = render_sequence(subj, template, profile, length, noise_seed)
                name = f"id{ident:03d}_c{cls}_r{rep}.rgop"
                target = root / name
                try:
                    with open(target, "wb") as fh:
                        write_gop(encode_gop(list(sample.frames), codec), fh)
                except OSError as exc:
                    raise OSError(f"{target}: {exc.strerror or exc}") from exc
                entry = ManifestEntry(name, cls, ident, sample.apex_idx, profile)
                (test if ident in test_ids else train).append(entry)
    write_manifest(root / "manifest.csv", train + test)
    write_manifest(root / "train.csv", train)
    write_manifest(root / "test.csv", test)
    return DatasetManifest(root, train, test)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    for name in ("train.csv", "test.csv"):
        if not (root / name).exists():
            raise FileNotFoundError(f"{root / name}: missing split manifest (run gen-data first)")
    return DatasetManifest(root, read_manifest(root / "train.csv"), read_manifest(root / "test.csv"))


def load_gop(root, entry: ManifestEntry) -> Gop:
    path = Path(root) / entry.path
    try:
        with open(path, "rb") as fh:
            return parse_gop(fh)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc

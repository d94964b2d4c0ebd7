"""Synthetic two-domain segmentation data, label remapping and TensorPack I/O."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffcore import ConfigError
from .losses import ValidationError


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------- appearance model

# base RGB colour and stripe texture (fx, fy) per class; luminance stripes survive hue shifts
PALETTE = np.array([
    [0.30, 0.58, 0.22],   # 0 grass
    [0.42, 0.26, 0.12],   # 1 tree trunk / bush
    [0.55, 0.72, 0.92],   # 2 sky
    [0.62, 0.60, 0.55],   # 3 gravel
    [0.20, 0.20, 0.22],   # 4 rock
    [0.75, 0.62, 0.38],   # 5 mulch
    [0.15, 0.35, 0.55],   # 6 water
    [0.80, 0.30, 0.25],   # 7 man-made
], dtype=np.float64)

TEXTURE_FREQ = np.array([
    [0.0, 1.3],
    [1.3, 0.0],
    [0.0, 0.0],
    [0.9, 0.9],
    [0.9, -0.9],
    [0.0, 0.6],
    [0.6, 0.0],
    [1.6, 1.6],
])
TEXTURE_AMP = 0.12

DEFAULT_NAVIGABLE = (True, False, False, True, False, True, False, False)


@dataclass(frozen=True)
class ShiftSpec:
    """Appearance change from source to target; labels are never touched."""
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hue: float = 0.0
    noise: float = 0.0
    palette_swap: tuple[tuple[int, int], ...] = ()
    seed: int = 0

    def is_identity(self) -> bool:
        return (self.gain == (1.0, 1.0, 1.0) and self.bias == (0.0, 0.0, 0.0) and self.hue == 0.0
                and self.noise == 0.0 and not self.palette_swap)

    def scaled(self, t: float) -> "ShiftSpec":
        """Interpolate between no shift (t=0) and this shift (t=1)."""
        return replace(self,
                       gain=tuple(1.0 + t * (g - 1.0) for g in self.gain),
                       bias=tuple(t * b for b in self.bias),
                       hue=t * self.hue, noise=t * self.noise)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "ShiftSpec":
        """Parse ``hue:0.5,noise:0.05,gain:1/0.9/1.1,bias:0/0/0.05,swap:1-2``."""
        kw: dict = {"seed": seed}
        if not text or text == "none":
            return cls(**kw)
        swaps = []
        for part in text.split(","):
            key, _, val = part.partition(":")
            key = key.strip()
            if key in ("hue", "noise"):
                kw[key] = float(val)
            elif key in ("gain", "bias"):
                vals = tuple(float(v) for v in val.split("/"))
                if len(vals) != 3:
                    raise ConfigError(f"{key} needs three '/'-separated values")
                kw[key] = vals
            elif key == "swap":
                a, b = val.split("-")
                swaps.append((int(a), int(b)))
            else:
                raise ConfigError(f"unknown shift component {key!r}")
        kw["palette_swap"] = tuple(swaps)
        return cls(**kw)


STANDARD_SHIFT = ShiftSpec(hue=2.0, noise=0.06, gain=(1.0, 0.9, 1.1), seed=1)


def hue_matrix(angle: float) -> np.ndarray:
    """Rotation of RGB space about the grey axis."""
    u = np.ones(3) / math.sqrt(3.0)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def render_labels(labels: np.ndarray, rng: np.random.Generator, k: int) -> np.ndarray:
    """Source-domain appearance (3, H, W) for a class map."""
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = PALETTE[labels].transpose(2, 0, 1).copy()
    phase = rng.uniform(0, 2 * math.pi, size=k)
    for c in range(k):
        fx, fy = TEXTURE_FREQ[c]
        if fx == 0 and fy == 0:
            continue
        mask = labels == c
        if mask.any():
            img[:, mask] += TEXTURE_AMP * np.sin(fx * xx[mask] + fy * yy[mask] + phase[c])
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_shift(img: np.ndarray, labels: np.ndarray | None, shift: ShiftSpec | None,
                rng: np.random.Generator) -> np.ndarray:
    if shift is None or shift.is_identity():
        return img
    out = img.copy()
    if shift.palette_swap and labels is not None:
        for a, b in shift.palette_swap:
            ma, mb = labels == a, labels == b
            out[:, ma] += (PALETTE[b] - PALETTE[a])[:, None]
            out[:, mb] += (PALETTE[a] - PALETTE[b])[:, None]
    if shift.hue:
        out = np.einsum("ij,jhw->ihw", hue_matrix(shift.hue), out)
    out = out * np.asarray(shift.gain)[:, None, None] + np.asarray(shift.bias)[:, None, None]
    if shift.noise:
        out += rng.normal(0.0, shift.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- layouts

def random_layout(rng: np.random.Generator, h: int, w: int, k: int) -> np.ndarray:
    """Background class 0 with 3-6 filled ellipses/polygons of other classes."""
    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 7))):
        c = int(rng.integers(1, k))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            ry = rng.uniform(0.12, 0.3) * h
            rx = rng.uniform(0.12, 0.3) * w
            th = rng.uniform(0, math.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * math.cos(th) + dy * math.sin(th)
            v = -dx * math.sin(th) + dy * math.cos(th)
            mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        else:
            n = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * math.pi, size=n))
            rad = rng.uniform(0.15, 0.35, size=n) * min(h, w)
            px, py = cx + rad * np.cos(ang), cy + rad * np.sin(ang)
            mask = _polygon_mask(px, py, xx, yy)
        labels[mask] = c
    return labels


def _polygon_mask(px, py, xx, yy) -> np.ndarray:
    # even-odd rule
    inside = np.zeros(xx.shape, dtype=bool)
    n = len(px)
    for i in range(n):
        x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % n], py[(i + 1) % n]
        if y0 == y1:
            continue
        cond = (yy >= min(y0, y1)) & (yy < max(y0, y1))
        xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (xx < xint)
    return inside


# ---------------------------------------------------------------- datasets

@dataclass
class SegSample:
    image: np.ndarray                  # (3, H, W) float32 in [0, 1]
    label: np.ndarray | None = None    # (H, W) int, None for unlabeled target
    domain: str = "source"


@dataclass
class Dataset:
    samples: list[SegSample]
    k: int
    navigable: tuple[bool, ...] = field(default_factory=tuple)
    labeled: bool = True
    domain: str = "source"

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> SegSample:
        return self.samples[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples[0].image.shape[1:]

    def images(self) -> list[np.ndarray]:
        return [s.image for s in self.samples]

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        a, b = self.samples[:n_first], self.samples[n_first:]
        return replace(self, samples=a), replace(self, samples=b)


def generate_sample(i: int, shape: tuple[int, int], k: int, layout_seed: int,
                    shift: ShiftSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence([layout_seed, i]))
    labels = random_layout(rng, h, w, k)
    img = render_labels(labels, rng, k)
    if shift is not None and not shift.is_identity():
        img = apply_shift(img, labels, shift, np.random.default_rng(np.random.SeedSequence([shift.seed, layout_seed, i])))
    return img.astype(np.float32), labels


def generate_dataset(n: int, shape: tuple[int, int], k: int, layout_seed: int,
                     shift: ShiftSpec | None = None, labeled: bool | None = None) -> Dataset:
    """``n`` samples; with a shift the images take target appearance and labels are withheld
    unless ``labeled=True`` (evaluation copies keep them)."""
    if k < 2:
        raise ConfigError("K must be >= 2")
    if k > len(PALETTE):
        raise ConfigError(f"K={k} exceeds palette size {len(PALETTE)}")
    if shape[0] < 16 or shape[1] < 16:
        raise ConfigError("H and W must be >= 16")
    is_target = shift is not None and not shift.is_identity()
    if labeled is None:
        labeled = not is_target
    domain = "target" if is_target else "source"
    samples = []
    for i in range(n):
        img, lab = generate_sample(i, shape, k, layout_seed, shift)
        samples.append(SegSample(img, lab if labeled else None, domain))
    return Dataset(samples, k, DEFAULT_NAVIGABLE[:k], labeled, domain)


# ---------------------------------------------------------------- remapping

@dataclass(frozen=True)
class RemapTable:
    mapping: Mapping[int, int]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        groups = sorted(set(self.mapping.values()))
        if groups != list(range(len(groups))):
            raise ValidationError(f"group ids must be contiguous from 0, got {groups}")

    @property
    def n_groups(self) -> int:
        return len(set(self.mapping.values()))

    @classmethod
    def identity(cls, k: int) -> "RemapTable":
        return cls({c: c for c in range(k)})

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]], names: Sequence[str] = ()) -> "RemapTable":
        return cls({c: g for g, members in enumerate(groups) for c in members}, tuple(names))


def remap_array(labels: np.ndarray, table: RemapTable) -> np.ndarray:
    present = np.unique(labels)
    missing = [int(c) for c in present if int(c) not in table.mapping]
    if missing:
        raise ValidationError(f"class ids {missing} have no group in the remap table")
    lut = np.zeros(int(present.max()) + 1, dtype=labels.dtype)
    for c, g in table.mapping.items():
        if c < len(lut):
            lut[c] = g
    return lut[labels]


def remap_labels(dataset: Dataset, table: RemapTable) -> Dataset:
    missing = [c for c in range(dataset.k) if c not in table.mapping]
    if missing:
        raise ValidationError(f"class ids {missing} have no group in the remap table")
    samples = [replace(s, label=None if s.label is None else remap_array(s.label, table))
               for s in dataset.samples]
    nav = ()
    if dataset.navigable:
        # a group is navigable only if every member is
        nav = tuple(all(dataset.navigable[c] for c, g in table.mapping.items() if g == grp and c < dataset.k)
                    for grp in range(table.n_groups))
    return replace(dataset, samples=samples, k=table.n_groups, navigable=nav)


# ---------------------------------------------------------------- TensorPack

MAGIC = b"CTEN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i4")}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 1
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return 2
    if arr.dtype.kind in "iu":
        return 3
    raise ValidationError(f"unsupported dtype {arr.dtype}")


def pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(tensors))
    for name, arr in tensors.items():
        if not name.isascii():
            raise ValidationError(f"tensor name {name!r} is not ASCII")
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        payload = np.ascontiguousarray(arr.astype(_DTYPES[code], copy=False)).tobytes()
        nb = name.encode("ascii")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += payload
        out += struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


def unpack_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        raw_name = take(nlen, "name")
        if not raw_name.isascii():
            raise FormatError("tensor name is not ASCII", pos - nlen)
        name = raw_name.decode("ascii")
        code_at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", code_at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dt = _DTYPES[code]
        start = pos
        payload = take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"payload of {name}")
        (crc,) = struct.unpack("<I", take(4, "checksum"))
        if zlib.crc32(payload) != crc:
            raise FormatError(f"checksum mismatch in tensor {name!r}", start)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry", pos)
    return out


def write_tensorpack(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_tensors(tensors))


def read_tensorpack(path: str | Path) -> dict[str, np.ndarray]:
    return unpack_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------- dataset directories

def save_dataset(ds: Dataset, directory: str | Path, extra: Mapping[str, str] | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = ds.shape
    lines = [f"n={len(ds)}", f"H={h}", f"W={w}", f"K={ds.k}", f"labeled={int(ds.labeled)}",
             f"domain={ds.domain}", "navigable=" + ",".join(str(int(v)) for v in ds.navigable)]
    for key, val in (extra or {}).items():
        lines.append(f"{key}={val}")
    for i, s in enumerate(ds.samples):
        fname = f"sample_{i:05d}.ctp"
        tensors = {"image": s.image}
        if s.label is not None:
            tensors["label"] = s.label.astype(np.uint8)
        write_tensorpack(directory / fname, tensors)
        lines.append(f"sample.{i}={fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    man = read_manifest(directory / "manifest.txt")
    n = int(man["n"])
    k = int(man["K"])
    labeled = man.get("labeled", "1") == "1"
    domain = man.get("domain", "source")
    nav = tuple(v == "1" for v in man.get("navigable", "").split(",") if v)
    samples = []
    for i in range(n):
        t = read_tensorpack(directory / man[f"sample.{i}"])
        lab = t["label"].astype(np.int64) if "label" in t else None
        samples.append(SegSample(t["image"], lab, domain))
    return Dataset(samples, k, nav, labeled, domain)

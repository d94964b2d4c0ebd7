"""Shared extractor G, classifier heads C1/C2 and domain discriminator D."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, DimensionError, Tensor, UsageError


@dataclass(frozen=True)
class ExtractorCfg:
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] = (2, 2)
    kernel: int = 3
    slope: float = 0.2

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))


@dataclass(frozen=True)
class ClassifierCfg:
    in_channels: int = 16
    hidden: int = 16
    num_classes: int = 3
    upsample: int = 4
    slope: float = 0.2


@dataclass(frozen=True)
class DiscriminatorCfg:
    channels: tuple[int, ...] = (16, 32, 64, 128, 1)
    kernel: int = 4
    stride: int = 2
    # pad 2 keeps five stride-2 layers valid on an 8x8 feature map
    pad: int = 2
    slope: float = 0.2

    @classmethod
    def full_scale(cls) -> "DiscriminatorCfg":
        return cls(channels=(64, 128, 256, 512, 1), pad=1)


def extractor_shape(cfg: ExtractorCfg, h: int, w: int) -> tuple[int, int, int]:
    pad = cfg.kernel // 2
    for s in cfg.strides:
        h = dc.conv_output_size(h, cfg.kernel, s, pad)
        w = dc.conv_output_size(w, cfg.kernel, s, pad)
    return cfg.out_channels, h, w


def discriminator_shape(cfg: DiscriminatorCfg, h: int, w: int) -> tuple[int, int, int]:
    for _ in cfg.channels:
        h = dc.conv_output_size(h, cfg.kernel, cfg.stride, cfg.pad)
        w = dc.conv_output_size(w, cfg.kernel, cfg.stride, cfg.pad)
    return cfg.channels[-1], h, w


def discriminator_param_count(cfg: DiscriminatorCfg, in_channels: int) -> int:
    total, c_in = 0, in_channels
    for c in cfg.channels:
        total += c * c_in * cfg.kernel * cfg.kernel + c
        c_in = c
    return total


HEADS = ("C1", "C2")


@dataclass
class CaliModel:
    ext: ExtractorCfg
    cls: ClassifierCfg
    disc: DiscriminatorCfg
    G: dict[str, Tensor] = field(default_factory=dict)
    C1: dict[str, Tensor] = field(default_factory=dict)
    C2: dict[str, Tensor] = field(default_factory=dict)
    D: dict[str, Tensor] = field(default_factory=dict)

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in ("G", "C1", "C2", "D"):
            raise UsageError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def params(self, *groups: str) -> list[Tensor]:
        groups = groups or ("G", "C1", "C2", "D")
        return [t for g in groups for t in self.group(g).values()]

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {t.name: t.data for t in self.params()}

    @property
    def dtype(self):
        return next(iter(self.G.values())).dtype

    # ------------------------------------------------------------ forward

    def features(self, x) -> Tensor:
        x = _as_input(x, self.dtype)
        if x.shape[0] != self.ext.in_channels:
            raise DimensionError(f"input channel axis is {x.shape[0]}, expected {self.ext.in_channels}")
        h, w = x.shape[1:]
        if h % self.ext.total_stride or w % self.ext.total_stride:
            raise DimensionError(f"input {h}x{w} not divisible by extractor stride {self.ext.total_stride}")
        pad = self.ext.kernel // 2
        for i, s in enumerate(self.ext.strides):
            x = dc.conv2d(x, self.G[f"G.conv{i}.weight"], self.G[f"G.conv{i}.bias"], stride=s, pad=pad)
            x = dc.leaky_relu(x, self.ext.slope)
        return x

    def logits(self, head: str, f: Tensor) -> Tensor:
        if head not in HEADS:
            raise UsageError(f"head must be one of {HEADS}, got {head!r}")
        if f.shape[0] != self.cls.in_channels:
            raise DimensionError(f"feature channel axis is {f.shape[0]}, expected {self.cls.in_channels}")
        p = self.group(head)
        z = dc.conv2d(f, p[f"{head}.hidden.weight"], p[f"{head}.hidden.bias"], stride=1, pad=1)
        z = dc.leaky_relu(z, self.cls.slope)
        # 1x1 conv commutes with nearest upsampling, so project first (cheaper)
        z = dc.conv2d(z, p[f"{head}.out.weight"], p[f"{head}.out.bias"])
        return dc.upsample_nearest(z, self.cls.upsample)

    def classify(self, head: str, f: Tensor) -> Tensor:
        """Per-pixel class probabilities (K, H, W)."""
        return dc.softmax(self.logits(head, f), axis=0)

    def discriminate(self, f: Tensor) -> Tensor:
        """Map of probabilities that ``f`` came from the source domain."""
        if f.shape[0] != self.ext.out_channels:
            raise DimensionError(f"discriminator expects {self.ext.out_channels} channels, got {f.shape[0]}")
        z = f
        n = len(self.disc.channels)
        for i in range(n):
            z = dc.conv2d(z, self.D[f"D.conv{i}.weight"], self.D[f"D.conv{i}.bias"],
                          stride=self.disc.stride, pad=self.disc.pad)
            if i < n - 1:
                z = dc.leaky_relu(z, self.disc.slope)
        return dc.sigmoid(z)

    def predict(self, x, head: str = "mean") -> np.ndarray:
        """Hard class map; ``head='mean'`` averages both heads' probabilities."""
        with dc.no_grad():
            f = self.features(x)
            if head == "mean":
                p = 0.5 * (self.classify("C1", f).data + self.classify("C2", f).data)
            else:
                p = self.classify(head, f).data
        return p.argmax(axis=0)

    # ------------------------------------------------------------ persistence

    def manifest(self) -> str:
        lines = []
        for key, cfg in (("ext", self.ext), ("cls", self.cls), ("disc", self.disc)):
            for k, v in asdict(cfg).items():
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{key}.{k}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        from .data import write_tensorpack

        path = Path(path)
        write_tensorpack(path, self.named_tensors())
        path.with_suffix(".cfg").write_text(self.manifest(), encoding="utf-8")

    def copy(self) -> "CaliModel":
        out = CaliModel(self.ext, self.cls, self.disc)
        for g in ("G", "C1", "C2", "D"):
            out.group(g).update({k: Tensor(t.data.copy(), requires_grad=True, name=t.name, dtype=t.dtype)
                                 for k, t in self.group(g).items()})
        return out


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise DimensionError(f"image must be (3, H, W), got shape {arr.shape}")
    return Tensor(arr, dtype=dtype)


def build_model(ext: ExtractorCfg | None = None, cls: ClassifierCfg | None = None,
                disc: DiscriminatorCfg | None = None, seed: int = 0, dtype=np.float32) -> CaliModel:
    ext = ext or ExtractorCfg()
    cls = cls or ClassifierCfg(in_channels=ext.out_channels)
    disc = disc or DiscriminatorCfg()
    if len(ext.channels) != len(ext.strides):
        raise ConfigError("extractor channels and strides must have equal length")
    if cls.in_channels != ext.out_channels:
        raise ConfigError(f"classifier in_channels={cls.in_channels} != extractor output {ext.out_channels}")
    if cls.upsample != ext.total_stride:
        raise ConfigError(f"classifier upsample {cls.upsample} must undo extractor stride {ext.total_stride}")
    if cls.num_classes < 2:
        raise ConfigError("need at least two classes")
    if disc.channels[-1] != 1:
        raise ConfigError("discriminator must end in a single channel")

    g_seed, c1_seed, c2_seed, d_seed = np.random.SeedSequence(seed).spawn(4)
    model = CaliModel(ext, cls, disc)

    rng = np.random.default_rng(g_seed)
    c_in = ext.in_channels
    for i, c in enumerate(ext.channels):
        w, b = dc.init_conv(rng, c, c_in, ext.kernel, f"G.conv{i}", dtype)
        model.G[w.name], model.G[b.name] = w, b
        c_in = c

    for head, ss in (("C1", c1_seed), ("C2", c2_seed)):
        rng = np.random.default_rng(ss)
        for part, (co, ci, k) in (("hidden", (cls.hidden, cls.in_channels, 3)),
                                  ("out", (cls.num_classes, cls.hidden, 1))):
            w, b = dc.init_conv(rng, co, ci, k, f"{head}.{part}", dtype)
            model.group(head)[w.name], model.group(head)[b.name] = w, b

    rng = np.random.default_rng(d_seed)
    c_in = ext.out_channels
    for i, c in enumerate(disc.channels):
        w, b = dc.init_conv(rng, c, c_in, disc.kernel, f"D.conv{i}", dtype)
        model.D[w.name], model.D[b.name] = w, b
        c_in = c
    return model


def _parse_manifest(text: str) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {"ext": {}, "cls": {}, "disc": {}}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        out[section][name] = value
    return out


def _coerce(cfg_type, raw: dict[str, str]):
    kwargs = {}
    for name, default in asdict(cfg_type()).items():
        if name not in raw:
            continue
        v = raw[name]
        if isinstance(default, tuple):
            kwargs[name] = tuple(int(x) for x in v.split(",") if x)
        elif isinstance(default, float):
            kwargs[name] = float(v)
        else:
            kwargs[name] = int(v)
    return cfg_type(**kwargs)


def load_model(path: str | Path) -> CaliModel:
    from .data import read_tensorpack

    path = Path(path)
    raw = _parse_manifest(path.with_suffix(".cfg").read_text(encoding="utf-8"))
    tensors = read_tensorpack(path)
    model = CaliModel(_coerce(ExtractorCfg, raw["ext"]), _coerce(ClassifierCfg, raw["cls"]),
                      _coerce(DiscriminatorCfg, raw["disc"]))
    for name, arr in tensors.items():
        group = name.split(".", 1)[0]
        model.group(group)[name] = Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype)
    return model

"""Alternating coarse (domain) / fine (class) alignment training and the SO/DA/CA baselines."""
from __future__ import annotations

import contextlib
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from . import losses as L
from .data import Dataset, SegSample
from .diffcore import Adam, ConfigError, PolySchedule, SGD, Tensor, UsageError
from .metrics import accumulate, confusion, miou_star
from .models import CaliModel, ClassifierCfg, DiscriminatorCfg, ExtractorCfg, build_model

log = logging.getLogger(__name__)

BASELINES = ("SO", "DA", "CA", "CALI")


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 2000
    interval: int = 200
    baseline: str = "CALI"
    lr_seg: float = 2.5e-4          # SGD on G, C1, C2 for supervision and domain alignment
    lr_class: float = 1e-3          # SGD on G during class alignment
    lr_class_heads: float | None = None   # SGD on the heads during class alignment; None -> lr_class
    lr_disc: float = 1e-4           # Adam on D
    momentum: float = 0.9
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.99)
    poly_power: float = 0.9
    w_seg: float = 1.0
    w_wr: float = 1.0
    w_adv: float = 0.01             # weight of the generator's domain-confusion term
    w_cls: float = 1.0
    batch_size: int = 1
    seed: int = 0
    eval_every: int = 100
    order: str = "G_first"          # G_first (max_D min_G) or D_first (the collapsing min_G max_D)
    gen_loss: str = "flipped"       # flipped (non-saturating) or minimax (G descends V1 directly)
    num_classes: int = 3

    def __post_init__(self):
        if self.max_iters <= 0:
            raise ConfigError("max_iters must be > 0")
        if not 0 < self.interval <= self.max_iters:
            raise ConfigError("interval must satisfy 0 < I <= M")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if min(self.lr_seg, self.lr_class, self.heads_lr, self.lr_disc) < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.order not in ("G_first", "D_first"):
            raise ConfigError("order must be G_first or D_first")
        if self.gen_loss not in ("flipped", "minimax"):
            raise ConfigError("gen_loss must be flipped or minimax")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def heads_lr(self) -> float:
        return self.lr_class if self.lr_class_heads is None else self.lr_class_heads

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Hyperparameters reported for the full-scale pretrained backbone."""
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Learning rates rescaled for small networks trained from scratch on CPU."""
        base = dict(lr_seg=1e-2, lr_class=4e-2, lr_class_heads=2.5e-3, lr_disc=1e-4, w_adv=1.0)
        base.update(kw)
        return cls(**base)


def phase_flags(m: int, interval: int) -> tuple[bool, bool]:
    """(is_domain, is_class) at iteration m >= 1; flips before the body whenever m % I == 0."""
    flips = m // interval
    is_domain = flips % 2 == 0
    return is_domain, not is_domain


@contextlib.contextmanager
def frozen(params: Sequence[Tensor]) -> Iterator[None]:
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def param_hash(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode() if p.name else b"")
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    cfg: TrainConfig
    opt_seg: SGD
    opt_wr: SGD
    opt_g_dom: SGD
    opt_d: Adam
    opt_g_cls: SGD
    opt_c_cls: SGD
    m: int = 0
    is_domain: bool = True
    is_class: bool = False

    @classmethod
    def create(cls, model: CaliModel, cfg: TrainConfig) -> "TrainState":
        heads = model.params("C1", "C2")
        g = model.params("G")
        sgd = dict(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        return cls(
            cfg=cfg,
            opt_seg=SGD(model.params("G", "C1", "C2"), cfg.lr_seg, **sgd),
            opt_wr=SGD(heads, cfg.lr_seg, **sgd),
            opt_g_dom=SGD(g, cfg.lr_seg, **sgd),
            opt_d=Adam(model.params("D"), cfg.lr_disc, betas=cfg.betas),
            opt_g_cls=SGD(g, cfg.lr_class, **sgd),
            opt_c_cls=SGD(heads, cfg.heads_lr, **sgd),
        )

    def lr(self, base: float) -> float:
        return dc.poly_lr(PolySchedule(base, self.cfg.max_iters, self.cfg.poly_power), self.m)


def _zero(model: CaliModel) -> None:
    for p in model.params():
        p.grad = None


def _batch(samples: Sequence[SegSample]) -> list[SegSample]:
    return list(samples)


# ---------------------------------------------------------------- sub-steps

def step_supervised(model: CaliModel, state: TrainState, batch_s: Sequence[SegSample]) -> L.LossBreakdown:
    """One L_seg descent step on (G, C1, C2), then one WR descent step on the heads only."""
    cfg = state.cfg
    if any(s.label is None for s in batch_s):
        raise UsageError("supervised step needs labeled source samples")
    _zero(model)
    with frozen(model.params("D")):
        total = None
        for s in batch_s:
            f = model.features(s.image)
            y = L.one_hot(s.label, model.cls.num_classes, f.dtype)
            loss = L.seg_loss(model.classify("C1", f), model.classify("C2", f), y)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(batch_s))
        (total * cfg.w_seg).backward()
    state.opt_seg.step(state.lr(cfg.lr_seg))

    _zero(model)
    with frozen(model.params("G", "D")):
        wr = L.weight_reg(model.C1, model.C2)
        if cfg.w_wr:
            (wr * cfg.w_wr).backward()
            state.opt_wr.step(state.lr(cfg.lr_seg))
    return L.LossBreakdown(iteration=state.m, l_seg=total.item(), wr=wr.item())


def _domain_generator_step(model, state, batch_s, batch_t) -> None:
    cfg = state.cfg
    _zero(model)
    with frozen(model.params("C1", "C2", "D")):
        total = None
        for s, t in zip(batch_s, batch_t):
            ds = model.discriminate(model.features(s.image))
            dt = model.discriminate(model.features(t.image))
            if cfg.gen_loss == "flipped":
                loss = L.domain_ce(ds, L.TARGET) + L.domain_ce(dt, L.SOURCE)
            else:
                loss = L.v1(ds, dt)
            total = loss if total is None else total + loss
        (total * (cfg.w_adv / len(batch_s))).backward()
    state.opt_g_dom.step(state.lr(cfg.lr_seg))


def _domain_discriminator_step(model, state, batch_s, batch_t) -> tuple[float, float]:
    _zero(model)
    with dc.no_grad():
        fs = [model.features(s.image) for s in batch_s]
        ft = [model.features(t.image) for t in batch_t]
    ce_s = ce_t = None
    for a, b in zip(fs, ft):
        cs = L.domain_ce(model.discriminate(a), L.SOURCE)
        ct = L.domain_ce(model.discriminate(b), L.TARGET)
        ce_s = cs if ce_s is None else ce_s + cs
        ce_t = ct if ce_t is None else ce_t + ct
    n = len(batch_s)
    ((ce_s + ce_t) * (1.0 / n)).backward()
    state.opt_d.step(state.lr(state.cfg.lr_disc))
    return ce_s.item() / n, ce_t.item() / n


def step_domain_alignment(model: CaliModel, state: TrainState, batch_s, batch_t) -> L.LossBreakdown:
    """G makes features domain-confusing against a frozen D, then D re-learns on frozen G.

    ``order='D_first'`` swaps the two sub-steps (the ordering that lets D win early).
    """
    if state.cfg.order == "G_first":
        _domain_generator_step(model, state, batch_s, batch_t)
        ce_s, ce_t = _domain_discriminator_step(model, state, batch_s, batch_t)
    else:
        ce_s, ce_t = _domain_discriminator_step(model, state, batch_s, batch_t)
        _domain_generator_step(model, state, batch_s, batch_t)
    return L.LossBreakdown(iteration=state.m, ce_s=ce_s, ce_t=ce_t, v1=-(ce_s + ce_t))


def _class_generator_step(model, state, batch_t) -> float:
    cfg = state.cfg
    _zero(model)
    with frozen(model.params("C1", "C2", "D")):
        total = None
        for t in batch_t:
            f = model.features(t.image)
            v = L.discrepancy(model.classify("C1", f), model.classify("C2", f))
            total = v if total is None else total + v
        total = total * (1.0 / len(batch_t))
        (total * cfg.w_cls).backward()
    state.opt_g_cls.step(state.lr(cfg.lr_class))
    return total.item()


def _class_heads_step(model, state, batch_t) -> float:
    cfg = state.cfg
    _zero(model)
    with dc.no_grad():
        fs = [model.features(t.image) for t in batch_t]
    with frozen(model.params("G", "D")):
        total = None
        for f in fs:
            v = L.discrepancy(model.classify("C1", f), model.classify("C2", f))
            total = v if total is None else total + v
        total = total * (1.0 / len(batch_t))
        (-total * cfg.w_cls).backward()
    state.opt_c_cls.step(state.lr(cfg.heads_lr))
    return total.item()


def step_class_alignment(model: CaliModel, state: TrainState, batch_s, batch_t) -> L.LossBreakdown:
    """G descends the target discrepancy with heads frozen, then the heads ascend it with G frozen."""
    if state.cfg.order == "G_first":
        v2 = _class_generator_step(model, state, batch_t)
        _class_heads_step(model, state, batch_t)
    else:
        v2 = _class_heads_step(model, state, batch_t)
        _class_generator_step(model, state, batch_t)
    return L.LossBreakdown(iteration=state.m, v2=v2)


# ---------------------------------------------------------------- evaluation helpers

def discriminator_accuracy(model: CaliModel, src: Sequence[np.ndarray], tgt: Sequence[np.ndarray]) -> float:
    """Fraction of D-map cells on the correct side of 0.5, averaged over both domains."""
    hits = []
    with dc.no_grad():
        for x in src:
            hits.append(float((model.discriminate(model.features(x)).data > 0.5).mean()))
        for x in tgt:
            hits.append(float((model.discriminate(model.features(x)).data < 0.5).mean()))
    return float(np.mean(hits))


def source_miou(model: CaliModel, samples: Sequence[SegSample], k: int) -> float:
    cm = confusion(k)
    for s in samples:
        accumulate(cm, model.predict(s.image), s.label)
    return miou_star(cm)


def _mean_disc(model: CaliModel, images: Sequence[np.ndarray]) -> float:
    from .metrics import mean_target_discrepancy
    return mean_target_discrepancy(model, images)


# ---------------------------------------------------------------- loop

class _Cycler:
    """Cycle over a dataset with a fresh seeded shuffle each epoch."""

    def __init__(self, samples: Sequence[SegSample], seed: int, stream: int):
        self.samples = list(samples)
        self.seed, self.stream = seed, stream
        self.epoch = 0
        self._order: list[int] = []

    def take(self, n: int) -> list[SegSample]:
        out = []
        for _ in range(n):
            if not self._order:
                rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.stream, self.epoch]))
                self._order = list(rng.permutation(len(self.samples)))
                self.epoch += 1
            out.append(self.samples[self._order.pop(0)])
        return out


CSV_HEADER = "iter,phase,l_seg,wr,ce_s,ce_t,v2_target,src_miou"


@dataclass
class Curves:
    rows: list[dict] = field(default_factory=list)
    d_acc: list[tuple[int, float]] = field(default_factory=list)
    history: list[L.LossBreakdown] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            vals = [_fmt(r[c]) for c in ("l_seg", "wr", "ce_s", "ce_t", "v2_target", "src_miou")]
            lines.append(",".join([str(r["iter"]), r["phase"], *vals]))
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "nan"
    return f"{x:.6g}"


def _phase_name(cfg: TrainConfig, is_domain: bool, is_class: bool) -> str:
    if cfg.baseline == "SO":
        return "none"
    if cfg.baseline == "DA":
        return "domain"
    if cfg.baseline == "CA":
        return "class"
    return "domain" if is_domain else "class"


def default_model(k: int, seed: int, dtype=np.float32) -> CaliModel:
    ext = ExtractorCfg()
    return build_model(ext, ClassifierCfg(in_channels=ext.out_channels, num_classes=k,
                                          upsample=ext.total_stride), DiscriminatorCfg(), seed, dtype)


def train(cfg: TrainConfig, source: Dataset, target: Dataset, model: CaliModel | None = None,
          eval_source: Sequence[SegSample] | None = None, eval_target: Sequence[np.ndarray] | None = None,
          out_dir: str | Path | None = None, on_eval=None) -> tuple[CaliModel, Curves]:
    """Run ``cfg.max_iters`` iterations of the configured method.

    Every iteration runs the supervised step; CALI gates the domain and class steps with
    :func:`phase_flags`, DA / CA run their single alignment step every iteration, SO none.
    """
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("source and target datasets must be non-empty")
    if not source.labeled:
        raise ConfigError("source dataset must be labeled")
    model = model or default_model(source.k, cfg.seed)
    state = TrainState.create(model, cfg)
    eval_source = list(eval_source if eval_source is not None else source.samples[:8])
    eval_target = list(eval_target if eval_target is not None else [s.image for s in target.samples[:8]])
    src_iter = _Cycler(source.samples, cfg.seed, 1)
    tgt_iter = _Cycler(target.samples, cfg.seed, 2)
    curves = Curves()
    window: list[L.LossBreakdown] = []

    for m in range(1, cfg.max_iters + 1):
        state.m = m - 1  # poly schedule counts completed iterations
        if cfg.baseline == "CALI":
            state.is_domain, state.is_class = phase_flags(m, cfg.interval)
        else:
            state.is_domain, state.is_class = cfg.baseline == "DA", cfg.baseline == "CA"
        bs = src_iter.take(cfg.batch_size)
        bt = tgt_iter.take(cfg.batch_size)
        rec = step_supervised(model, state, bs)
        if state.is_domain:
            rec.update(step_domain_alignment(model, state, bs, bt))
        elif state.is_class:
            rec.update(step_class_alignment(model, state, bs, bt))
        rec.iteration = m
        curves.history.append(rec)
        window.append(rec)

        if m % cfg.eval_every == 0 or m == cfg.max_iters:
            row = {"iter": m, "phase": _phase_name(cfg, state.is_domain, state.is_class)}
            for name in ("l_seg", "wr", "ce_s", "ce_t"):
                vals = [getattr(r, name) for r in window if not np.isnan(getattr(r, name))]
                row[name] = float(np.mean(vals)) if vals else float("nan")
            row["v2_target"] = _mean_disc(model, eval_target)
            row["src_miou"] = source_miou(model, eval_source, source.k)
            curves.rows.append(row)
            if cfg.baseline in ("DA", "CALI"):
                curves.d_acc.append((m, discriminator_accuracy(model, [s.image for s in eval_source], eval_target)))
            window = []
            log.debug("iter %d %s", m, row)
            if on_eval is not None:
                on_eval(m, model, curves)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves.csv").write_text(curves.to_csv(), encoding="utf-8")
        model.save(out / "model.ctp")
    return model, curves

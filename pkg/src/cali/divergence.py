"""Empirical H-divergence and HΔH-distance estimators, exact and neural, plus the bound comparison probe.

Binary hypotheses follow the convention eta(x) = 1 for "drawn from the source domain".
Oracle-mode quantities are computed with integer counts so that comparisons are exact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Adam, ConfigError, Tensor, UsageError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- hypotheses

@dataclass(frozen=True)
class Stump:
    """eta(x) = [x_dim < threshold] when polarity is 1, its complement when polarity is 0."""
    dim: int
    threshold: float
    polarity: int = 1

    def __call__(self, x: np.ndarray) -> np.ndarray:
        below = np.asarray(x, dtype=np.float64)[:, self.dim] < self.threshold
        return below if self.polarity == 1 else ~below

    def complement(self) -> "Stump":
        return Stump(self.dim, self.threshold, 1 - self.polarity)


@dataclass(frozen=True)
class Constant:
    value: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.full(len(x), bool(self.value))

    def complement(self) -> "Constant":
        return Constant(1 - self.value)


@dataclass(frozen=True)
class Xor:
    a: Callable
    b: Callable

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.a(x) ^ self.b(x)


@dataclass(frozen=True)
class Complement:
    h: Callable

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ~self.h(x)


def _complement(h):
    return h.complement() if hasattr(h, "complement") else Complement(h)


@dataclass(frozen=True)
class FiniteHypothesisClass:
    hypotheses: tuple
    symmetric: bool = True

    def __post_init__(self):
        if len(self.hypotheses) == 0:
            raise ConfigError("hypothesis class is empty")
        if self.symmetric:
            closed = list(self.hypotheses)
            for h in self.hypotheses:
                c = _complement(h)
                if c not in closed:
                    closed.append(c)
            object.__setattr__(self, "hypotheses", tuple(closed))

    @classmethod
    def stumps(cls, dims: Sequence[int], grid: Sequence[float], symmetric: bool = True,
               constants: bool = False) -> "FiniteHypothesisClass":
        hs: list = [Stump(d, float(t), 1) for d in dims for t in grid]
        if constants:
            hs.append(Constant(1))
        return cls(tuple(hs), symmetric)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def predictions(self, x: np.ndarray) -> np.ndarray:
        """(n_hypotheses, n_points) boolean table."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([np.asarray(h(x), dtype=bool) for h in self.hypotheses])

    def is_closed_under_complement(self, x: np.ndarray) -> bool:
        table = self.predictions(x)
        rows = {r.tobytes() for r in table}
        return all((~r).tobytes() in rows for r in table)

    def xor_class(self) -> "FiniteHypothesisClass":
        """HΔH: every pairwise XOR (ordered pairs collapse, h ^ h is the constant 0)."""
        hs = self.hypotheses
        pairs = [Xor(hs[i], hs[j]) for i in range(len(hs)) for j in range(i, len(hs))]
        return FiniteHypothesisClass(tuple(pairs), symmetric=False)


@dataclass(frozen=True)
class DivergenceEstimate:
    value: float
    raw: float
    mode: str
    m_s: int
    m_t: int
    heldout_error: float = float("nan")      # the minimised bracket (oracle) or held-out bracket (neural)
    numerator: int | None = None            # exact value * m_s * m_t / 2 in oracle mode
    witness: object = field(default=None, compare=False, repr=False)


def _check_samples(us, ut) -> tuple[np.ndarray, np.ndarray]:
    us = np.atleast_2d(np.asarray(us, dtype=np.float64))
    ut = np.atleast_2d(np.asarray(ut, dtype=np.float64))
    if len(us) == 0 or len(ut) == 0:
        raise UsageError("divergence needs non-empty source and target samples")
    if us.shape[1:] != ut.shape[1:]:
        raise UsageError(f"feature shapes differ: {us.shape[1:]} vs {ut.shape[1:]}")
    return us, ut


def _clamped(raw: float, what: str) -> float:
    if raw < 0.0 or raw > 2.0:
        log.debug("%s raw estimate %.6g clamped to [0, 2]", what, raw)
    return float(min(max(raw, 0.0), 2.0))


def h_divergence_oracle(us, ut, hclass: FiniteHypothesisClass) -> DivergenceEstimate:
    """2 (1 - min over eta of [frac of source with eta=0 + frac of target with eta=1]), by enumeration."""
    us, ut = _check_samples(us, ut)
    if not hclass.symmetric and not hclass.is_closed_under_complement(np.concatenate([us, ut])):
        raise ConfigError("the empirical estimator requires a class closed under complement")
    ms, mt = len(us), len(ut)
    src0 = (~hclass.predictions(us)).sum(axis=1).astype(np.int64)
    tgt1 = hclass.predictions(ut).sum(axis=1).astype(np.int64)
    bracket_num = src0 * mt + tgt1 * ms          # bracket * ms * mt
    best = int(np.argmin(bracket_num))
    num = ms * mt - int(bracket_num[best])       # d / 2 * ms * mt
    raw = 2.0 * num / (ms * mt)
    return DivergenceEstimate(_clamped(raw, "h-divergence"), raw, "oracle", ms, mt,
                              bracket_num[best] / (ms * mt), num, hclass.hypotheses[best])


def _disagreement_counts(pairs_s: np.ndarray, pairs_t: np.ndarray, ms: int, mt: int) -> np.ndarray:
    return np.abs(pairs_s.sum(axis=1).astype(np.int64) * mt - pairs_t.sum(axis=1).astype(np.int64) * ms)


def hdh_divergence_oracle(us, ut, hclass: FiniteHypothesisClass) -> DivergenceEstimate:
    """Exact sup over pairs (h, h') of 2 |P_S[h != h'] - P_T[h != h']|."""
    us, ut = _check_samples(us, ut)
    ms, mt = len(us), len(ut)
    ps, pt = hclass.predictions(us), hclass.predictions(ut)
    i, j = np.triu_indices(len(hclass))
    diff = _disagreement_counts(ps[i] ^ ps[j], pt[i] ^ pt[j], ms, mt)
    best = int(np.argmax(diff))
    num = int(diff[best])
    raw = 2.0 * num / (ms * mt)
    witness = (hclass.hypotheses[i[best]], hclass.hypotheses[j[best]])
    return DivergenceEstimate(_clamped(raw, "hdh"), raw, "oracle", ms, mt, numerator=num, witness=witness)


def hdh_divergence_pair(src_a: np.ndarray, src_b: np.ndarray, tgt_a: np.ndarray,
                        tgt_b: np.ndarray, k: int | None = None) -> DivergenceEstimate:
    """2 |disagree_S - disagree_T| for one given pair of label maps (a lower bound on the sup)."""
    src_a, src_b, tgt_a, tgt_b = (np.asarray(a) for a in (src_a, src_b, tgt_a, tgt_b))
    if src_a.shape != src_b.shape or tgt_a.shape != tgt_b.shape:
        raise UsageError("paired predictions must have matching shapes")
    if src_a.size == 0 or tgt_a.size == 0:
        raise UsageError("divergence needs non-empty source and target samples")
    if k is not None:
        top = max(int(a.max()) for a in (src_a, src_b, tgt_a, tgt_b))
        if top >= k:
            raise UsageError(f"prediction label {top} outside the {k}-class range")
    ds = float(np.mean(src_a != src_b))
    dt = float(np.mean(tgt_a != tgt_b))
    raw = 2.0 * abs(ds - dt)
    return DivergenceEstimate(_clamped(raw, "hdh"), raw, "neural", src_a.size, tgt_a.size)


def head_predictions(model, images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax of each head, stacked over images."""
    a, b = [], []
    with dc.no_grad():
        for img in images:
            f = model.features(img)
            a.append(np.argmax(model.classify("C1", f).data, axis=0))
            b.append(np.argmax(model.classify("C2", f).data, axis=0))
    return np.stack(a), np.stack(b)


def hdh_divergence(us, ut, pair) -> DivergenceEstimate:
    """Oracle mode when ``pair`` is a FiniteHypothesisClass; otherwise a trained model's two heads.

    In model mode ``us`` and ``ut`` are image sequences.
    """
    if isinstance(pair, FiniteHypothesisClass):
        return hdh_divergence_oracle(us, ut, pair)
    k_a = pair.C1["C1.out.weight"].shape[0]
    k_b = pair.C2["C2.out.weight"].shape[0]
    if k_a != k_b:
        raise UsageError(f"heads disagree on class count: {k_a} vs {k_b}")
    sa, sb = head_predictions(pair, us)
    ta, tb = head_predictions(pair, ut)
    return hdh_divergence_pair(sa, sb, ta, tb, k_a)


# ---------------------------------------------------------------- neural estimator

@dataclass(frozen=True)
class NeuralDiscCfg:
    """Domain classifier over pooled feature vectors: stacked 1x1 convs, leaky 0.2, sigmoid."""
    hidden: tuple[int, ...] = (32, 32)
    slope: float = 0.2
    lr: float = 1e-2
    epochs: int = 40               # short full-batch training acts as early stopping
    heldout: float = 0.5
    seed: int = 0


def _pooled_layout(x: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(x.T[:, :, None]))          # (C, N, 1)


def _disc_forward(params: list[Tensor], x: Tensor, slope: float) -> Tensor:
    h = x
    n = len(params) // 2
    for i in range(n):
        h = dc.conv2d(h, params[2 * i], params[2 * i + 1])
        if i < n - 1:
            h = dc.leaky_relu(h, slope)
    return dc.sigmoid(h)


def _split(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(n)
    cut = int(round(n * (1.0 - frac)))
    if cut < 1 or cut >= n:
        raise UsageError(f"need at least one train and one held-out sample per domain, got n={n}")
    return idx[:cut], idx[cut:]


def train_domain_classifier(xs: np.ndarray, xt: np.ndarray, cfg: NeuralDiscCfg):
    """Fit on the given rows; returns a predictor mapping features to P(source)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31]))
    mu = np.concatenate([xs, xt]).mean(axis=0)
    sd = np.concatenate([xs, xt]).std(axis=0) + 1e-6
    widths = (xs.shape[1],) + tuple(cfg.hidden) + (1,)
    params: list[Tensor] = []
    for i in range(len(widths) - 1):
        w, b = dc.init_conv(rng, widths[i + 1], widths[i], 1, f"dom{i}", dtype=np.float64)
        params += [w, b]
    opt = Adam(params, cfg.lr)
    x = _pooled_layout((np.concatenate([xs, xt]) - mu) / sd)
    y = np.concatenate([np.ones(len(xs)), np.zeros(len(xt))])[None, :, None]
    wts = np.concatenate([np.full(len(xs), 0.5 / len(xs)), np.full(len(xt), 0.5 / len(xt))])[None, :, None]
    for _ in range(cfg.epochs):
        opt.zero_grad()
        p = _disc_forward(params, x, cfg.slope)
        ll = y * dc.log_clamped(p) + (1.0 - y) * dc.log_clamped(1.0 - p)
        loss = -(ll * wts).sum()
        if not np.isfinite(loss.item()):
            raise FloatingPointError("domain classifier loss became non-finite")
        loss.backward()
        opt.step()

    def predict(z: np.ndarray) -> np.ndarray:
        with dc.no_grad():
            out = _disc_forward(params, _pooled_layout((np.asarray(z, dtype=np.float64) - mu) / sd), cfg.slope)
        return out.data[0, :, 0]

    return predict


def h_divergence_neural(us, ut, cfg: NeuralDiscCfg | None = None) -> DivergenceEstimate:
    """Train on one half of each domain, evaluate the bracket on the other half."""
    cfg = cfg or NeuralDiscCfg()
    us, ut = _check_samples(us, ut)
    us, ut = us.reshape(len(us), -1), ut.reshape(len(ut), -1)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    tr_s, ho_s = _split(len(us), cfg.heldout, rng)
    tr_t, ho_t = _split(len(ut), cfg.heldout, rng)
    predict = train_domain_classifier(us[tr_s], ut[tr_t], cfg)
    eta_s = predict(us[ho_s]) >= 0.5
    eta_t = predict(ut[ho_t]) >= 0.5
    bracket = float(np.mean(~eta_s) + np.mean(eta_t))
    raw = 2.0 * (1.0 - bracket)
    return DivergenceEstimate(_clamped(raw, "h-divergence"), raw, "neural", len(ho_s), len(ho_t), bracket)


def pooled_features(model, images: Sequence[np.ndarray]) -> np.ndarray:
    """Spatial mean of the extractor output, one row per image."""
    with dc.no_grad():
        return np.stack([model.features(img).data.mean(axis=(1, 2)) for img in images]).astype(np.float64)


# ---------------------------------------------------------------- bound probe

@dataclass
class BoundReport:
    mode: str
    eps_s: float
    half_d_h: float
    half_d_hdh: float
    holds: bool
    lambda_note: str = "omitted (needs target labels; identical in both bounds)"

    @property
    def ub1_part(self) -> float:
        return self.eps_s + self.half_d_h

    @property
    def ub2_part(self) -> float:
        return self.eps_s + self.half_d_hdh

    FIELDS = ("mode", "eps_s", "half_d_h", "half_d_hdh", "ub1_part", "ub2_part", "holds", "lambda")

    def _values(self) -> list[str]:
        return [self.mode, f"{self.eps_s:.6g}", f"{self.half_d_h:.6g}", f"{self.half_d_hdh:.6g}",
                f"{self.ub1_part:.6g}", f"{self.ub2_part:.6g}", str(int(self.holds)), self.lambda_note]

    def to_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in zip(self.FIELDS, self._values()))

    def csv_header(self) -> str:
        return ",".join(self.FIELDS) + "\n"

    def to_csv_row(self) -> str:
        vals = self._values()
        vals[-1] = "omitted"
        return ",".join(vals) + "\n"


def closure_domain_class(hclass: FiniteHypothesisClass, extra: Sequence = ()) -> FiniteHypothesisClass:
    """A symmetric domain-classifier class built to contain every XOR of ``hclass``."""
    xs = hclass.xor_class().hypotheses
    return FiniteHypothesisClass(tuple(xs) + tuple(extra), symmetric=True)


def verify_containment(inner: FiniteHypothesisClass, outer: FiniteHypothesisClass, x: np.ndarray) -> bool:
    """Every hypothesis of ``inner`` has an extensionally identical member of ``outer`` on ``x``."""
    rows = {r.tobytes() for r in outer.predictions(x)}
    return all(r.tobytes() in rows for r in inner.predictions(x))


def bound_probe_oracle(xs: np.ndarray, ys: np.ndarray, xt: np.ndarray, hclass: FiniteHypothesisClass,
                       domain_class: FiniteHypothesisClass | None = None, h=None) -> BoundReport:
    """Compare eps_S + d_HΔH / 2 against eps_S + d_{H_D} / 2 exactly.

    ``h`` defaults to the source empirical risk minimiser within ``hclass``.
    """
    xs, xt = _check_samples(xs, xt)
    ys = np.asarray(ys).astype(bool)
    if ys.shape != (len(xs),):
        raise UsageError("source labels must be one per source sample")
    domain_class = domain_class or closure_domain_class(hclass)
    both = np.concatenate([xs, xt])
    if not verify_containment(hclass.xor_class(), domain_class, both):
        raise ConfigError("HΔH is not contained in the domain-classifier class")
    if h is None:
        errs = (hclass.predictions(xs) != ys[None, :]).sum(axis=1)
        h = hclass.hypotheses[int(np.argmin(errs))]
    eps_s = float(np.mean(np.asarray(h(xs)) != ys))
    dh = h_divergence_oracle(xs, xt, domain_class)
    dhdh = hdh_divergence_oracle(xs, xt, hclass)
    holds = dhdh.numerator <= dh.numerator
    if not holds:
        raise AssertionError(f"HΔH estimate {dhdh.value} exceeds H_D estimate {dh.value}")
    return BoundReport("oracle", eps_s, dh.value / 2, dhdh.value / 2, holds)


def bound_probe_neural(model, src_images: Sequence[np.ndarray], src_labels: Sequence[np.ndarray],
                       tgt_images: Sequence[np.ndarray], cfg: NeuralDiscCfg | None = None,
                       tol: float = 0.05) -> BoundReport:
    """Neural halves: trained domain classifier on pooled features vs the model's head pair."""
    if len(src_images) != len(src_labels):
        raise UsageError("one label map per source image is required")
    fs, ft = pooled_features(model, src_images), pooled_features(model, tgt_images)
    dh = h_divergence_neural(fs, ft, cfg)
    dhdh = hdh_divergence(src_images, tgt_images, model)
    wrong = total = 0
    for img, lab in zip(src_images, src_labels):
        pred = model.predict(img)
        wrong += int(np.sum(pred != lab))
        total += lab.size
    eps_s = wrong / total
    rep = BoundReport("neural", eps_s, dh.value / 2, dhdh.value / 2, False)
    rep.holds = rep.ub2_part <= rep.ub1_part + tol
    return rep


def random_instance(rng: np.random.Generator, n_s: int | None = None, n_t: int | None = None):
    """A small randomized finite problem: 1-2 D points, a labelled source, a stump class."""
    d = int(rng.integers(1, 3))
    n_s = n_s or int(rng.integers(3, 12))
    n_t = n_t or int(rng.integers(3, 12))
    shift = rng.uniform(-1.0, 1.0, size=d)
    xs = rng.uniform(0.0, 1.0, size=(n_s, d))
    xt = rng.uniform(0.0, 1.0, size=(n_t, d)) * rng.uniform(0.3, 1.0) + shift * rng.uniform(0, 1)
    ys = rng.random(n_s) < 0.5
    grid = np.sort(rng.uniform(-0.5, 1.5, size=int(rng.integers(2, 5))))
    hclass = FiniteHypothesisClass.stumps(range(d), grid)
    return xs, ys, xt, hclass


def run_oracle_trials(n: int, seed: int = 0) -> tuple[int, int]:
    """Run ``n`` randomized instances; returns (checked, violations)."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        xs, ys, xt, hc = random_instance(rng)
        try:
            bound_probe_oracle(xs, ys, xt, hc)
        except AssertionError:
            bad += 1
    return n, bad

"""Training, cross-validation and metrics."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import SingleClass, TooFewRecordings
from .model import Model, ModelConfig, build_model
from .preprocess import FusedWindow, stack
from .stream import recording_decision, window_probabilities

log = logging.getLogger(__name__)


def sub_seed(seed: int, *names) -> int:
    """Deterministic child seed for a named consumer of randomness."""
    key = zlib.crc32("/".join(map(str, names)).encode())
    return int(np.random.SeedSequence([seed, key]).generate_state(1)[0])


@dataclass(frozen=True)
class AffineInit:
    scale_ecg: float = 1.0
    shift_ecg: float = 0.0
    scale_pcg: float = 1.0
    shift_pcg: float = 0.0

    def apply(self, model: Model):
        a = model.affine
        dt = a.params["scale"].dtype
        a.params["scale"] = np.array([self.scale_ecg, self.scale_pcg], dtype=dt)
        a.params["shift"] = np.array([self.shift_ecg, self.shift_pcg], dtype=dt)


DEFAULT_AFFINE_GRID = tuple(
    AffineInit(se, 0.0, sp, 0.0) for se, sp in itertools.product((0.5, 1.0, 2.0, 4.0), repeat=2)
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    affine_grid: tuple[AffineInit, ...] | None = DEFAULT_AFFINE_GRID
    grid_budget: int = 10
    qat_epochs: int = 0
    qat_lr: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("invalid training configuration")

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "affine_grid":
                v = "none" if v is None else ";".join(
                    f"{g.scale_ecg},{g.shift_ecg},{g.scale_pcg},{g.shift_pcg}" for g in v
                )
            out.append(f"{f.name}={v}\n")
        return "".join(out)

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> TrainConfig:
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in kv.items():
            if k not in types:
                raise ValueError(f"unknown training option {k!r}")
            if k == "affine_grid":
                kw[k] = None if v == "none" else tuple(
                    AffineInit(*map(float, item.split(","))) for item in v.split(";") if item
                )
            elif types[k] == "int":
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


# ------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, cfg: TrainConfig, lr: float | None = None):
        self.lr = cfg.lr if lr is None else lr
        self.b1, self.b2, self.eps, self.wd = cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.state.setdefault(name, {"t": 0, "m": np.zeros_like(p), "v": np.zeros_like(p)})
            adamw_step(p, g, st, self.lr, self.b1, self.b2, self.eps, self.wd)

    def step_model(self, model: Model):
        params = {n: layer.params[k] for n, layer, k in model.parameters()}
        grads = {n: layer.grads.get(k) for n, layer, k in model.parameters()}
        self.step(params, grads)


def adamw_step(p, g, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
    """In-place AdamW update of ``p``; ``state`` holds t, m, v."""
    state["t"] += 1
    t = state["t"]
    p *= 1 - lr * weight_decay
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return p


# --------------------------------------------------------------- sampling

def sampler_weights(labels) -> np.ndarray:
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise SingleClass("weighted sampling needs both classes")
    per_class = dict(zip(classes.tolist(), (1.0 / counts).tolist()))
    w = np.array([per_class[c] for c in labels.tolist()])
    return w / w.sum()


def weighted_sampler(labels, seed: int, chunk: int = 4096):
    """Endless stream of indices drawn with replacement, P(i) proportional to 1/count(class(i))."""
    p = sampler_weights(labels)
    rng = np.random.default_rng(seed)
    n = len(p)
    while True:
        yield from rng.choice(n, size=chunk, p=p).tolist()


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: Model
    loss_history: list[float] = field(default_factory=list)


def _xy(windows):
    if isinstance(windows, tuple):
        return windows
    return stack(windows)


def train_model(windows, cfg: TrainConfig, model: Model, *, epochs: int | None = None,
                lr: float | None = None, seed: int | None = None) -> TrainResult:
    """Train ``model`` in place on ``windows`` (FusedWindows or an (x, y) pair)."""
    x, y = _xy(windows)
    epochs = cfg.epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    history = []
    if epochs == 0 or len(x) == 0:
        return TrainResult(model, history)
    x = model._prepare(x)
    opt = AdamW(cfg, lr)
    draws = weighted_sampler(y, sub_seed(seed, "sampler"))
    steps = math.ceil(len(x) / cfg.batch_size)
    model.train()
    try:
        for _ in range(epochs):
            total = 0.0
            for _ in range(steps):
                idx = np.fromiter(itertools.islice(draws, cfg.batch_size), dtype=np.int64)
                logits = model.net.forward(x[idx], True)
                loss, dlogits = nn.cross_entropy(logits, y[idx])
                model.zero_grad()
                model.net.backward(dlogits.astype(logits.dtype))
                opt.step_model(model)
                total += loss
            history.append(total / steps)
    finally:
        model.eval()
    return TrainResult(model, history)


def window_accuracy(model, x, y) -> float:
    p = predict(model, x)
    return float((p.argmax(axis=1) == y).mean())


def predict(model, x) -> np.ndarray:
    return window_probabilities(model, x)


def _split_by_record(windows, frac, seed):
    """Stratified split of recordings into (train, held-out) window lists."""
    by_rec: dict[str, list[FusedWindow]] = {}
    for w in windows:
        by_rec.setdefault(w.record_id, []).append(w)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for label in (0, 1):
        ids = sorted(r for r, ws in by_rec.items() if int(ws[0].label) == label)
        rng.shuffle(ids)
        n_held = max(1, int(round(len(ids) * frac))) if len(ids) > 1 else 0
        for i, r in enumerate(ids):
            (held if i < n_held else train).extend(by_rec[r])
    return train, held


def grid_search_affine_init(windows, grid=DEFAULT_AFFINE_GRID, budget: int = 10, *,
                            cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
                            seed: int = 0, holdout: float = 0.25) -> AffineInit:
    """Pick the affine initialisation with the best held-out window accuracy after a short probe run.

    Ties go to the earliest grid point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    if len(grid) == 1:
        return grid[0]
    inner_train, inner_val = _split_by_record(windows, holdout, sub_seed(seed, "grid-split"))
    xt, yt = stack(inner_train)
    xv, yv = stack(inner_val)
    best, best_acc = grid[0], -1.0
    for point in grid:
        model = build_model(model_cfg, sub_seed(seed, "grid-model"))
        point.apply(model)
        train_model((xt, yt), cfg, model, epochs=budget, seed=sub_seed(seed, "grid-train"))
        acc = window_accuracy(model, xv, yv)
        log.debug("affine grid %s -> %.4f", point, acc)
        if acc > best_acc:
            best, best_acc = point, acc
    return best


def fit(windows, cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(), seed: int | None = None):
    """Full protocol on one training set: affine grid search, float training, optional QAT.

    Returns (float_model, quant_model or None, loss history).
    """
    from .quant import calibrate_activations, prepare_qat, quantize_model

    seed = cfg.seed if seed is None else seed
    model = build_model(model_cfg, sub_seed(seed, "init"))
    if cfg.affine_grid:
        init = grid_search_affine_init(windows, cfg.affine_grid, cfg.grid_budget, cfg=cfg,
                                       model_cfg=model_cfg, seed=sub_seed(seed, "grid"))
        init.apply(model)
    x, y = stack(windows)
    result = train_model((x, y), cfg, model, seed=sub_seed(seed, "train"))
    qm = None
    if cfg.qat_epochs > 0:
        qat = prepare_qat(model)
        calibrate_activations(qat, x)
        train_model((x, y), cfg, qat, epochs=cfg.qat_epochs, lr=cfg.qat_lr, seed=sub_seed(seed, "qat"))
        qm = quantize_model(qat)
    return model, qm, result.loss_history


# ----------------------------------------------------------------- metrics

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "precision", "f1", "auc")


@dataclass
class Metrics:
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    precision: float | None = None
    f1: float | None = None
    auc: float | None = None

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _ratio(a, b):
    return a / b if b else None


def compute_metrics(tp: int, fp: int, tn: int, fn: int) -> Metrics:
    """Abnormal is the positive class. Zero denominators give ``None``."""
    return Metrics(
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        precision=_ratio(tp, tp + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
    )


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_abnormal > score_normal) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr) points sweeping the threshold over every distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    last_of_run = np.r_[np.diff(s) != 0, True]
    tps = np.cumsum(l)[last_of_run]
    fps = np.cumsum(~l)[last_of_run]
    tpr = np.r_[0, tps] / max(labels.sum(), 1)
    fpr = np.r_[0, fps] / max((~labels).sum(), 1)
    return fpr, tpr


def roc_auc_trapezoid(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


# --------------------------------------------------------- cross validation

@dataclass
class FoldPlan:
    k: int
    assignments: list[dict[str, int]]

    @property
    def repeats(self):
        return len(self.assignments)

    def to_text(self) -> str:
        lines = [f"# k={self.k} repeats={self.repeats}", "repeat,record_id,fold"]
        for r, a in enumerate(self.assignments):
            lines += [f"{r},{rid},{f}" for rid, f in sorted(a.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> FoldPlan:
        k = None
        rows: dict[int, dict[str, int]] = {}
        for ln in text.splitlines():
            ln = ln.strip()
            if ln.startswith("# k="):
                k = int(ln.split()[1].split("=")[1])
                continue
            if not ln or ln.startswith("#") or ln.startswith("repeat,"):
                continue
            r, rid, f = ln.split(",")
            rows.setdefault(int(r), {})[rid] = int(f)
        if k is None:
            k = max(f for a in rows.values() for f in a.values()) + 1
        return cls(k, [rows[r] for r in sorted(rows)])


def make_fold_plan(record_labels: dict[str, int], k: int = 5, repeats: int = 10, seed: int = 0) -> FoldPlan:
    """Label-stratified recording-level folds, reshuffled for every repeat."""
    labels = {rid: int(v) for rid, v in record_labels.items()}
    for c in (0, 1):
        n = sum(1 for v in labels.values() if v == c)
        if n < k:
            raise TooFewRecordings(f"class {c} has {n} recordings, need at least k={k}")
    assignments = []
    for r in range(repeats):
        rng = np.random.default_rng(sub_seed(seed, "folds", r))
        a = {}
        offset = 0
        for c in (0, 1):
            ids = sorted(rid for rid, v in labels.items() if v == c)
            rng.shuffle(ids)
            for i, rid in enumerate(ids):
                # continue the round-robin across classes so fold sizes stay even
                a[rid] = (offset + i) % k
            offset += len(ids)
        assignments.append(a)
    return FoldPlan(k, assignments)


@dataclass
class RunResult:
    repeat: int
    fold: int
    metrics: Metrics
    n_train_windows: int
    n_test_records: int


@dataclass
class MetricsReport:
    runs: list[RunResult] = field(default_factory=list)
    name: str = "float"

    def values(self, metric):
        return [getattr(r.metrics, metric) for r in self.runs if getattr(r.metrics, metric) is not None]

    def mean(self, metric):
        v = self.values(metric)
        return float(np.mean(v)) if v else None

    def std(self, metric):
        v = self.values(metric)
        return float(np.std(v)) if v else None

    def summary(self) -> dict[str, tuple[float | None, float | None]]:
        return {m: (self.mean(m), self.std(m)) for m in METRIC_NAMES}

    def to_csv(self) -> str:
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "repeat", "fold", *METRIC_NAMES, "n_train_windows", "n_test_records"])
        for i, r in enumerate(sorted(self.runs, key=lambda r: (r.repeat, r.fold))):
            w.writerow([i, r.repeat, r.fold, *(fmt(getattr(r.metrics, m)) for m in METRIC_NAMES),
                        r.n_train_windows, r.n_test_records])
        s = self.summary()
        w.writerow(["mean", "", "", *(fmt(s[m][0]) for m in METRIC_NAMES), "", ""])
        w.writerow(["std", "", "", *(fmt(s[m][1]) for m in METRIC_NAMES), "", ""])
        return buf.getvalue()

    def to_kv(self) -> str:
        lines = [f"model={self.name}", f"runs={len(self.runs)}"]
        for m, (mu, sd) in self.summary().items():
            lines.append(f"{m}_mean={'' if mu is None else f'{mu:.6f}'}")
            lines.append(f"{m}_std={'' if sd is None else f'{sd:.6f}'}")
        return "\n".join(lines) + "\n"

    def table_row(self) -> str:
        """One line in the results-table layout: mean +- std per metric."""
        cells = []
        for m in METRIC_NAMES:
            mu, sd = self.summary()[m]
            cells.append("-" if mu is None else f"{mu:.4f} +- {sd:.4f}")
        return f"{self.name}: " + " | ".join(f"{m} {c}" for m, c in zip(METRIC_NAMES, cells))


def evaluate_records(model, windows) -> tuple[Metrics, dict[str, int]]:
    """Recording-level metrics: majority-vote decisions, AUC on mean abnormal probability."""
    by_rec: dict[str, list[FusedWindow]] = {}
    for w in windows:
        by_rec.setdefault(w.record_id, []).append(w)
    ids = sorted(by_rec)
    labels, decisions, scores = [], [], []
    for rid in ids:
        ws = by_rec[rid]
        p = predict(model, np.stack([w.values for w in ws]))
        labels.append(int(ws[0].label))
        decisions.append(int(recording_decision(p)))
        scores.append(float(p[:, 1].mean()))
    labels, decisions = np.array(labels), np.array(decisions)
    m = compute_metrics(
        tp=int(((decisions == 1) & (labels == 1)).sum()),
        fp=int(((decisions == 1) & (labels == 0)).sum()),
        tn=int(((decisions == 0) & (labels == 0)).sum()),
        fn=int(((decisions == 0) & (labels == 1)).sum()),
    )
    if 0 < labels.sum() < len(labels):
        m.auc = roc_auc(scores, labels)
    return m, dict(zip(ids, decisions.tolist()))


def record_labels(windows) -> dict[str, int]:
    out = {}
    for w in windows:
        out.setdefault(w.record_id, int(w.label))
    return out


def cross_validate(windows: list[FusedWindow], plan: FoldPlan, cfg: TrainConfig,
                   model_cfg: ModelConfig = ModelConfig()) -> MetricsReport:
    """Repeated k-fold CV at the recording level.

    With ``cfg.qat_epochs > 0`` the returned report carries the int8 results in
    ``report.quantized`` alongside the float results.
    """
    labels = record_labels(windows)
    if len(labels) < plan.k:
        raise TooFewRecordings(f"{len(labels)} recordings for {plan.k} folds")
    report = MetricsReport(name="float")
    qreport = MetricsReport(name="int8") if cfg.qat_epochs > 0 else None
    for r, assign in enumerate(plan.assignments):
        missing = set(labels) - set(assign)
        if missing:
            raise TooFewRecordings(f"fold plan lacks {sorted(missing)[:3]}")
        for f in range(plan.k):
            train = [w for w in windows if assign[w.record_id] != f]
            test = [w for w in windows if assign[w.record_id] == f]
            train_ids = {w.record_id for w in train}
            test_ids = {w.record_id for w in test}
            assert not train_ids & test_ids, "recording-level leakage"
            if not test:
                continue
            model, qm, _ = fit(train, cfg, model_cfg, seed=sub_seed(cfg.seed, "run", r, f))
            m, _ = evaluate_records(model, test)
            report.runs.append(RunResult(r, f, m, len(train), len(test_ids)))
            if qm is not None:
                qm_metrics, _ = evaluate_records(qm, test)
                qreport.runs.append(RunResult(r, f, qm_metrics, len(train), len(test_ids)))
            log.info("repeat %d fold %d accuracy %s", r, f, m.accuracy)
    report.quantized = qreport
    return report

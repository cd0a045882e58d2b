"""Synthetic event-encoded sequence task, training loop and evaluation.

Two classes of binary series differ only in their run-length distribution
(geometric, mean 3 vs mean 6). Each series is run-length encoded into
``(value, duration)`` events; the classifier sees one token per event with
the event duration as its elapsed time.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from nac import checkpoint
from nac import tensor as T
from nac.attention import NACConfig, NACLayer
from nac.tensor import NonFiniteError, Tape, Tensor, no_grad

MEAN_RUNS = (3.0, 6.0)
N_FEATURES = 2


class TrainingDiverged(RuntimeError):
    pass


# ---- events ---------------------------------------------------------------

def encode_events(series) -> list[tuple[int, int]]:
    series = [int(v) for v in series]
    if not series:
        return []
    events = []
    cur, dur = series[0], 0
    for v in series:
        if v not in (0, 1):
            raise ValueError(f"series must be binary, got value {v}")
        if v == cur:
            dur += 1
        else:
            events.append((cur, dur))
            cur, dur = v, 1
    events.append((cur, dur))
    return events


def decode_events(events) -> list[int]:
    out = []
    for v, dur in events:
        out.extend([int(v)] * int(dur))
    return out


@dataclass
class EventSequence:
    events: list
    label: int

    def __post_init__(self):
        self.events = [(int(v), int(d)) for v, d in self.events]
        for (v0, _), (v1, _) in zip(self.events, self.events[1:]):
            if v0 == v1:
                raise ValueError("consecutive events must alternate in value")
        if any(d < 1 for _, d in self.events):
            raise ValueError("event durations must be positive")

    def __len__(self):
        return len(self.events)

    @property
    def durations(self) -> np.ndarray:
        return np.array([d for _, d in self.events], dtype=np.float64)

    @property
    def timestamps(self) -> np.ndarray:
        return np.cumsum(self.durations)

    @property
    def total_length(self) -> int:
        return int(self.durations.sum())

    def features(self) -> np.ndarray:
        v = np.array([v for v, _ in self.events], dtype=np.float64)
        return np.stack([2.0 * v - 1.0, np.log(self.durations)], axis=-1)

    def to_json(self) -> str:
        return json.dumps({"events": [list(e) for e in self.events], "label": self.label})


@dataclass
class Dataset:
    train: list
    test: list

    def all(self) -> list:
        return self.train + self.test


def _geometric_series(rng, length: int, mean_run: float) -> list[int]:
    p = 1.0 / mean_run
    out, v = [], int(rng.integers(2))
    while len(out) < length:
        out.extend([v] * int(rng.geometric(p)))
        v = 1 - v
    return out[:length]


def gen_event_task(n_sequences: int, base_length: int = 128, seed: int = 0, test_fraction: float = 0.1) -> Dataset:
    if base_length < 16:
        raise ValueError(f"base_length must be >= 16, got {base_length}")
    if n_sequences < 2:
        raise ValueError(f"need at least 2 sequences, got {n_sequences}")
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n_sequences):
        label = i % 2
        series = _geometric_series(rng, base_length, MEAN_RUNS[label])
        seqs.append(EventSequence(encode_events(series), label))
    order = rng.permutation(n_sequences)
    n_test = max(1, int(round(test_fraction * n_sequences)))
    test = [seqs[i] for i in order[:n_test]]
    train = [seqs[i] for i in order[n_test:]]
    return Dataset(train, test)


def save_jsonl(path, seqs) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(s.to_json() + "\n")


def load_jsonl(path) -> list[EventSequence]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                out.append(EventSequence([tuple(e) for e in doc["events"]], int(doc["label"])))
    return out


# ---- model ----------------------------------------------------------------

class EventClassifier:
    """Input dense -> NAC -> mean pool over events -> dense -> class logits."""

    def __init__(self, config: NACConfig, n_classes: int = 2, seed: int = 0):
        self.config = config
        self.layer = NACLayer(config)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
        d = config.d_model
        self.w_in = Tensor(rng.uniform(-1, 1, (N_FEATURES, d)) / math.sqrt(N_FEATURES), True, "in.W")
        self.b_in = Tensor(np.zeros(d), True, "in.b")
        self.w_out = Tensor(rng.uniform(-1, 1, (d, n_classes)) / math.sqrt(d), True, "out.W")
        self.b_out = Tensor(np.zeros(n_classes), True, "out.b")

    def named_parameters(self):
        return ([("in.W", self.w_in), ("in.b", self.b_in)]
                + [(f"nac.{n}", p) for n, p in self.layer.named_parameters()]
                + [("out.W", self.w_out), ("out.b", self.b_out)])

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def logits(self, seqs) -> Tensor:
        """Class logits ``[B, C]`` for sequences that all share one length."""
        n = len(seqs[0])
        if any(len(s) != n for s in seqs):
            raise ValueError("a batch must hold sequences of one length")
        x = np.stack([s.features() for s in seqs])
        h = Tensor(x) @ self.w_in + self.b_in
        times = np.stack([s.durations for s in seqs]) if self.config.time_input else None
        y = self.layer(h, times)
        return y.mean(axis=1) @ self.w_out + self.b_out

    def predict(self, seqs) -> np.ndarray:
        out = np.empty(len(seqs), dtype=np.int64)
        with no_grad():
            for idx in _length_groups(seqs):
                out[idx] = np.argmax(self.logits([seqs[i] for i in idx]).data, axis=-1)
        return out


def _length_groups(seqs, max_size: int | None = None) -> list[np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    groups = []
    for n in np.unique(lengths):
        idx = np.flatnonzero(lengths == n)
        if max_size:
            groups += [idx[i:i + max_size] for i in range(0, idx.size, max_size)]
        else:
            groups.append(idx)
    return groups


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -(T.log_softmax_lastdim(logits) * onehot).sum() / float(labels.size)


# ---- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd-momentum', got {self.optimizer!r}")


@dataclass(frozen=True)
class TaskConfig:
    n_sequences: int = 1000
    base_length: int = 128


@dataclass(frozen=True)
class RunConfig:
    layer: NACConfig = field(default_factory=lambda: NACConfig(time_input=True))
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(replace(self.layer, seed=seed), replace(self.train, seed=seed), self.task)

    def to_dict(self) -> dict:
        return {"layer": asdict(self.layer), "train": asdict(self.train), "task": asdict(self.task)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"layer", "train", "task"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")

        def build(kind, part):
            names = {f.name for f in fields(kind)}
            bad = set(part) - names
            if bad:
                raise ValueError(f"unknown {kind.__name__} keys: {sorted(bad)}")
            return kind(**part)

        layer = NACConfig.from_dict({"time_input": True, **doc.get("layer", {})})
        return cls(layer, build(TrainConfig, doc.get("train", {})), build(TaskConfig, doc.get("task", {})))


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    def __init__(self, params, lr, momentum=0.9):
        self.params, self.lr, self.mu = params, lr, momentum
        self.vel = [np.zeros_like(p.data) for p in params]

    def step(self, grads):
        for p, g, vel in zip(self.params, grads, self.vel):
            vel *= self.mu
            vel += g
            p.data -= self.lr * vel


@dataclass
class CurveRow:
    epoch: int
    split: str
    loss: float
    acc: float


@dataclass
class TrainResult:
    model: EventClassifier
    curve: list
    test_accuracy: float


def _batches(seqs, batch_size, rng):
    groups = []
    for idx in _length_groups(seqs):
        idx = rng.permutation(idx)
        groups += [idx[i:i + batch_size] for i in range(0, idx.size, batch_size)]
    order = rng.permutation(len(groups))
    return [groups[i] for i in order]


def dataset_loss(model: EventClassifier, seqs) -> tuple[float, float]:
    total, correct = 0.0, 0
    with no_grad():
        for idx in _length_groups(seqs):
            batch = [seqs[i] for i in idx]
            labels = [s.label for s in batch]
            lg = model.logits(batch)
            total += cross_entropy(lg, labels).item() * len(batch)
            correct += int(np.sum(np.argmax(lg.data, axis=-1) == np.asarray(labels)))
    return total / len(seqs), correct / len(seqs)


def train_bptt(model: EventClassifier, data: Dataset, config: TrainConfig, checkpoint_path=None) -> TrainResult:
    """Minibatch BPTT with one tape per batch. Aborts on a non-finite loss."""
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, config.lr, config.beta1, config.beta2)
    else:
        opt = SGDMomentum(params, config.lr, config.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA7C4]))
    curve = []
    for epoch in range(1, config.epochs + 1):
        seen, loss_sum, correct = 0, 0.0, 0
        for b, idx in enumerate(_batches(data.train, config.batch_size, rng)):
            batch = [data.train[i] for i in idx]
            labels = [s.label for s in batch]
            try:
                # the tape raises NonFiniteError itself; numpy's warnings would only duplicate it
                with Tape() as tape, np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    lg = model.logits(batch)
                    loss = cross_entropy(lg, labels)
                grads = tape.gradient(loss, params)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {b} "
                                       f"(lr={config.lr}); lower the learning rate: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss {loss.item()} at epoch {epoch}, batch {b} (lr={config.lr})")
            opt.step(grads)
            loss_sum += loss.item() * len(batch)
            correct += int(np.sum(np.argmax(lg.data, axis=-1) == np.asarray(labels)))
            seen += len(batch)
        curve.append(CurveRow(epoch, "train", loss_sum / seen, correct / seen))
        if data.test:
            curve.append(CurveRow(epoch, "test", *dataset_loss(model, data.test)))
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model.named_parameters())
    test_acc = evaluate(model, data.test).accuracy if data.test else float("nan")
    return TrainResult(model, curve, test_acc)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "acc"])
        for r in curve:
            w.writerow([r.epoch, r.split, repr(r.loss), repr(r.acc)])


# ---- evaluation -----------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    n: int


def evaluate(model, seqs, n_classes: int = 2) -> EvalResult:
    """``model`` needs ``predict(seqs) -> labels``; confusion rows are true labels."""
    seqs = list(seqs)
    if not seqs:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.asarray(model.predict(seqs), dtype=np.int64)
    truth = np.array([s.label for s in seqs], dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    return EvalResult(float(np.mean(pred == truth)), conf, len(seqs))


# ---- ablation -------------------------------------------------------------

ABLATION_MODES = ("exact", "euler", "steady")
ABLATION_TOPK = (2, 8, "full")


@dataclass
class AblationRow:
    mode: str
    top_k: str
    sparsity: float
    seeds: list
    accuracies: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Sample standard deviation (n - 1 denominator)."""
        return float(np.std(self.accuracies, ddof=1))


def variant_config(base: NACConfig, mode: str, top_k, sparsity: float | None = None) -> NACConfig:
    sparsity = base.sparsity if sparsity is None else float(sparsity)
    if top_k == "full":
        return replace(base, mode=mode, pairwise_full=True, sparsity=sparsity)
    return replace(base, mode=mode, top_k=int(top_k), pairwise_full=False, sparsity=sparsity)


def mode_ablation(data: Dataset, run: RunConfig, seeds, modes=ABLATION_MODES, top_ks=ABLATION_TOPK,
                  sparsities=None) -> list[AblationRow]:
    """One row per (mode, top_k, sparsity) cell, each trained once per seed."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError(f"ablation needs >= 3 seeds, got {len(seeds)}")
    sparsities = [run.layer.sparsity] if sparsities is None else list(sparsities)
    rows = []
    for mode in modes:
        for k in top_ks:
            for sp in sparsities:
                accs = []
                for seed in seeds:
                    cfg = replace(variant_config(run.layer, mode, k, sp), seed=seed)
                    model = EventClassifier(cfg, seed=seed)
                    res = train_bptt(model, data, replace(run.train, seed=seed))
                    accs.append(res.test_accuracy)
                rows.append(AblationRow(mode, str(k), float(sp), seeds, accs))
    return rows


ABLATION_FIELDS = ["mode", "top_k", "sparsity", "n_seeds", "mean_acc", "std_acc", "accs"]


def write_ablation(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([r.mode, r.top_k, repr(r.sparsity), len(r.seeds), repr(r.mean), repr(r.std),
                        ";".join(repr(a) for a in r.accuracies)])

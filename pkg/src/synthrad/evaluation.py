"""Classifier and the real-vs-synthetic augmentation experiment."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from synthrad import autodiff as ad
from synthrad import nn
from synthrad.autodiff import Tape, Tensor
from synthrad.data import DISEASE_TOKENS, DISEASES, NO_FINDING, MetadataRecord, PromptedExample
from synthrad.optim import AdamState, adam_step
from synthrad.rng import Rng

TABLE_HEADERS = ("S. No", "Size and Type of Data", "Accuracy on test set")

# (prompt token, count, seed) -> images in [-1, 1]
ImageSource = Callable[[str, int, int], Sequence[np.ndarray]]


@dataclass(frozen=True)
class ClassifierConfig:
    classes: tuple[str, ...] = ("no finding", "edema")
    resolution: int = 28
    channels: tuple[int, int] = (8, 16)
    epochs: int = 10
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0


class ClassifierNet(nn.Module):
    """Two conv + pool blocks, a third conv, and a linear head over the flattened map."""

    def __init__(self, config: ClassifierConfig):
        if config.resolution % 4:
            raise ValueError(f"classifier resolution must be divisible by 4, got {config.resolution}")
        rng = Rng(config.seed, 0xC1A5)
        c1, c2 = config.channels
        self.classes = tuple(config.classes)
        self.resolution = config.resolution
        self.conv1 = nn.Conv2d(1, c1, 3, rng)
        self.conv2 = nn.Conv2d(c1, c2, 3, rng)
        self.conv3 = nn.Conv2d(c2, c2, 3, rng)
        side = config.resolution // 4
        self.head = nn.Linear(c2 * side * side, len(config.classes), rng, gain=1.0)

    def logits(self, x: Tensor) -> Tensor:
        h = ad.avgpool2(ad.leaky_relu(self.conv1(x)))
        h = ad.avgpool2(ad.leaky_relu(self.conv2(h)))
        h = ad.leaky_relu(self.conv3(h))
        return self.head(nn.flatten(h))

    def predict_proba(self, images: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        out = []
        for i in range(0, len(imgs), batch_size):
            chunk = imgs[i:i + batch_size][:, None, :, :]
            out.append(ad.softmax(self.logits(Tensor(chunk)).data.astype(np.float64)))
        return np.concatenate(out) if out else np.zeros((0, len(self.classes)))


def label_of(example: PromptedExample, classes: Sequence[str]) -> int:
    try:
        return classes.index(example.disease)
    except (ValueError, StopIteration):
        raise ValueError(f"{example.image_id}: prompt {example.prompt} has no class among {classes}") from None


def parameter_hash(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in net.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


class ClassifierTrainer:
    """Minibatch Adam on cross-entropy.  Step k is fully determined by (seed, k), so runs resume exactly."""

    def __init__(self, train: Sequence[PromptedExample], config: ClassifierConfig, net: ClassifierNet | None = None):
        if not train:
            raise ValueError("empty training set")
        classes = list(config.classes)
        self.labels = np.array([label_of(e, classes) for e in train])
        if len(set(self.labels.tolist())) < 2:
            raise ValueError(f"training set holds a single class ({classes[self.labels[0]]!r})")
        self.images = np.stack([e.image for e in train])[:, None, :, :].astype(np.float32)
        self.config = config
        self.net = net or ClassifierNet(config)
        self.opt = AdamState(lr=config.lr)
        self.step = 0
        self.steps_per_epoch = -(-len(train) // config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step - 1, self.steps_per_epoch)
        order = Rng(self.config.seed, 3, epoch).permutation(len(self.labels))
        return order[k * self.config.batch_size:(k + 1) * self.config.batch_size]

    def train_step(self) -> float:
        idx = self.batch_indices(self.step + 1)
        params = self.net.parameters()
        with Tape() as tape:
            loss = ad.cross_entropy(self.net.logits(Tensor(self.images[idx])), self.labels[idx])
        tape.backward(loss, wrt=params)
        adam_step(params, self.opt)
        self.step += 1
        return loss.item()

    def run(self, until: int | None = None, on_step: Callable[[int, float], None] | None = None) -> ClassifierNet:
        until = self.total_steps if until is None else until
        while self.step < until:
            loss = self.train_step()
            if on_step is not None:
                on_step(self.step, loss)
        return self.net


def train_classifier(
    train: Sequence[PromptedExample], config: ClassifierConfig, init_hash: list | None = None
) -> ClassifierNet:
    """Train for ``config.epochs`` epochs; labels come from each prompt's disease token.

    ``init_hash``, when given, receives the hash of the freshly initialised parameters.
    """
    trainer = ClassifierTrainer(train, config)
    if init_hash is not None:
        init_hash.append(parameter_hash(trainer.net))
    return trainer.run()


def evaluate(net, test: Sequence[PromptedExample]) -> float:
    """Fraction of test items whose arg-max class matches the prompt's class."""
    if not test:
        raise ValueError("empty test set")
    classes = list(net.classes)
    truth = np.array([label_of(e, classes) for e in test])
    probs = net.predict_proba([e.image for e in test])
    return float(np.mean(np.argmax(probs, axis=1) == truth))


# ---------------------------------------------------------------------------
# results table


def row_label(n_real: int, n_synth: int) -> str:
    parts = []
    if n_real:
        parts.append(f"{n_real} Real")
    if n_synth:
        parts.append(f"{n_synth} Synthesised")
    return " + ".join(parts) or "0 Real"


@dataclass
class ResultRow:
    label: str
    n_real: int
    n_synth: int
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, n_real: int, n_synth: int, accuracy: float) -> ResultRow:
        row = ResultRow(row_label(n_real, n_synth), n_real, n_synth, accuracy)
        self.rows.append(row)
        return row

    def to_text(self) -> str:
        body = [(str(i), r.label, f"{r.accuracy:.2f}") for i, r in enumerate(self.rows, 1)]
        widths = [max(len(x) for x in col) for col in zip(TABLE_HEADERS, *body)]
        lines = []
        for cells in [TABLE_HEADERS, *body]:
            lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(TABLE_HEADERS) + ["Real", "Synthesised"])
        for i, r in enumerate(self.rows, 1):
            w.writerow([i, r.label, f"{r.accuracy:.4f}", r.n_real, r.n_synth])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# experiment


@dataclass(frozen=True)
class ExperimentConfig:
    disease: str = "edema"
    rows: tuple[tuple[int, int], ...] = ((1000, 0), (500, 500))
    test_size: int = 300
    classifier: ClassifierConfig = ClassifierConfig()
    seed: int = 0

    def __post_init__(self):
        totals = {r + s for r, s in self.rows}
        if len(totals) != 1:
            raise ValueError(f"every row must train on the same total size, got {sorted(totals)}")
        if any(r < 0 or s < 0 for r, s in self.rows):
            raise ValueError("row counts must be non-negative")
        if self.test_size < 1:
            raise ValueError("test_size must be >= 1")

    @property
    def classes(self) -> tuple[str, str]:
        return ("no finding", self.disease)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _split_counts(n: int) -> tuple[int, int]:
    return n // 2, n - n // 2


def _by_class(pool: Sequence[PromptedExample], classes: Sequence[str]) -> dict[str, list[PromptedExample]]:
    groups: dict[str, list[PromptedExample]] = {c: [] for c in classes}
    for e in pool:
        diseases = [t for t in e.prompt if t in DISEASE_TOKENS]
        if len(diseases) == 1 and diseases[0] in groups:
            groups[diseases[0]].append(e)
    return groups


def _take(groups, counts, rng: Rng, what: str) -> list[PromptedExample]:
    out = []
    for cls, k in counts.items():
        items = groups[cls]
        if len(items) < k:
            raise ValueError(f"{what}: need {k} {cls!r} images, pool has {len(items)}")
        order = rng.child(len(out)).permutation(len(items))
        out.extend(items[i] for i in order[:k])
    return out


def run_augmentation_experiment(
    config: ExperimentConfig,
    generator: ImageSource,
    real_pool: Sequence[PromptedExample],
    test_pool: Sequence[PromptedExample],
) -> ResultsTable:
    """Train one classifier per row on a real/synthetic mix and score it on a shared test subset.

    Each training subset is class balanced.  A row with fewer real images uses
    a prefix of the same per-class real ordering, and every row trains from
    the same initial parameters.
    """
    classes = config.classes
    ccfg = ClassifierConfig(**{**asdict(config.classifier), "classes": classes})
    rng = Rng(config.seed, 4)
    real_groups = _by_class(real_pool, classes)
    max_real = max(r for r, _ in config.rows)
    half = _split_counts(max_real)
    real_order = {c: _take(real_groups, {c: k}, rng.child(1, i), "real pool") for i, (c, k) in enumerate(zip(classes, half))}
    test_counts = dict(zip(classes, _split_counts(config.test_size)))
    test = _take(_by_class(test_pool, classes), test_counts, rng.child(2), "test pool")

    table = ResultsTable(metadata={"seed": config.seed, "config_hash": config.config_hash(), "init_hashes": [],
                                   "test_ids": sorted(e.image_id for e in test)})
    for row_idx, (n_real, n_synth) in enumerate(config.rows):
        train: list[PromptedExample] = []
        for c, k in zip(classes, _split_counts(n_real)):
            train.extend(real_order[c][:k])
        for ci, (c, k) in enumerate(zip(classes, _split_counts(n_synth))):
            if k == 0:
                continue
            images = generator(c, k, config.seed * 1000 + ci)
            if len(images) != k:
                raise ValueError(f"generator returned {len(images)} images for {c!r}, asked for {k}")
            train.extend(
                PromptedExample(f"synth-{c}-{j}", np.asarray(img, dtype=np.float32), (c,)) for j, img in enumerate(images)
            )
        net = train_classifier(train, ccfg, init_hash=table.metadata["init_hashes"])
        table.add(n_real, n_synth, evaluate(net, test))
    return table


# ---------------------------------------------------------------------------
# class balance


@dataclass
class BalanceReport:
    total: int
    counts: dict[str, int]
    fractions: dict[str, float]
    no_finding_fraction: float
    cooccurrence: dict[tuple[str, str], int]

    def to_text(self) -> str:
        lines = [f"images: {self.total}", f"No Finding fraction: {self.no_finding_fraction:.4f}"]
        width = max(len(d) for d in self.counts)
        for d, n in self.counts.items():
            lines.append(f"{d.ljust(width)}  {n:7d}  {self.fractions[d]:.4f}")
        if self.cooccurrence:
            lines.append("co-occurrence:")
            for (a, b), n in sorted(self.cooccurrence.items(), key=lambda kv: (-kv[1], kv[0])):
                lines.append(f"  {a} + {b}: {n}")
        return "\n".join(lines) + "\n"


def class_balance_report(records: Sequence[MetadataRecord]) -> BalanceReport:
    """Per-finding counts (multi-label: one count per finding) and No Finding share of images."""
    counts = Counter({d: 0 for d in DISEASES})
    pairs: Counter = Counter()
    for r in records:
        counts.update(r.findings)
        pairs.update(combinations(sorted(set(r.findings)), 2))
    total = len(records)
    fractions = {d: (counts[d] / total if total else 0.0) for d in DISEASES}
    return BalanceReport(total, {d: counts[d] for d in DISEASES}, fractions, fractions[NO_FINDING], dict(pairs))

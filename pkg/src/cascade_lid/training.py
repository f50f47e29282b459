"""Training loop, batched evaluation, checkpoints and run manifests."""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .cascade import Batch, CascadeConfig, CascadeModel, train_step
from .nn import AdamState, checkpoint, get_dtype, no_grad
from .synthdata import Dataset
from .transducer import greedy_decode


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 16
    lr: float = 2e-3
    warmup_steps: int = 100
    final_lr_frac: float = 0.1   # linear decay to lr * final_lr_frac after warmup
    clip: float | None = 5.0
    seed: int = 0
    threads: int = 1

    def to_dict(self):
        return asdict(self)


def length_buckets(lengths, batch_size, rng) -> list:
    """Sort by length, cut into batches, shuffle batch order.

    Ties in length are broken by a seeded random key so bucket membership
    also changes between epochs.
    """
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def lr_at(tcfg: TrainConfig, step: int, total: int) -> float:
    warm = max(1, tcfg.warmup_steps)
    if step <= warm:
        return tcfg.lr * step / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return tcfg.lr * (1.0 - frac * (1.0 - tcfg.final_lr_frac))


@dataclass
class TrainResult:
    curves: list = field(default_factory=list)   # one dict per epoch
    steps: int = 0
    seconds: float = 0.0


def train(model: CascadeModel, data: Dataset, tcfg: TrainConfig, adam: AdamState | None = None,
          log=None, time_budget: float | None = None) -> tuple:
    """Train ``model`` in place; returns ``(TrainResult, AdamState)``.

    With ``threads == 1`` the run is a pure function of (model init, data,
    ``tcfg``). ``time_budget`` (seconds) stops after the epoch that crosses it.
    """
    params = model.parameters()
    adam = adam or AdamState.for_params(params, lr=tcfg.lr)
    utts = data.utterances
    lengths = [u.features.shape[0] for u in utts]
    result = TrainResult()
    start = time.perf_counter()
    total = tcfg.epochs * -(-len(utts) // tcfg.batch_size)
    first_step = adam.step
    for epoch in range(tcfg.epochs):
        rng = np.random.default_rng([tcfg.seed, epoch])
        sums: dict = {}
        n = 0
        for idx in length_buckets(lengths, tcfg.batch_size, rng):
            batch = Batch.from_utterances([utts[i] for i in idx], data.locales)
            adam.lr = lr_at(tcfg, adam.step + 1, first_step + total)
            terms = train_step(model, batch, adam, threads=tcfg.threads, clip=tcfg.clip)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            n += len(idx)
            result.steps += 1
        row = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
        result.curves.append(row)
        if log:
            log(row)
        if time_budget is not None and time.perf_counter() - start > time_budget:
            break
    adam.lr = tcfg.lr
    result.seconds = time.perf_counter() - start
    return result, adam


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    refs: list
    locales: list
    first_pass: list
    second_pass: list
    z: list          # per utterance (T', K) or None when the model has no LID predictor


def decode_dataset(model: CascadeModel, data: Dataset, batch_size: int = 32) -> EvalResult:
    """Batched encoding, then greedy decoding of both passes per utterance."""
    utts = data.utterances
    if not utts:
        raise ValueError("evaluation set is empty")
    first, second, zs = [None] * len(utts), [None] * len(utts), [None] * len(utts)
    order = np.argsort([u.features.shape[0] for u in utts], kind="stable")
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        batch = Batch.from_utterances([utts[i] for i in idx], data.locales)
        with no_grad():
            enc = model.encode(batch)
        h1 = enc["h_enc1"].data
        d2 = enc["dec2_in"].data
        for b, i in enumerate(idx):
            L = int(enc["lengths"][b])
            first[i] = greedy_decode(model.dec1, h1[b, :L]).tokens
            second[i] = greedy_decode(model.dec2, d2[b, :L]).tokens
            if "z" in enc:
                zs[i] = enc["z"].data[b, :L]
    return EvalResult([list(u.tokens) for u in utts], [u.locale for u in utts], first, second, zs)


@dataclass
class Reports:
    wer: dict                 # {"1st": {group: WerReport}, "2nd": {...}}
    lid: dict                 # {"locales": LidReport, "clusters": LidReport} (empty without LID)

    def wer_csv(self) -> str:
        return metrics.wer_csv(self.wer)

    def lid_csv(self) -> str:
        return metrics.lid_csv(self.lid) if self.lid else ""

    def text(self, name="model") -> str:
        parts = [metrics.wer_text({name: {p: g["all"] for p, g in self.wer.items()}})]
        if self.lid:
            parts.append(metrics.lid_text({f"{v} %acc": r for v, r in self.lid.items()}))
        return "\n\n".join(parts)

    def summary(self) -> dict:
        out = {f"wer_{p}": g["all"].wer for p, g in self.wer.items()}
        for v, r in self.lid.items():
            out.update({f"lid_{v}_{k}": a for k, a in r.rows.items()})
        return out


def make_reports(res: EvalResult, cfg: CascadeConfig, frame_indices=(0, 5, 10)) -> Reports:
    tables = {"1st": metrics.corpus_wer(res.refs, res.first_pass, res.locales),
              "2nd": metrics.corpus_wer(res.refs, res.second_pass, res.locales)}
    lid = {}
    if all(z is not None for z in res.z):
        labels = [cfg.locales.index(l) for l in res.locales]
        clusters = cfg.clusters
        cmap = [clusters.index(cfg.cluster_map.get(l, l)) for l in cfg.locales]
        lid["locales"] = metrics.lid_accuracy(res.z, labels, frame_indices, names=cfg.locales)
        lid["clusters"] = metrics.lid_accuracy(res.z, labels, frame_indices, class_map=cmap, names=clusters)
    return Reports(tables, lid)


def evaluate(model: CascadeModel, data: Dataset, frame_indices=(0, 5, 10), batch_size=32) -> Reports:
    return make_reports(decode_dataset(model, data, batch_size), model.cfg, frame_indices)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: CascadeModel, adam: AdamState | None = None, meta: dict | None = None):
    blob = checkpoint.dumps(model.state_arrays(), model.cfg.to_dict(), adam, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple:
    """Returns ``(model, adam_or_None, meta)``."""
    header, named, adam = checkpoint.loads(Path(path).read_bytes())
    cfg = CascadeConfig.from_dict(header["config"])
    model = CascadeModel(cfg, rng=False)
    model.load_arrays(named)
    return model, adam, header["meta"]


# ---------------------------------------------------------------- manifest

def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"v{__version__}"


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    build_id: str
    dataset_hash: str
    precision: int
    train: dict
    curves: list
    reports: dict = field(default_factory=dict)
    checkpoint_sha256: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def curves_csv(curves: list) -> str:
    keys = ["epoch"] + sorted({k for row in curves for k in row} - {"epoch"})
    lines = [",".join(keys)]
    for row in curves:
        lines.append(",".join(repr(row[k]) if k in row else "" for k in keys))
    return "\n".join(lines) + "\n"


def precision_bits() -> int:
    return 8 * np.dtype(get_dtype()).itemsize

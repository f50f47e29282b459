"""Deterministic synthetic multilingual corpus.

A frame is ``language_offset + token_mean + noise``; each token is held
for a uniformly drawn number of frames and tokens follow a per-language
bigram chain. The chain never repeats a token immediately: with i.i.d.
frames a repeat would be indistinguishable from one longer token. Locales in the same cluster share their offset, vocabulary
and token realisations up to a small perturbation, so a 9-locale corpus
collapses to 7 well-separated languages.

Binary dataset layout (little-endian)::

    b"CLIDDATA" | u32 version | u32 len | header JSON (d_feat, locales, config_hash, norm)
    u32 n_utts
    per utterance: u16 len | uid | u16 locale index | u32 T | u32 U | T*d f4 | U u32
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

MAGIC = b"CLIDDATA"
VERSION = 1


@dataclass
class LanguageSpec:
    locale: str
    vocab: tuple                 # token ids in 1..V
    initial: np.ndarray          # (n,) first-token distribution
    transitions: np.ndarray      # (n, n) bigram rows
    token_means: np.ndarray      # (n, d)
    offset: np.ndarray           # (d,)
    noise: float = 1.2
    duration: tuple = (4, 10)

    def validate(self):
        n = len(self.vocab)
        if n == 0:
            raise ValueError(f"{self.locale}: empty vocabulary")
        if self.transitions.shape != (n, n) or self.token_means.shape[0] != n:
            raise ValueError(f"{self.locale}: table shapes do not match vocabulary")
        rows = np.vstack([self.initial[None], self.transitions])
        if np.any(rows < 0) or not np.allclose(rows.sum(axis=1), 1.0):
            raise ValueError(f"{self.locale}: transition rows must be distributions")
        lo, hi = self.duration
        if not 1 <= lo <= hi:
            raise ValueError(f"{self.locale}: bad duration range")


@dataclass
class GeneratorConfig:
    locales: list = field(default_factory=lambda: ["de-DE", "en-GB", "en-US", "es-ES", "es-US",
                                                   "fr-FR", "it-IT", "ja-JP", "zh-TW"])
    cluster_map: dict = field(default_factory=lambda: {"en-GB": "en-X", "en-US": "en-X",
                                                       "es-ES": "es-X", "es-US": "es-X"})
    mixture: dict | None = None
    vocab_size: int = 32
    vocab_per_language: int = 20
    d_feat: int = 16
    token_scale: float = 1.0
    language_token_shift: float = 0.5
    offset_scale: float = 0.3
    locale_perturbation: float = 0.08
    noise: float = 1.2
    duration: tuple = (4, 10)
    min_frames: int = 52
    max_frames: int = 120
    bigram_concentration: float = 0.3
    spec_seed: int = 1234

    def weights(self) -> np.ndarray:
        if self.mixture:
            w = np.array([self.mixture[loc] for loc in self.locales], dtype=float)
        else:
            # one dominant locale (~25%), one rare (~5%), the rest uniform
            w = np.full(len(self.locales), 1.0)
            if len(self.locales) >= 3 and "en-US" in self.locales and "en-GB" in self.locales:
                rest = (1.0 - 0.30) / (len(self.locales) - 2)
                w = np.full(len(self.locales), rest)
                w[self.locales.index("en-US")] = 0.25
                w[self.locales.index("en-GB")] = 0.05
        return w / w.sum()

    def to_dict(self):
        d = asdict(self)
        d["duration"] = list(d["duration"])
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Utterance:
    uid: str
    locale: str
    features: np.ndarray   # (T, d) float32
    tokens: list

    def __eq__(self, other):
        return (isinstance(other, Utterance) and self.uid == other.uid and self.locale == other.locale
                and self.tokens == other.tokens and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Dataset:
    d_feat: int
    locales: list
    config_hash: str
    utterances: list
    norm: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.d_feat == other.d_feat and self.locales == other.locales
                and self.config_hash == other.config_hash and self.norm == other.norm
                and self.utterances == other.utterances)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.d_feat, list(self.locales), self.config_hash,
                       [self.utterances[i] for i in idx], dict(self.norm))

    # ---- serialisation
    def dumps(self) -> bytes:
        buf = io.BytesIO()
        header = {"d_feat": self.d_feat, "locales": self.locales, "config_hash": self.config_hash,
                  "norm": self.norm}
        hb = json.dumps(header, sort_keys=True).encode()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(hb)))
        buf.write(hb)
        buf.write(struct.pack("<I", len(self.utterances)))
        for u in self.utterances:
            ub = u.uid.encode()
            buf.write(struct.pack("<H", len(ub)))
            buf.write(ub)
            buf.write(struct.pack("<HII", self.locales.index(u.locale), u.features.shape[0], len(u.tokens)))
            buf.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
            buf.write(np.asarray(u.tokens, dtype="<u4").tobytes())
        return buf.getvalue()

    @classmethod
    def loads(cls, blob: bytes) -> "Dataset":
        buf = io.BytesIO(blob)
        if buf.read(len(MAGIC)) != MAGIC:
            raise ValueError("not a dataset file")
        version, hlen = struct.unpack("<II", buf.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        header = json.loads(buf.read(hlen).decode())
        d = header["d_feat"]
        (n,) = struct.unpack("<I", buf.read(4))
        utts = []
        for _ in range(n):
            (ul,) = struct.unpack("<H", buf.read(2))
            uid = buf.read(ul).decode()
            li, T, U = struct.unpack("<HII", buf.read(10))
            feats = np.frombuffer(buf.read(4 * T * d), dtype="<f4").reshape(T, d).astype(np.float32)
            toks = np.frombuffer(buf.read(4 * U), dtype="<u4").astype(int).tolist()
            utts.append(Utterance(uid, header["locales"][li], feats, toks))
        if buf.read(1):
            raise ValueError("trailing bytes in dataset file")
        return cls(d, header["locales"], header["config_hash"], utts, header["norm"])

    def write(self, path):
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def read(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())

    def manifest(self) -> str:
        """JSON-lines inspection view: id, locale, U, T."""
        return "".join(json.dumps({"id": u.uid, "locale": u.locale, "U": len(u.tokens),
                                   "T": int(u.features.shape[0])}) + "\n" for u in self.utterances)

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps()).hexdigest()


def make_language_specs(cfg: GeneratorConfig) -> list:
    """Per-locale generative tables; locales sharing a cluster are near-copies."""
    rng = np.random.default_rng(cfg.spec_seed)
    V, d = cfg.vocab_size, cfg.d_feat
    if cfg.vocab_per_language < 1 or cfg.vocab_per_language > V:
        raise ValueError("vocab_per_language must be in [1, vocab_size]")
    base = rng.normal(0.0, cfg.token_scale, size=(V + 1, d))
    clusters = {}
    specs = []
    for loc in cfg.locales:
        cl = cfg.cluster_map.get(loc, loc)
        if cl not in clusters:
            vocab = np.sort(rng.choice(np.arange(1, V + 1), size=cfg.vocab_per_language, replace=False))
            n = len(vocab)
            clusters[cl] = dict(
                vocab=vocab,
                offset=rng.normal(0.0, cfg.offset_scale, size=d),
                shift=rng.normal(0.0, cfg.language_token_shift, size=(n, d)),
                initial=rng.dirichlet(np.full(n, 1.0)),
                transitions=rng.dirichlet(np.full(n, cfg.bigram_concentration), size=n),
            )
            if n > 1:
                # a repeated token would be indistinguishable from one long token
                np.fill_diagonal(clusters[cl]["transitions"], 0.0)
                clusters[cl]["transitions"] /= clusters[cl]["transitions"].sum(axis=1, keepdims=True)
        c = clusters[cl]
        n = len(c["vocab"])
        p = cfg.locale_perturbation
        trans = c["transitions"] + rng.uniform(0.0, p, size=(n, n)) / n
        if n > 1:
            np.fill_diagonal(trans, 0.0)
        specs.append(LanguageSpec(
            locale=loc,
            vocab=tuple(int(v) for v in c["vocab"]),
            initial=c["initial"],
            transitions=trans / trans.sum(axis=1, keepdims=True),
            token_means=base[c["vocab"]] + c["shift"] + rng.normal(0.0, p, size=(n, d)),
            offset=c["offset"] + rng.normal(0.0, p, size=d),
            noise=cfg.noise,
            duration=tuple(cfg.duration),
        ))
    return specs


def sample_utterance(spec: LanguageSpec, rng, min_frames, max_frames):
    """Draw ``(features, tokens, frame_alignment)`` fitting in ``max_frames``.

    ``frame_alignment[t]`` is the index (into ``spec.vocab``) of the token
    realised at frame ``t``.
    """
    target = int(rng.integers(min_frames, max_frames + 1))
    lo, hi = spec.duration
    probs = spec.initial
    idx, durs = [], []
    total = 0
    while True:
        k = int(rng.choice(len(spec.vocab), p=probs))
        dur = int(rng.integers(lo, hi + 1))
        if total + dur > target and idx:
            break
        if total + dur > max_frames:
            dur = max_frames - total
        idx.append(k)
        durs.append(dur)
        total += dur
        probs = spec.transitions[k]
        if total >= target:
            break
    align = np.repeat(idx, durs)
    means = spec.offset[None] + spec.token_means[align]
    feats = means + spec.noise * rng.normal(size=means.shape)
    return feats, [spec.vocab[k] for k in idx], align


def _allocate(weights, n):
    """Largest-remainder integer allocation of ``n`` items."""
    raw = weights * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def generate(cfg: GeneratorConfig, n_utts: int, seed: int, specs=None, normalize=True) -> Dataset:
    """Generate ``n_utts`` utterances; a pure function of ``(cfg, n_utts, seed)``."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    specs = make_language_specs(cfg) if specs is None else specs
    for s in specs:
        s.validate()
    counts = _allocate(cfg.weights(), n_utts)
    labels = np.repeat(np.arange(len(specs)), counts)
    np.random.default_rng([seed, 0]).shuffle(labels)
    utts = []
    for i, li in enumerate(labels):
        rng = np.random.default_rng([seed, 1, i])  # counter-based: utterance i is independent
        feats, toks, _ = sample_utterance(specs[li], rng, cfg.min_frames, cfg.max_frames)
        utts.append(Utterance(f"utt{i:06d}", specs[li].locale, feats, toks))
    norm = {}
    if normalize:
        allf = np.concatenate([u.features for u in utts])
        mu = allf.mean(axis=0)
        sd = allf.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        for u in utts:
            u.features = (u.features - mu) / sd
        norm = {"mean": [float(x) for x in mu], "std": [float(x) for x in sd]}
    for u in utts:
        u.features = u.features.astype(np.float32)
    return Dataset(cfg.d_feat, [s.locale for s in specs], cfg.hash(), utts, norm)


def split(data: Dataset, fractions, seed: int):
    """Disjoint, exhaustive train/dev/test (or any arity) partition."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be nonnegative and sum to 1")
    counts = _allocate(fractions, len(data))
    if np.any((fractions > 0) & (counts == 0)):
        raise ValueError("a split with a positive fraction came out empty")
    order = np.random.default_rng([seed, 2]).permutation(len(data))
    parts, start = [], 0
    for c in counts:
        parts.append(data.subset(sorted(order[start:start + c])))
        start += c
    return parts

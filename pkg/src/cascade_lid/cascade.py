"""Cascaded-encoder RNN-T with a frame-synchronous LID predictor.

Injection modes (system ids in parentheses):

``none`` (S00)            no language information.
``oracle-causal`` (S01)   ground-truth one-hot appended to every stacked input frame.
``oracle-dec2`` (S02)     ground-truth one-hot appended to the 2nd-pass decoder input.
``fig1a`` (S20)           predicted LID feature appended to ``h_enc2`` before the 2nd-pass
                          decoder; the predictor pools ``[e_enc1[t+s]; e_enc2[t]]``.
``fig1b`` (S30/S31)       predicted LID feature appended to ``h_enc1`` before the
                          right-context encoder; the predictor pools ``e_enc1[t]``.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoders import Encoder, EncoderConfig, EncoderStream, even_split
from .lid import (LID_MODES, LidHead, PoolState, cluster_matrix, lid_feature, lid_loss_from_logits,
                  one_hot, pool_stats, pool_update)
from .nn import AdamState, Module, NonFiniteError, Tensor, adam_step, get_dtype, grad, no_grad, ops
from .transducer import DecoderConfig, GreedyStream, TransducerDecoder, rnnt_loss

INJECTION_MODES = ("none", "oracle-causal", "oracle-dec2", "fig1a", "fig1b")
SYSTEMS = {"S00": "none", "S01": "oracle-causal", "S02": "oracle-dec2", "S20": "fig1a",
           "S30": "fig1b", "S31": "fig1b"}

DEFAULT_LOCALES = ["de-DE", "en-GB", "en-US", "es-ES", "es-US", "fr-FR", "it-IT", "ja-JP", "zh-TW"]
DEFAULT_CLUSTERS = {"en-GB": "en-X", "en-US": "en-X", "es-ES": "es-X", "es-US": "es-X"}


@dataclass
class CascadeConfig:
    feat_dim: int = 16
    stack_frames: int = 2
    stack_stride: int = 2
    causal: EncoderConfig | None = None
    right: EncoderConfig | None = None
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    locales: list = field(default_factory=lambda: list(DEFAULT_LOCALES))
    cluster_map: dict = field(default_factory=lambda: dict(DEFAULT_CLUSTERS))
    lid_hidden: int = 64
    lid_pooling: bool = True
    lid_mode: str = "argmax"
    injection: str = "fig1a"
    lid_enc1_shift: int | None = None
    lam: float = 0.5
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.causal, dict):
            self.causal = EncoderConfig(**self.causal)
        if isinstance(self.right, dict):
            self.right = EncoderConfig(**self.right)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.causal is None:
            self.causal = EncoderConfig(input_dim=self.feat_dim * self.stack_frames, num_blocks=4,
                                        per_layer_right_context=(0, 0, 0, 0), time_reduction_after=2,
                                        max_positions=256)
        if self.right is None:
            self.right = EncoderConfig(input_dim=self.causal.model_dim, num_blocks=2,
                                       per_layer_right_context=(2, 2))
        causal_in = self.feat_dim * self.stack_frames + (
            len(self.locales) if self.injection == "oracle-causal" else 0)
        if self.causal.input_dim != causal_in:
            self.causal = dataclasses.replace(self.causal, input_dim=causal_in)
        right_in = self.causal.model_dim + (self.lid_feature_dim if self.injection == "fig1b" else 0)
        if self.right.input_dim != right_in:
            self.right = dataclasses.replace(self.right, input_dim=right_in)
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"unknown injection mode {self.injection!r}")
        if self.lid_mode not in LID_MODES:
            raise ValueError(f"unknown LID mode {self.lid_mode!r}")
        if not 0.0 <= self.lam <= 1.0 or self.alpha < 0:
            raise ValueError("need 0 <= lam <= 1 and alpha >= 0")
        if any(self.causal.per_layer_right_context):
            raise ValueError("causal encoder must have zero right context")
        if self.right.time_reduction_after is not None:
            raise ValueError("right-context encoder does not reduce time")
        if self.lid_enc1_shift is None:
            self.lid_enc1_shift = self.right.total_right_context if self.injection == "fig1a" else 0
        if not 0 <= self.lid_enc1_shift <= self.right.total_right_context:
            raise ValueError("lid_enc1_shift must lie in [0, R_total]")
        if self.injection == "fig1b" and self.lid_enc1_shift != 0:
            raise ValueError("fig1b predicts LID causally (shift 0)")

    @property
    def clusters(self) -> list:
        seen = []
        for loc in self.locales:
            c = self.cluster_map.get(loc, loc)
            if c not in seen:
                seen.append(c)
        return seen

    @property
    def lid_feature_dim(self) -> int:
        return len(self.clusters) if self.lid_mode == "cluster" else len(self.locales)

    @property
    def total_right_context(self) -> int:
        return self.right.total_right_context

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["causal"]["per_layer_right_context"] = list(d["causal"]["per_layer_right_context"])
        d["right"]["per_layer_right_context"] = list(d["right"]["per_layer_right_context"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        return cls(**d)

    def replace(self, **changes) -> "CascadeConfig":
        d = self.to_dict()
        d.update(changes)
        if "injection" in changes and "lid_enc1_shift" not in changes:
            d["lid_enc1_shift"] = None
        return CascadeConfig.from_dict(d)


def toy_config(**changes) -> CascadeConfig:
    """Desk-scale defaults: 4 causal blocks (reduction after 2), 2 x 2-frame lookahead."""
    return CascadeConfig(**changes)


def full_config(**changes) -> CascadeConfig:
    """Production shapes for parameter counting only (do not train)."""
    causal = EncoderConfig(input_dim=240, num_blocks=12, model_dim=512, num_heads=8, conv_kernel=15,
                           per_layer_right_context=(0,) * 12, time_reduction_after=3, max_positions=512)
    right = EncoderConfig(input_dim=512, num_blocks=5, model_dim=512, num_heads=8, conv_kernel=15,
                          per_layer_right_context=even_split(15, 5))
    dec = DecoderConfig(vocab_size=16384, embed_dim=640, hidden_dim=2048, num_layers=2, pred_dim=640,
                        joint_dim=640)
    base = dict(feat_dim=80, stack_frames=3, stack_stride=3, causal=causal, right=right, decoder=dec,
                lid_hidden=512)
    base.update(changes)
    return CascadeConfig(**base)


def micro_config(**changes) -> CascadeConfig:
    """Smallest dimensions that still exercise every component (gradient checks)."""
    causal = EncoderConfig(input_dim=4, num_blocks=2, model_dim=4, num_heads=2, conv_kernel=2,
                           per_layer_right_context=(0, 0), time_reduction_after=1, ff_mult=1,
                           max_positions=16)
    right = EncoderConfig(input_dim=4, num_blocks=1, model_dim=4, num_heads=1, conv_kernel=2,
                          per_layer_right_context=(1,), ff_mult=1)
    dec = DecoderConfig(vocab_size=3, embed_dim=2, hidden_dim=2, num_layers=1, pred_dim=2, joint_dim=3)
    base = dict(feat_dim=2, stack_frames=2, stack_stride=2, causal=causal, right=right, decoder=dec,
                locales=["aa", "bb", "cc"], cluster_map={"aa": "a", "bb": "a", "cc": "c"}, lid_hidden=3)
    base.update(changes)
    return CascadeConfig(**base)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    feats: np.ndarray       # (B, T_raw, F) padded
    raw_lens: np.ndarray    # (B,)
    targets: np.ndarray     # (B, U_max) padded with 0
    target_lens: np.ndarray  # (B,)
    labels: np.ndarray | None = None  # (B,) locale indices

    def __len__(self):
        return len(self.raw_lens)

    @classmethod
    def from_utterances(cls, utts, locales):
        B = len(utts)
        T = max(u.features.shape[0] for u in utts)
        U = max(len(u.tokens) for u in utts)
        F = utts[0].features.shape[1]
        feats = np.zeros((B, T, F), dtype=get_dtype())
        targets = np.zeros((B, U), dtype=np.int64)
        for i, u in enumerate(utts):
            feats[i, :u.features.shape[0]] = u.features
            targets[i, :len(u.tokens)] = u.tokens
        labels = np.array([locales.index(u.locale) for u in utts]) if utts[0].locale is not None else None
        return cls(feats, np.array([u.features.shape[0] for u in utts]), targets,
                   np.array([len(u.tokens) for u in utts]), labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        T = int(self.raw_lens[idx].max()) if len(idx) else 0
        U = int(self.target_lens[idx].max()) if len(idx) else 0
        return Batch(self.feats[idx, :T], self.raw_lens[idx], self.targets[idx, :U], self.target_lens[idx],
                     None if self.labels is None else self.labels[idx])


@dataclass
class TwoPassOutput:
    first_pass: list
    second_pass: list
    z: np.ndarray | None = None  # (T', K) LID distributions


# ---------------------------------------------------------------- model

class CascadeModel(Module):
    def __init__(self, cfg: CascadeConfig, rng=None):
        """Build from ``cfg``; ``rng=False`` allocates zero parameters (shape-only)."""
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        elif rng is False:
            rng = None
        K = len(cfg.locales)
        D = cfg.causal.model_dim
        self.causal = Encoder(cfg.causal, rng)
        self.right = Encoder(cfg.right, rng)
        self.dec1 = TransducerDecoder(D, cfg.decoder, rng)
        dec2_in = cfg.right.model_dim
        if cfg.injection == "fig1a":
            dec2_in += cfg.lid_feature_dim
        elif cfg.injection == "oracle-dec2":
            dec2_in += K
        self.dec2 = TransducerDecoder(dec2_in, cfg.decoder, rng)
        lid_in = D if cfg.injection == "fig1b" else D + cfg.right.model_dim
        self.lid = LidHead(lid_in, cfg.lid_hidden, K, rng, pooling=cfg.lid_pooling)
        self.cluster_mat = cluster_matrix(cfg.cluster_map, cfg.locales, cfg.clusters)

    # -- parameter groups, for gradient-reachability checks
    def parameter_groups(self) -> dict:
        return {"causal": self.causal.parameters(), "right": self.right.parameters(),
                "dec1": self.dec1.parameters(), "dec2": self.dec2.parameters(),
                "lid": self.lid.parameters()}

    @property
    def predicts_lid(self) -> bool:
        return self.cfg.injection in ("fig1a", "fig1b")

    def _oracle(self, labels, T):
        if labels is None:
            raise ValueError(f"injection mode {self.cfg.injection!r} needs oracle LID labels")
        oh = one_hot(np.asarray(labels), len(self.cfg.locales), get_dtype())
        return Tensor(np.broadcast_to(oh[:, None, :], (len(labels), T, oh.shape[-1])).copy())

    def frontend(self, feats, raw_lens):
        cfg = self.cfg
        x = ops.stack_frames(Tensor(feats), cfg.stack_frames, cfg.stack_stride)
        lens = (np.asarray(raw_lens) - cfg.stack_frames) // cfg.stack_stride + 1
        if np.any(lens < 1):
            raise ValueError("utterance shorter than one stacked frame")
        return x, lens

    def encode(self, batch: Batch, oracle_ok=True):
        """Run both encoders and the LID predictor; returns a dict of intermediates."""
        cfg = self.cfg
        x, lens = self.frontend(batch.feats, batch.raw_lens)
        if cfg.injection == "oracle-causal":
            x = ops.concat([x, self._oracle(batch.labels, x.shape[1])], axis=-1)
        h1, tap1, lens1 = self.causal(x, lens)
        T1 = h1.shape[1]
        mask = np.arange(T1)[None, :] < lens1[:, None]
        out = {"h_enc1": h1, "e_enc1": tap1, "lengths": lens1, "mask": mask}
        right_in = h1
        if cfg.injection == "fig1b":
            lid_in = tap1
            out.update(self._predict(lid_in))
            right_in = ops.concat([h1, out["lid_feature"]], axis=-1)
        h2, tap2, _ = self.right(right_in, lens1)
        out.update(h_enc2=h2, e_enc2=tap2)
        dec2_in = h2
        if cfg.injection == "fig1a":
            e1 = ops.shift_time(tap1 * Tensor(mask[..., None]), cfg.lid_enc1_shift)
            out.update(self._predict(ops.concat([e1, tap2], axis=-1)))
            dec2_in = ops.concat([h2, out["lid_feature"]], axis=-1)
        elif cfg.injection == "oracle-dec2":
            dec2_in = ops.concat([h2, self._oracle(batch.labels, T1)], axis=-1)
        out["dec2_in"] = dec2_in
        return out

    def _predict(self, lid_in):
        logits = self.lid(lid_in)
        z = ops.softmax(logits)
        return {"lid_input": lid_in, "lid_logits": logits, "z": z,
                "lid_feature": lid_feature(z, self.cfg.lid_mode, self.cluster_mat)}

    # -- losses
    def losses(self, batch: Batch, norm=None) -> dict:
        """All loss terms for a batch.

        ``norm = (utterances, frames)`` rescales batch means so shard losses
        sum to the full-batch loss.
        """
        cfg = self.cfg
        enc = self.encode(batch)
        lens1 = enc["lengths"]
        scale_u = 1.0 if norm is None else len(batch) / norm[0]
        l1 = rnnt_loss(self.dec1(enc["h_enc1"], batch.targets), batch.targets, lens1, batch.target_lens)
        l2 = rnnt_loss(self.dec2(enc["dec2_in"], batch.targets), batch.targets, lens1, batch.target_lens)
        if scale_u != 1.0:
            l1, l2 = l1 * scale_u, l2 * scale_u
        casc = l1 * cfg.lam + l2 * (1.0 - cfg.lam)
        out = {"first": l1, "second": l2, "cascade": casc, "total": casc, "encoded": enc}
        if self.predicts_lid:
            if batch.labels is None:
                raise ValueError("LID training mode needs locale labels")
            llid = lid_loss_from_logits(enc["lid_logits"], batch.labels, enc["mask"])
            if norm is not None:
                llid = llid * (enc["mask"].sum() / norm[1])
            out["lid"] = llid
            if cfg.alpha != 0:
                out["total"] = casc + llid * cfg.alpha
        return out

    def cascade_loss(self, batch):
        return self.losses(batch)["cascade"]

    def joint_loss(self, batch):
        return self.losses(batch)["total"]

    # -- inference
    def forward_two_pass(self, feats, label=None) -> TwoPassOutput:
        """Offline two-pass greedy decoding of one utterance ``(T_raw, F)``."""
        feats = np.asarray(feats, dtype=get_dtype())
        batch = Batch(feats[None], np.array([len(feats)]), np.zeros((1, 0), np.int64), np.zeros(1, np.int64),
                      None if label is None else np.array([label]))
        with no_grad():
            enc = self.encode(batch)
        from .transducer import greedy_decode
        first = greedy_decode(self.dec1, enc["h_enc1"].data[0])
        second = greedy_decode(self.dec2, enc["dec2_in"].data[0])
        z = enc["z"].data[0] if "z" in enc else None
        return TwoPassOutput(first.tokens, second.tokens, z)

    def stream_session(self, label=None) -> "CascadeStream":
        return CascadeStream(self, label)

    # -- state
    def state_arrays(self):
        return [(n, p.data) for n, p in self.named_parameters()]

    def load_arrays(self, named):
        params = dict(self.named_parameters())
        names = [n for n, _ in named]
        if names != list(params):
            raise ValueError("checkpoint parameters do not match model")
        for n, arr in named:
            if arr.shape != params[n].shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {params[n].shape}")
            params[n].data = arr.astype(params[n].dtype)


def build(cfg: CascadeConfig) -> CascadeModel:
    return CascadeModel(cfg)


def train_step(model: CascadeModel, batch: Batch, adam: AdamState, threads=1, clip=None) -> dict:
    """One Adam step on the joint loss; returns batch-mean loss scalars."""
    if len(batch) == 0:
        raise ValueError("train_step: empty batch")
    params = model.parameters()
    if threads <= 1 or len(batch) < 2:
        shards = [np.arange(len(batch))]
    else:
        shards = [s for s in np.array_split(np.arange(len(batch)), threads) if len(s)]

    def run(idx):
        sub = batch if len(shards) == 1 else batch.subset(idx)
        terms = model.losses(sub, None if len(shards) == 1 else _shard_norm(model, batch))
        if not np.isfinite(terms["total"].item()):
            raise NonFiniteError(f"non-finite loss: {terms['total'].item()}")
        return terms, grad(terms["total"], params)

    if len(shards) == 1:
        results = [run(shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, shards))
    grads = [sum(r[1][i] for r in results) for i in range(len(params))]
    if clip:
        total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
        if total > clip:
            grads = [g * (clip / total) for g in grads]
    adam_step(params, grads, adam)
    report = {}
    for key in ("first", "second", "lid", "total"):
        if key in results[0][0]:
            report[key] = float(sum(r[0][key].item() for r in results))
    return report


def _shard_norm(model, batch):
    cfg = model.cfg
    lens = (batch.raw_lens - cfg.stack_frames) // cfg.stack_stride + 1
    if cfg.causal.time_reduction_after:
        lens = (lens + 1) // 2
    return len(batch), int(lens.sum())


# ---------------------------------------------------------------- streaming session

class CascadeStream:
    """Frame-by-frame two-pass inference.

    ``push(raw_frame)`` returns one event per newly finalized encoder frame:
    ``{"frame", "first_pass"}`` when ``h_enc1[t]`` is ready, and
    ``{"frame", "second_pass", "z"}`` when ``h_enc2[t]`` is ready, which
    happens exactly ``R_total`` encoder frames later.
    """

    def __init__(self, model: CascadeModel, label=None):
        cfg = model.cfg
        if cfg.injection.startswith("oracle") and label is None:
            raise ValueError(f"injection mode {cfg.injection!r} needs an oracle LID label")
        self.model = model
        self.label = label
        self.raw = []
        self.next_stack = 0
        self.causal = EncoderStream(model.causal)
        self.right = EncoderStream(model.right)
        self.first = GreedyStream(model.dec1)
        self.second = GreedyStream(model.dec2)
        self.enc1_taps = []
        self.h1_frames = []
        self.h2_frames = []
        self.h1_count = 0
        self.h2_count = 0
        lid_dim = model.lid.feat_dim
        self.pool = PoolState.empty(lid_dim)
        self.z = []
        self.done = False

    def push(self, frame):
        if self.done:
            raise RuntimeError("stream already flushed")
        cfg = self.model.cfg
        self.raw.append(np.asarray(frame, dtype=get_dtype()))
        events = []
        while self.next_stack + cfg.stack_frames <= len(self.raw):
            s = self.next_stack
            x = np.concatenate(self.raw[s:s + cfg.stack_frames])
            self.next_stack += cfg.stack_stride
            if cfg.injection == "oracle-causal":
                x = np.concatenate([x, one_hot(self.label, len(cfg.locales), x.dtype)])
            events += self._on_enc1(self.causal.push(x), final=False)
        return events

    def flush(self):
        if self.done:
            raise RuntimeError("stream already flushed")
        self.done = True
        events = self._on_enc1(self.causal.flush(), final=False)
        events += self._on_enc2(self.right.flush(), final=True)
        return events

    def _lid_step(self, h):
        with no_grad():
            self.pool = pool_update(self.pool, h)
            stats = pool_stats(self.pool).astype(h.dtype) if self.model.lid.pooling else h
            z = ops.softmax(self.model.lid.logits(Tensor(stats[None]))).data[0]
            feat = lid_feature(Tensor(z), self.model.cfg.lid_mode, self.model.cluster_mat).data
        self.z.append(z)
        return z, feat

    def _on_enc1(self, frames, final):
        cfg = self.model.cfg
        events = []
        for h1, tap1 in frames:
            t = self.h1_count
            self.h1_count += 1
            self.h1_frames.append(h1)
            tokens = self.first.push(h1)
            events.append({"frame": t, "first_pass": tokens})
            self.enc1_taps.append(tap1)
            right_in = h1
            if cfg.injection == "fig1b":
                _, feat = self._lid_step(tap1)
                right_in = np.concatenate([h1, feat])
            events += self._on_enc2(self.right.push(right_in), final)
        return events

    def _on_enc2(self, frames, final):
        cfg = self.model.cfg
        events = []
        for h2, tap2 in frames:
            t = self.h2_count
            self.h2_count += 1
            self.h2_frames.append(h2)
            dec_in = h2
            z = None
            if cfg.injection == "fig1a":
                j = t + cfg.lid_enc1_shift
                if j < self.h1_count:
                    e1 = self.enc1_taps[j]
                elif final:
                    e1 = np.zeros_like(self.enc1_taps[0])
                else:
                    raise AssertionError("lookahead tap not yet available")
                z, feat = self._lid_step(np.concatenate([e1, tap2]))
                dec_in = np.concatenate([h2, feat])
            elif cfg.injection == "fig1b":
                z = self.z[t]
            elif cfg.injection == "oracle-dec2":
                dec_in = np.concatenate([h2, one_hot(self.label, len(cfg.locales), h2.dtype)])
            tokens = self.second.push(dec_in)
            events.append({"frame": t, "second_pass": tokens, "z": z, "available_frames": self.h1_count})
        return events

    def result(self) -> TwoPassOutput:
        z = np.array(self.z) if self.z else None
        return TwoPassOutput(list(self.first.hyp.tokens), list(self.second.hyp.tokens), z)

"""Self-checks against independent oracles.

Each suite returns a :class:`SuiteResult`; ``run_all`` is what the
``verify`` command executes. Sizes default to the full acceptance sizes;
``quick=True`` shrinks them for smoke runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import lid, metrics
from .cascade import Batch, CascadeModel, micro_config, toy_config
from .encoders import EncoderConfig
from .nn import Tensor, grad, ops, precision
from .nn.gradcheck import check_op, numeric_grad, rel_error
from .transducer import rnnt_loss, rnnt_loss_bruteforce


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metric: float
    tolerance: float
    probes: int
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<26} metric={self.metric:.3g} tol={self.tolerance:g} "
                f"probes={self.probes} time={self.seconds:.1f}s {self.detail}").rstrip()


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- rnnt

@_timed
def rnnt_equivalence(max_T=4, max_U=3, instances=20, vocab=3, seed=0, tol=1e-6) -> SuiteResult:
    """DP loss vs explicit alignment enumeration for every ``T <= max_T, U <= max_U``."""
    rng = np.random.default_rng(seed)
    worst, n = 0.0, 0
    with precision(64):
        for T in range(1, max_T + 1):
            for U in range(0, max_U + 1):
                for _ in range(instances):
                    logits = rng.normal(scale=2.0, size=(T, U + 1, vocab + 1))
                    y = rng.integers(1, vocab + 1, size=U)
                    dp = rnnt_loss(Tensor(logits), y).item()
                    worst = max(worst, abs(dp - rnnt_loss_bruteforce(logits, y)))
                    n += 1
    return SuiteResult("rnnt_bruteforce", worst <= tol, worst, tol, n, 0.0)


# ---------------------------------------------------------------- gradients

def _primitive_cases(rng):
    r = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    mask = np.tril(np.ones((4, 4), bool))[None]
    return {
        "add": (lambda a, b: a + b, [r(3, 4), r(4)]),
        "sub": (lambda a, b: a - b, [r(3, 4), r(3, 1)]),
        "mul": (lambda a, b: a * b, [r(3, 4), r(3, 4)]),
        "div": (lambda a, b: a / b, [r(3, 4), pos(3, 4)]),
        "matmul": (ops.matmul, [r(2, 3, 4), r(4, 5)]),
        "sum": (lambda a: a.sum(axis=1), [r(3, 4)]),
        "mean": (lambda a: a.mean(axis=0), [r(3, 4)]),
        "reshape_transpose": (lambda a: a.reshape(2, 6).transpose(1, 0), [r(3, 4)]),
        "getitem": (lambda a: a[:, 1:3], [r(3, 4)]),
        "concat": (lambda a, b: ops.concat([a, b], axis=-1), [r(2, 3), r(2, 2)]),
        "cumsum": (lambda a: ops.cumsum(a, axis=-2), [r(2, 5, 3)]),
        "exp": (ops.exp, [r(3, 4)]),
        "log": (ops.log, [pos(3, 4)]),
        "tanh": (ops.tanh, [r(3, 4)]),
        "sigmoid": (ops.sigmoid, [r(3, 4)]),
        "relu": (ops.relu, [r(3, 4) + 0.05 * np.sign(r(3, 4))]),
        "swish": (ops.swish, [r(3, 4)]),
        "sqrt": (ops.sqrt, [pos(3, 4)]),
        "softmax": (ops.softmax, [r(3, 4)]),
        "masked_softmax": (lambda a: ops.masked_softmax(a, mask), [r(2, 4, 4)]),
        "logsumexp": (ops.logsumexp, [r(3, 4)]),
        "log_softmax": (ops.log_softmax, [r(3, 4)]),
        "layer_norm": (ops.layer_norm, [r(2, 3, 5), pos(5), r(5)]),
        "depthwise_conv1d": (ops.depthwise_conv1d, [r(2, 6, 3), r(3, 3), r(3)]),
        "embedding": (lambda t: ops.embedding(t, np.array([[0, 2, 2], [1, 0, 3]])), [r(4, 3)]),
        "stack_frames": (lambda a: ops.stack_frames(a, 3, 2), [r(2, 7, 2)]),
        "shift_time": (lambda a: ops.shift_time(a, 2), [r(2, 5, 3)]),
        "streaming_stats": (lid.streaming_stats, [r(2, 6, 3)]),
    }


def _micro_batch(cfg, rng, B=2):
    T = rng.integers(10, 15, size=B)
    T[0] = 14
    U = rng.integers(1, 3, size=B)
    U[0] = 2
    feats = rng.normal(size=(B, T.max(), cfg.feat_dim))
    targets = np.zeros((B, U.max()), np.int64)
    for b in range(B):
        targets[b, :U[b]] = rng.integers(1, cfg.decoder.vocab_size + 1, size=U[b])
    return Batch(feats, T, targets, U, rng.integers(0, len(cfg.locales), size=B))


def model_gradient_error(cfg=None, seed=0, loss="total", batch=None):
    """Worst relative error of every parameter gradient of the joint loss (64-bit)."""
    with precision(64):
        cfg = cfg or micro_config(lid_mode="z", injection="fig1a", alpha=0.3, lam=0.4)
        model = CascadeModel(cfg, np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 1)
        batch = batch or _micro_batch(cfg, rng)
        params = model.parameters()
        analytic = grad(model.losses(batch)[loss], params)
        worst, n = 0.0, 0
        for p, g in zip(params, analytic):
            base = p.data.copy()

            def f(arrs, p=p):
                p.data = arrs[0]
                return model.losses(batch)[loss].item()

            num = numeric_grad(f, [base], 0)
            p.data = base
            worst = max(worst, rel_error(g, num, floor=GRAD_FLOOR))
            n += base.size
    return worst, n


# Entries whose true gradient is below this are compared absolutely: central
# differences carry ~1e-11 of rounding noise, which would dominate a pure ratio.
GRAD_FLOOR = 1e-6


@_timed
def gradient_checks(seed=0, tol=1e-4, include_model=True) -> SuiteResult:
    """Analytic vs central-difference gradients: rnnt loss, every primitive, full model."""
    rng = np.random.default_rng(seed)
    worst, probes, bad = 0.0, 0, []
    with precision(64):
        for T, U in [(1, 0), (3, 2), (4, 3), (5, 1)]:
            logits = rng.normal(size=(T, U + 1, 4))
            y = rng.integers(1, 4, size=U)
            e = check_op(lambda l, y=y: rnnt_loss(l, y), [logits])
            worst, probes = max(worst, e), probes + logits.size
            if e > tol:
                bad.append(f"rnnt{T}x{U}")
        lg = rng.normal(size=(2, 4, 3, 4))
        ys = np.array([[1, 3], [2, 0]])
        e = check_op(lambda l: rnnt_loss(l, ys, np.array([4, 3]), np.array([2, 1])), [lg])
        worst, probes = max(worst, e), probes + lg.size
        if e > tol:
            bad.append("rnnt_batch")
        for name, (fn, arrays) in _primitive_cases(rng).items():
            e = check_op(fn, arrays)
            worst = max(worst, e)
            probes += sum(a.size for a in arrays)
            if e > tol:
                bad.append(name)
    if include_model:
        e, n = model_gradient_error(seed=seed)
        worst, probes = max(worst, e), probes + n
        if e > tol:
            bad.append("model")
    return SuiteResult("gradients", not bad, worst, tol, probes, 0.0, ",".join(bad))


# ---------------------------------------------------------------- pooling

def pooling_oracle(h) -> np.ndarray:
    """Two-pass per-prefix ``[mean; std]`` in float64 (``(T, D) -> (T, 2D)``)."""
    h = np.asarray(h, dtype=np.float64)
    out = np.empty((h.shape[0], 2 * h.shape[1]))
    for t in range(1, h.shape[0] + 1):
        x = h[:t]
        mu = x.mean(axis=0)
        out[t - 1] = np.concatenate([mu, np.sqrt(((x - mu) ** 2).mean(axis=0))])
    return out


@_timed
def pooling_equivalence(bits=64, n=50, max_len=200, max_dim=32, seed=0, tol=None) -> SuiteResult:
    """Frame-by-frame pooled statistics vs the two-pass oracle at every prefix."""
    tol = tol if tol is not None else (1e-10 if bits == 64 else 1e-5)
    dtype = np.float64 if bits == 64 else np.float32
    rng = np.random.default_rng(seed)
    worst, probes = 0.0, 0
    for _ in range(n):
        T = int(rng.integers(1, max_len + 1))
        D = int(rng.integers(1, max_dim + 1))
        h = (rng.normal(size=(T, D)) * rng.uniform(0.1, 3.0, size=D) + rng.normal(size=D)).astype(dtype)
        st = lid.PoolState.empty(D)
        got = np.empty((T, 2 * D), dtype=dtype)
        for t in range(T):
            st = lid.pool_update(st, h[t])
            got[t] = lid.pool_stats(st)
        worst = max(worst, float(np.max(np.abs(got - pooling_oracle(h)))))
        probes += T
    return SuiteResult(f"pooling_{bits}bit", worst <= tol, worst, tol, probes, 0.0)


# ---------------------------------------------------------------- causality

def probe_config(injection="fig1a", **changes):
    """A small random model with nontrivial lookahead, for contract probes."""
    causal = EncoderConfig(input_dim=32, num_blocks=3, model_dim=32, num_heads=2, conv_kernel=3,
                           per_layer_right_context=(0, 0, 0), time_reduction_after=1, max_positions=128)
    right = EncoderConfig(input_dim=32, num_blocks=2, model_dim=32, num_heads=2, conv_kernel=3,
                          per_layer_right_context=(2, 1))
    base = dict(causal=causal, right=right, injection=injection, lid_hidden=16)
    base.update(changes)
    return toy_config(**base)


def raw_frames_for(model, t):
    """Last raw input frame that can influence encoder frame ``t`` through causal paths."""
    cfg = model.cfg
    red = cfg.causal.reduction
    last_stacked = red * (t + 1) - 1
    return last_stacked * cfg.stack_stride + cfg.stack_frames - 1


@_timed
def causality_probes(n=20, seed=0, injections=("none", "fig1a", "fig1b")) -> SuiteResult:
    """Perturb future inputs: ``h_enc1[t]`` must not move beyond ``t``, ``h_enc2[t]`` beyond ``t+R``."""
    rng = np.random.default_rng(seed)
    failures = []
    sensitive = 0
    probes = 0
    for inj in injections:
        model = CascadeModel(probe_config(inj), np.random.default_rng(seed))
        R = model.cfg.total_right_context
        for _ in range(n):
            T_raw = int(rng.integers(60, 100))
            x = rng.normal(size=(1, T_raw, model.cfg.feat_dim)).astype(np.float32)
            batch = Batch(x, np.array([T_raw]), np.zeros((1, 0), np.int64), np.zeros(1, np.int64), np.array([0]))
            base = model.encode(batch)
            T1 = int(base["lengths"][0])
            t = int(rng.integers(0, max(1, T1 - R - 1)))
            # perturb everything after the causal horizon of h_enc1[t]
            cut1 = raw_frames_for(model, t) + 1
            x1 = x.copy()
            x1[:, cut1:] += rng.normal(size=x1[:, cut1:].shape).astype(np.float32)
            e1 = model.encode(Batch(x1, batch.raw_lens, batch.targets, batch.target_lens, batch.labels))
            probes += 1
            if not np.array_equal(e1["h_enc1"].data[:, :t + 1], base["h_enc1"].data[:, :t + 1]):
                failures.append(f"{inj}:h_enc1@{t}")
            # perturb everything after the lookahead horizon of h_enc2[t]
            cut2 = raw_frames_for(model, t + R) + 1
            x2 = x.copy()
            x2[:, cut2:] += rng.normal(size=x2[:, cut2:].shape).astype(np.float32)
            e2 = model.encode(Batch(x2, batch.raw_lens, batch.targets, batch.target_lens, batch.labels))
            probes += 1
            if not np.array_equal(e2["h_enc2"].data[:, :t + 1], base["h_enc2"].data[:, :t + 1]):
                failures.append(f"{inj}:h_enc2@{t}")
            if "z" in base and not np.array_equal(e2["z"].data[:, :t + 1], base["z"].data[:, :t + 1]):
                failures.append(f"{inj}:z@{t}")
            # sensitivity: perturb only frames inside (t, t+R]
            x3 = x.copy()
            x3[:, cut1:cut2] += rng.normal(size=x3[:, cut1:cut2].shape).astype(np.float32)
            e3 = model.encode(Batch(x3, batch.raw_lens, batch.targets, batch.target_lens, batch.labels))
            if not np.array_equal(e3["h_enc2"].data[:, t], base["h_enc2"].data[:, t]):
                sensitive += 1
    total = n * len(injections)
    if sensitive < total:
        failures.append(f"insensitive {total - sensitive}/{total}")
    detail = f"sensitive={sensitive}/{total} " + " ".join(failures[:5])
    return SuiteResult("causality", not failures, float(len(failures)), 0, probes, 0.0, detail.strip())


# ---------------------------------------------------------------- streaming

def stream_vs_offline(model, feats, label=None):
    """Max deviations between streamed and offline outputs for one utterance."""
    batch = Batch(feats[None], np.array([len(feats)]), np.zeros((1, 0), np.int64), np.zeros(1, np.int64),
                  None if label is None else np.array([label]))
    from .nn import no_grad
    with no_grad():
        enc = model.encode(batch)
    off = model.forward_two_pass(feats, label)
    sess = model.stream_session(label)
    for f in feats:
        sess.push(f)
    sess.flush()
    res = sess.result()
    d1 = float(np.max(np.abs(np.array(sess.h1_frames) - enc["h_enc1"].data[0])))
    d2 = float(np.max(np.abs(np.array(sess.h2_frames) - enc["h_enc2"].data[0])))
    dz = 0.0 if off.z is None else float(np.max(np.abs(res.z - off.z)))
    same = res.first_pass == off.first_pass and res.second_pass == off.second_pass
    return {"h_enc1": d1, "h_enc2": d2, "z": dz, "tokens_equal": same}


@_timed
def streaming_equivalence(n=20, seed=0, tol=1e-5, injections=("fig1a", "fig1b")) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, mismatches, probes = 0.0, 0, 0
    for inj in injections:
        model = CascadeModel(probe_config(inj), np.random.default_rng(seed + 1))
        for _ in range(n):
            T = int(rng.integers(20, 120))
            feats = rng.normal(size=(T, model.cfg.feat_dim)).astype(np.float32)
            r = stream_vs_offline(model, feats, int(rng.integers(0, len(model.cfg.locales))))
            worst = max(worst, r["h_enc1"], r["h_enc2"], r["z"])
            mismatches += not r["tokens_equal"]
            probes += 1
    ok = worst <= tol and mismatches == 0
    return SuiteResult("streaming", ok, worst, tol, probes, 0.0, f"token_mismatches={mismatches}")


# ---------------------------------------------------------------- gradient paths

def lid_tap_gradient(mode, seed=0):
    """Max |d L_2nd / d (LID predictor input)| for a random fig1a model."""
    cfg = probe_config("fig1a", lid_mode=mode)
    model = CascadeModel(cfg, np.random.default_rng(seed))
    batch = _toy_batch(cfg, np.random.default_rng(seed + 1))
    out = model.losses(batch)
    g = grad(out["second"], [out["encoded"]["lid_input"]])[0]
    return float(np.max(np.abs(g)))


def right_encoder_gradient(lam, seed=0):
    cfg = probe_config("fig1a", lam=lam)
    model = CascadeModel(cfg, np.random.default_rng(seed))
    batch = _toy_batch(cfg, np.random.default_rng(seed + 1))
    gs = grad(model.losses(batch)["cascade"], model.right.parameters())
    return max(float(np.max(np.abs(g))) for g in gs)


def _toy_batch(cfg, rng, B=3):
    T = rng.integers(30, 60, size=B)
    U = rng.integers(2, 6, size=B)
    feats = rng.normal(size=(B, T.max(), cfg.feat_dim)).astype(np.float32)
    targets = np.zeros((B, U.max()), np.int64)
    for b in range(B):
        targets[b, :U[b]] = rng.integers(1, cfg.decoder.vocab_size + 1, size=U[b])
    return Batch(feats, T, targets, U, rng.integers(0, len(cfg.locales), size=B))


@_timed
def gradient_paths(seed=0) -> SuiteResult:
    sg = lid_tap_gradient("sg", seed)
    st = lid_tap_gradient("argmax", seed)
    right = right_encoder_gradient(1.0, seed)
    ok = sg == 0.0 and st > 0.0 and right == 0.0
    return SuiteResult("gradient_paths", ok, max(sg, right), 0, 3, 0.0,
                       f"sg={sg:g} argmax={st:.3g} lam1_right={right:g}")


# ---------------------------------------------------------------- driver

@_timed
def wer_oracle(max_len=6, alphabet=3) -> SuiteResult:
    """DP edit distance vs breadth-first search over single edits, all pairs."""
    strings, dist = metrics.all_pairs_edit_distance_bfs(tuple(range(alphabet)), max_len)
    by_len: dict = {}
    for k, s in enumerate(strings):
        by_len.setdefault(len(s), []).append(k)
    mismatches, probes = 0, 0
    for m, rows in by_len.items():
        refs = np.array([strings[k] for k in rows], dtype=np.int64).reshape(len(rows), m)
        for n, cols in by_len.items():
            hyps = np.array([strings[k] for k in cols], dtype=np.int64).reshape(len(cols), n)
            for lo in range(0, len(rows), 64):
                dp = metrics.edit_distance(refs[lo:lo + 64, None, :], hyps[None, :, :])
                want = dist[np.ix_(rows[lo:lo + 64], cols)]
                mismatches += int(np.sum(dp != want))
                probes += dp.size
    return SuiteResult("wer_oracle", mismatches == 0, float(mismatches), 0.0, probes, 0.0,
                       f"strings={len(strings)}")


def run_all(quick=False, log=print) -> list:
    k = 4 if quick else 1
    suites = [
        lambda: rnnt_equivalence(instances=20 // k),
        lambda: gradient_checks(include_model=not quick),
        lambda: pooling_equivalence(bits=64, n=50 // k),
        lambda: pooling_equivalence(bits=32, n=50 // k),
        lambda: causality_probes(n=20 // k),
        lambda: streaming_equivalence(n=20 // k),
        gradient_paths,
        lambda: wer_oracle(max_len=4 if quick else 6),
    ]
    results = []
    for s in suites:
        r = s()
        if log:
            log(r.line())
        results.append(r)
    return results

"""Command line: generate | train | evaluate | stream | verify.

Every flag can also be set through an environment variable named
``CASCADE_LID_<FLAG>`` (e.g. ``CASCADE_LID_SEED=3``); explicit flags win.
The JSON config file may hold ``generator``, ``model``, ``train``, ``data``
and ``eval`` sections.

Exit codes: 0 ok, 1 usage or config error, 2 verification failure,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

ENV_PREFIX = "CASCADE_LID_"
EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3

COMMON = {
    "config": dict(type=str, help="JSON config file"),
    "seed": dict(type=int, help="random seed"),
    "checkpoint": dict(type=str, help="checkpoint path"),
    "dataset": dict(type=str, help="dataset file"),
    "mode": dict(choices=["none", "oracle-causal", "oracle-dec2", "fig1a", "fig1b"], help="LID injection mode"),
    "lid_mode": dict(choices=["z", "argmax", "sg", "cluster"], help="LID feature mode"),
    "precision": dict(type=int, choices=[32, 64], help="float width"),
    "threads": dict(type=int, help="worker threads"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    for name, kw in COMMON.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascade-lid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic corpus split into train/dev/test")
    _add_common(g)
    g.add_argument("--out", default="data", help="output directory")
    g.add_argument("--num-utts", type=int, default=None)
    g.add_argument("--fractions", default=None, help="comma-separated split fractions")

    t = sub.add_parser("train", help="train a model on a dataset file")
    _add_common(t)
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--epochs", type=int, default=None)

    e = sub.add_parser("evaluate", help="WER and LID accuracy tables for a checkpoint")
    _add_common(e)
    e.add_argument("--out", default=None, help="directory for CSV reports")

    s = sub.add_parser("stream", help="frame-by-frame emission log for one utterance")
    _add_common(s)
    s.add_argument("--index", type=int, default=0, help="utterance index in the dataset")

    v = sub.add_parser("verify", help="run the oracle self-checks")
    _add_common(v)
    v.add_argument("--quick", action="store_true", help="smaller probe counts")
    return parser


def _apply_env(args, environ):
    for name, kw in COMMON.items():
        if getattr(args, name) is None:
            raw = environ.get(ENV_PREFIX + name.upper())
            if raw is not None:
                conv = kw.get("type", str)
                try:
                    val = conv(raw)
                except ValueError as exc:
                    raise UsageError(f"{ENV_PREFIX}{name.upper()}: {exc}") from exc
                if "choices" in kw and val not in kw["choices"]:
                    raise UsageError(f"{ENV_PREFIX}{name.upper()} must be one of {kw['choices']}")
                setattr(args, name, val)
    return args


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - {"generator", "model", "train", "data", "eval"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _need(args, name):
    val = getattr(args, name)
    if val is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    if name in ("dataset", "checkpoint") and not Path(val).exists():
        raise FileNotFoundError(f"{name} not found: {val}")
    return val


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg, out):
    from .synthdata import GeneratorConfig, generate, split
    gen = _construct(GeneratorConfig, cfg.get("generator", {}), "generator")
    data_cfg = cfg.get("data", {})
    n = args.num_utts or data_cfg.get("num_utts", 2200)
    fr = args.fractions or data_cfg.get("fractions", [0.8, 0.1, 0.1])
    fractions = [float(x) for x in fr.split(",")] if isinstance(fr, str) else list(fr)
    seed = args.seed if args.seed is not None else data_cfg.get("seed", 0)
    ds = generate(gen, n, seed)
    names = ["train", "dev", "test"] if len(fractions) == 3 else [f"part{i}" for i in range(len(fractions))]
    odir = Path(args.out)
    odir.mkdir(parents=True, exist_ok=True)
    for name, part in zip(names, split(ds, fractions, seed)):
        part.write(odir / f"{name}.bin")
        (odir / f"{name}.jsonl").write_text(part.manifest())
        out(f"{name}: {len(part)} utterances -> {odir / (name + '.bin')}")
    return EXIT_OK


def _model_config(args, cfg, locales=None):
    from .cascade import CascadeConfig
    m = dict(cfg.get("model", {}))
    if args.mode:
        m["injection"] = args.mode
    if args.lid_mode:
        m["lid_mode"] = args.lid_mode
    if args.seed is not None:
        m["seed"] = args.seed
    if locales is not None and "locales" not in m:
        m["locales"] = list(locales)
    return _construct(CascadeConfig, m, "model")


def _construct(cls, fields, section):
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {section} config: {exc}") from exc


def cmd_train(args, cfg, out):
    from .cascade import CascadeModel
    from .synthdata import Dataset
    from .training import (RunManifest, TrainConfig, build_id, curves_csv, precision_bits, save_checkpoint,
                           train)
    data = Dataset.read(_need(args, "dataset"))
    mcfg = _model_config(args, cfg, data.locales)
    tdict = dict(cfg.get("train", {}))
    if args.epochs is not None:
        tdict["epochs"] = args.epochs
    if args.seed is not None:
        tdict["seed"] = args.seed
    if args.threads is not None:
        tdict["threads"] = args.threads
    tcfg = _construct(TrainConfig, tdict, "train")
    model = CascadeModel(mcfg)
    odir = Path(args.out)
    odir.mkdir(parents=True, exist_ok=True)
    result, adam = train(model, data, tcfg, log=lambda row: out(json.dumps(row)))
    ckpt = Path(args.checkpoint) if args.checkpoint else odir / "model.ckpt"
    digest = save_checkpoint(ckpt, model, adam, {"epochs": len(result.curves), "steps": result.steps})
    (odir / "curves.csv").write_text(curves_csv(result.curves))
    from .nn.checkpoint import config_hash
    manifest = RunManifest(config_hash(mcfg.to_dict()), tcfg.seed, build_id(), data.sha256(), precision_bits(),
                           tcfg.to_dict(), result.curves, {}, digest)
    (odir / "manifest.json").write_text(manifest.to_json())
    out(f"checkpoint {ckpt} sha256={digest[:16]}")
    return EXIT_OK


def cmd_evaluate(args, cfg, out):
    from .synthdata import Dataset
    from .training import evaluate, load_checkpoint
    model, _, _ = load_checkpoint(_need(args, "checkpoint"))
    data = Dataset.read(_need(args, "dataset"))
    ev = cfg.get("eval", {})
    rep = evaluate(model, data, tuple(ev.get("frame_indices", (0, 5, 10))), ev.get("batch_size", 32))
    out(rep.text(model.cfg.injection))
    if args.out:
        odir = Path(args.out)
        odir.mkdir(parents=True, exist_ok=True)
        (odir / "wer.csv").write_text(rep.wer_csv())
        if rep.lid:
            (odir / "lid.csv").write_text(rep.lid_csv())
        (odir / "report.txt").write_text(rep.text(model.cfg.injection) + "\n")
    return EXIT_OK


def cmd_stream(args, cfg, out):
    from .synthdata import Dataset
    from .training import load_checkpoint
    model, _, _ = load_checkpoint(_need(args, "checkpoint"))
    data = Dataset.read(_need(args, "dataset"))
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index must be in [0, {len(data)})")
    utt = data.utterances[args.index]
    label = model.cfg.locales.index(utt.locale) if utt.locale in model.cfg.locales else None
    sess = model.stream_session(label)
    out(f"# utterance {utt.uid} locale={utt.locale} T={len(utt.features)} R_total={model.cfg.total_right_context}")
    out("# raw_frame  kind  enc_frame  tokens  [z argmax p]")

    def show(raw_t, events):
        for ev in events:
            if "first_pass" in ev:
                out(f"{raw_t:5d}  1st  {ev['frame']:4d}  {ev['first_pass']}")
            else:
                z = ev["z"]
                zs = "" if z is None else f"  {model.cfg.locales[int(np.argmax(z))]} {float(np.max(z)):.3f}"
                out(f"{raw_t:5d}  2nd  {ev['frame']:4d}  {ev['second_pass']}{zs}")

    for t, frame in enumerate(utt.features):
        show(t, sess.push(frame))
    show(len(utt.features), sess.flush())
    res = sess.result()
    out(f"# ref    {utt.tokens}")
    out(f"# 1st    {res.first_pass}")
    out(f"# 2nd    {res.second_pass}")
    return EXIT_OK


def cmd_verify(args, cfg, out):
    from . import verify
    results = verify.run_all(quick=args.quick, log=out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "stream": cmd_stream,
            "verify": cmd_verify}


def main(argv=None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    def out(line):
        print(line, flush=True)

    try:
        args = _apply_env(args, environ)
        cfg = load_config(args.config)
        from .nn import set_precision
        from threadpoolctl import threadpool_limits
        set_precision(args.precision or 32)
        with threadpool_limits(limits=args.threads or 1):
            return COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()

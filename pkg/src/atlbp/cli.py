"""``atlbp`` command line: generate, describe, split, train, eval, personalize, crossval.

Settings resolve as defaults < ``--config`` file < explicit flags. The
config file is flat ``key = value`` text; unknown keys are rejected. Each
command writes its resolved settings next to its output
(``<output>.config`` or ``<dir>/run.config``).

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import data as ds
from . import metrics as mt
from . import model as mdl
from . import protocol, synth
from .errors import AtlbpError, ConfigError, DataError, UsageError

log = logging.getLogger("atlbp")

EMBEDDING_FLAG = {"none": "none", "affect": "affect_only", "identity": "identity_only", "both": "both"}

PROTOCOL_KEYS = {
    "mode": str,
    "k": int,
    "fraction": float,
    "target_fps": float,
    "fold": int,
    "user": str,
    "pooled_baseline": bool,
    "manifest": str,
    "plan": str,
    "checkpoint": str,
    "out": str,
}
PROTOCOL_DEFAULTS = {"mode": "random", "k": 5, "fraction": 0.2, "target_fps": 3.0, "fold": 0,
                     "pooled_baseline": False}

_MODEL_TYPES = {
    "dim_ca": int, "dim_cv": int, "clip_norm": float,
    "learning_rate": float, "beta1": float, "beta2": float, "adam_eps": float,
    "embedding_mode": str, "compress_activation": str, "pooling": str, "engine": str,
}
MODEL_KEYS = {f.name: _MODEL_TYPES.get(f.name, int) for f in fields(mdl.ModelConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _convert(key: str, raw: str):
    kind = MODEL_KEYS.get(key) or PROTOCOL_KEYS.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def read_run_config(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "embedding_mode" and raw in EMBEDDING_FLAG:
            raw = EMBEDDING_FLAG[raw]
        out[key] = _convert(key, raw)
    return out


def write_run_config(path, settings: dict) -> None:
    lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(settings.items())]
    Path(path).write_text("\n".join(lines) + "\n")


class Settings:
    """Merged model and protocol settings for one invocation."""

    def __init__(self, args):
        merged = dict(PROTOCOL_DEFAULTS)
        if getattr(args, "config", None):
            merged.update(read_run_config(args.config))
        for key in list(MODEL_KEYS) + list(PROTOCOL_KEYS):
            val = getattr(args, key, None)
            if val is not None:
                merged[key] = val
        if getattr(args, "embedding_mode", None):
            merged["embedding_mode"] = EMBEDDING_FLAG[args.embedding_mode]
        self.values = merged
        self.model = mdl.ModelConfig(**{k: v for k, v in merged.items() if k in MODEL_KEYS})

    def __getitem__(self, key):
        return self.values.get(key)

    def require(self, *keys):
        missing = [k for k in keys if self.values.get(k) is None]
        if missing:
            raise UsageError("missing required setting(s): " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))

    def resolved(self) -> dict:
        out = {k: v for k, v in self.values.items() if k in PROTOCOL_KEYS}
        out.update(self.model.to_dict())
        return out

    def protocol_dict(self) -> dict:
        keys = ("mode", "k", "fraction", "target_fps")
        return {k: self.values.get(k) for k in keys}

    def hash(self) -> str:
        return protocol.config_hash(self.model.to_dict(), self.protocol_dict())


def _load(settings: Settings):
    settings.require("manifest")
    header, segments = ds.load_dataset(settings["manifest"])
    cfg = settings.model
    if (header.dim_psi, header.dim_rho, header.dim_xi) != (cfg.dim_psi, cfg.dim_rho, cfg.dim_xi):
        # the dataset header is authoritative for input sizes
        settings.model = cfg = mdl.ModelConfig(**{**cfg.to_dict(), "dim_psi": header.dim_psi,
                                                  "dim_rho": header.dim_rho, "dim_xi": header.dim_xi})
    return header, protocol.prepare(segments, settings["target_fps"])


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1))


def _sidecar(path) -> Path:
    return Path(str(path) + ".config")


def _fold(settings: Settings, plan: ds.SplitPlan) -> ds.Fold:
    i = settings["fold"]
    if not 0 <= i < len(plan.folds):
        raise UsageError(f"fold {i} outside 0..{len(plan.folds) - 1}")
    return plan.folds[i]


# --------------------------------------------------------------------------
# commands

def cmd_generate(args, settings: Settings) -> None:
    settings.require("out")
    spec = synth.SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else synth.SyntheticSpec()
    for flag in ("n_users", "signal_strength", "baseline_scale", "noise_scale"):
        val = getattr(args, flag)
        if val is not None:
            setattr(spec, flag, val)
    if args.seed is not None:
        spec.seed = args.seed
    header, segments = synth.generate_file(spec, settings["out"])
    _write_json(_sidecar(settings["out"]), {"spec": spec.to_dict(), "seed": spec.seed,
                                            "summary": synth.describe(header, segments)})


def cmd_describe(args, settings: Settings) -> None:
    settings.require("manifest")
    header, segments = ds.load_dataset(settings["manifest"])
    doc = synth.describe(header, segments)
    if settings["out"]:
        _write_json(settings["out"], doc)
    else:
        print(json.dumps(doc, indent=1))


def _check_mode(args, settings: Settings, plan: ds.SplitPlan | None = None) -> None:
    mode = settings["mode"]
    if mode not in protocol.MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {protocol.MODES}")
    if getattr(args, "fraction", None) is not None and mode != "leave-users-out-personalized":
        raise UsageError(f"--fraction only applies to leave-users-out-personalized, not {mode}")
    if plan is not None and getattr(args, "mode", None) is not None and args.mode != plan.kind:
        raise UsageError(f"--mode {args.mode} contradicts plan kind {plan.kind}")


def cmd_split(args, settings: Settings) -> None:
    settings.require("out")
    _check_mode(args, settings)
    _, segments = _load(settings)
    plan = protocol.build_plan(segments, settings["mode"], settings["k"], settings.model.seed, settings["fraction"])
    plan.save(settings["out"])
    write_run_config(_sidecar(settings["out"]), settings.resolved())


def cmd_train(args, settings: Settings) -> None:
    settings.require("plan", "out")
    _, segments = _load(settings)
    plan = ds.SplitPlan.load(settings["plan"])
    fold = _fold(settings, plan)
    by_id = {s.segment_id: s for s in segments}
    train_raw = [by_id[i] for i in fold.train]
    norm = ds.fit_normalizer(train_raw)
    result = mdl.train(settings.model, [norm.apply(s) for s in train_raw])
    h = settings.hash()
    mdl.save_checkpoint(settings["out"], result.params, normalizer=norm.to_dict(),
                        seed=settings.model.seed, config_hash=h, fold=settings["fold"])
    _write_json(Path(str(settings["out"]) + ".losses.json"),
                {"seed": settings.model.seed, "config_hash": h, "steps": result.steps, "epoch_mean_loss": result.losses})
    write_run_config(_sidecar(settings["out"]), settings.resolved())


def _load_checkpoint(settings: Settings):
    settings.require("checkpoint")
    params, extra = mdl.load_checkpoint(settings["checkpoint"])
    norm = ds.Normalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else None
    return params, norm, extra


def cmd_eval(args, settings: Settings) -> None:
    settings.require("plan", "out")
    params, norm, extra = _load_checkpoint(settings)
    _, segments = _load(settings)
    plan = ds.SplitPlan.load(settings["plan"])
    fold = _fold(settings, plan)
    by_id = {s.segment_id: s for s in segments}
    test = [by_id[i] for i in fold.test]
    if settings["user"]:
        test = [s for s in test if s.user_id == settings["user"]]
    if norm is not None:
        test = [norm.apply(s) for s in test]
    preds = [mdl.predict(params, s)[0] for s in test]
    report = mt.EvalReport.from_predictions([s.label for s in test], preds, params.config.num_classes,
                                            users=[s.user_id for s in test])
    _write_json(settings["out"], {
        "checkpoint": str(settings["checkpoint"]),
        "seed": params.config.seed,
        "config_hash": extra.get("config_hash"),
        "plan_hash": protocol.config_hash(plan.to_dict()),
        "fold": settings["fold"],
        "user": settings["user"],
        "report": report.to_dict(),
    })
    write_run_config(_sidecar(settings["out"]), settings.resolved())


def cmd_personalize(args, settings: Settings) -> None:
    settings.require("plan", "out", "user")
    base, norm, extra = _load_checkpoint(settings)
    _, segments = _load(settings)
    plan = ds.SplitPlan.load(settings["plan"])
    fold = _fold(settings, plan)
    ids = fold.personalize.get(settings["user"])
    if ids is None:
        raise UsageError(f"user {settings['user']!r} has no personalization set in fold {settings['fold']}")
    by_id = {s.segment_id: s for s in segments}
    segs = [by_id[i] for i in ids]
    if norm is not None:
        segs = [norm.apply(s) for s in segs]
    cfg = settings.model
    # keep the checkpoint's architecture; take training settings from this run
    cfg = mdl.ModelConfig(**{**base.config.to_dict(), "learning_rate": cfg.learning_rate, "epochs": cfg.epochs,
                             "seed": cfg.seed, "clip_norm": cfg.clip_norm})
    tuned = mdl.personalize(base, cfg, segs)
    mdl.save_checkpoint(settings["out"], tuned, normalizer=extra.get("normalizer"), seed=cfg.seed,
                        config_hash=settings.hash(), user_id=settings["user"], base_checkpoint=str(settings["checkpoint"]))
    write_run_config(_sidecar(settings["out"]), settings.resolved())


def cmd_crossval(args, settings: Settings) -> None:
    settings.require("out")
    _, segments = _load(settings)
    if settings["plan"]:
        plan = ds.SplitPlan.load(settings["plan"])
        if args.mode is None:
            settings.values["mode"] = plan.kind
        _check_mode(args, settings, plan)
    else:
        _check_mode(args, settings)
        plan = protocol.build_plan(segments, settings["mode"], settings["k"], settings.model.seed,
                                   settings["fraction"])
    run = dict(settings.protocol_dict(), manifest=str(settings["manifest"]))
    out = Path(settings["out"])
    protocol.crossval(settings.model, segments, plan, pooled_baseline=bool(settings["pooled_baseline"]),
                      out_dir=out, extra=run)
    # the directory is the output; recording its path would make reruns differ
    resolved = settings.resolved()
    resolved.pop("out", None)
    write_run_config(out / "run.config", resolved)


COMMANDS = {
    "generate": cmd_generate,
    "describe": cmd_describe,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "personalize": cmd_personalize,
    "crossval": cmd_crossval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atlbp", description="Problem-outcome prediction from fused facial feature sequences.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *, model=True):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if model:
            p.add_argument("--manifest", help="dataset file (.jsonl or .jsonl.gz)")
            p.add_argument("--embedding-mode", choices=sorted(EMBEDDING_FLAG))
            p.add_argument("--hidden-units", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--learning-rate", type=float)
            p.add_argument("--target-fps", type=float)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g, model=False)
    g.add_argument("--spec", help="JSON file with synthetic spec fields")
    g.add_argument("--n-users", type=int)
    g.add_argument("--signal-strength", type=float)
    g.add_argument("--baseline-scale", type=float)
    g.add_argument("--noise-scale", type=float)

    d = sub.add_parser("describe", help="dataset summary counts")
    common(d, model=False)
    d.add_argument("--manifest")

    s = sub.add_parser("split", help="write a split plan")
    common(s)
    s.add_argument("--mode", choices=protocol.MODES)
    s.add_argument("--k", type=int)
    s.add_argument("--fraction", type=float)

    t = sub.add_parser("train", help="train one fold")
    common(t)
    t.add_argument("--plan")
    t.add_argument("--fold", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a fold")
    common(e)
    e.add_argument("--plan")
    e.add_argument("--fold", type=int)
    e.add_argument("--checkpoint")
    e.add_argument("--user")

    p = sub.add_parser("personalize", help="fine-tune a checkpoint for one test user")
    common(p)
    p.add_argument("--plan")
    p.add_argument("--fold", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--user")

    c = sub.add_parser("crossval", help="run every fold of a protocol")
    common(c)
    c.add_argument("--plan")
    c.add_argument("--mode", choices=protocol.MODES)
    c.add_argument("--k", type=int)
    c.add_argument("--fraction", type=float)
    c.add_argument("--pooled-baseline", action="store_true", default=None)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            args.embedding_mode = None
        settings = Settings(args)
        COMMANDS[args.command](args, settings)
    except AtlbpError as exc:
        print(f"atlbp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"atlbp {args.command}: DataError: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


def run_safe(argv=None) -> int:
    """Like :func:`run` but turns argparse exits into a return code."""
    try:
        return run(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1


def main() -> None:
    sys.exit(run_safe())


if __name__ == "__main__":
    main()

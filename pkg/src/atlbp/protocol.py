"""Cross-validation protocols: random k-fold, leave-users-out, and
leave-users-out with per-user personalization."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as ds
from . import metrics as mt
from . import model as mdl
from .errors import UsageError

log = logging.getLogger(__name__)

MODES = ("random", "leave-users-out", "leave-users-out-personalized")


def config_hash(*docs: dict) -> str:
    blob = json.dumps(docs, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("ATLBP_THREADS", "1")))
    except ValueError:
        raise UsageError("ATLBP_THREADS must be an integer") from None


def prepare(segments, target_fps: float | None):
    """Downsample every segment recorded above ``target_fps``."""
    if target_fps is None:
        return list(segments)
    return [ds.downsample(s, target_fps) if s.fps > target_fps else s for s in segments]


def build_plan(segments, mode: str, k: int = 5, seed: int = 0, fraction: float = 0.2) -> ds.SplitPlan:
    if mode == "random":
        return ds.random_kfold(segments, k, seed)
    if mode == "leave-users-out":
        return ds.leave_users_out(segments, k, seed)
    if mode == "leave-users-out-personalized":
        return ds.personalization_split(ds.leave_users_out(segments, k, seed), segments, fraction)
    raise UsageError(f"unknown mode {mode!r}; choose from {MODES}")


@dataclass
class FoldResult:
    index: int
    params: mdl.ModelParams
    normalizer: ds.Normalizer
    losses: list
    report: mt.EvalReport
    baseline: mt.EvalReport
    unpersonalized: mt.EvalReport | None = None
    pooled: mt.EvalReport | None = None
    plain: mt.EvalReport | None = None
    personal_params: dict = field(default_factory=dict)
    n_train: int = 0
    n_test: int = 0
    n_personalize: int = 0
    empty_eval_sessions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        total = self.n_train + self.n_test + self.n_personalize
        d = {
            "fold": self.index,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_personalize": self.n_personalize,
            "train_share": self.n_train / total if total else 0.0,
            "final_train_loss": self.losses[-1] if self.losses else None,
            "model": self.report.to_dict(),
            "predominant_label": self.baseline.to_dict(),
        }
        if self.unpersonalized is not None:
            d["unpersonalized"] = self.unpersonalized.to_dict()
        if self.plain is not None:
            d["plain_leave_users_out"] = self.plain.to_dict()
        if self.pooled is not None:
            d["mean_pool"] = self.pooled.to_dict()
        if self.empty_eval_sessions:
            d["empty_eval_sessions"] = self.empty_eval_sessions
        return d


def _evaluate(predict, segments, C) -> mt.EvalReport:
    truths = [s.label for s in segments]
    preds = [predict(s) for s in segments]
    return mt.EvalReport.from_predictions(truths, preds, C, users=[s.user_id for s in segments])


def run_fold(
    config: mdl.ModelConfig,
    by_id: dict,
    fold: ds.Fold,
    index: int = 0,
    pooled_baseline: bool = False,
) -> FoldResult:
    """Train on the fold's training set and evaluate on its test set.

    When the fold carries personalization sets, every test user gets a
    fine-tuned copy of the base model that is evaluated on that user's
    remaining segments.
    """
    C = config.num_classes
    train_raw = [by_id[i] for i in fold.train]
    norm = ds.fit_normalizer(train_raw)
    train = [norm.apply(s) for s in train_raw]
    test = [norm.apply(by_id[i]) for i in fold.test]
    result = mdl.train(config, train)
    base = result.params

    def base_predict(s):
        return mdl.predict(base, s)[0]

    const = mt.predominant_label_baseline([s.label for s in train])
    baseline = _evaluate(const.predict, test, C)
    pooled = None
    if pooled_baseline:
        clf = mt.mean_pool_baseline(config, train)
        pooled = _evaluate(clf.predict, test, C)

    n_pers = sum(len(v) for v in fold.personalize.values())
    if not fold.personalize:
        report = _evaluate(base_predict, test, C)
        return FoldResult(index, base, norm, result.losses, report, baseline, pooled=pooled,
                          n_train=len(train), n_test=len(test))

    personal = {}
    for user in sorted(fold.personalize):
        segs = [norm.apply(by_id[i]) for i in fold.personalize[user]]
        personal[user] = mdl.personalize(base, config, segs)
    truths, preds, users = [], [], []
    for s in test:
        truths.append(s.label)
        users.append(s.user_id)
        preds.append(mdl.predict(personal.get(s.user_id, base), s)[0])
    report = mt.EvalReport.from_predictions(truths, preds, C, users=users)
    unpersonalized = _evaluate(base_predict, test, C)
    # the base model on every segment of the test users, fine-tune ones
    # included: identical to what plain leave-users-out scores
    held = sorted(fold.test + [i for v in fold.personalize.values() for i in v])
    plain = _evaluate(base_predict, [norm.apply(by_id[i]) for i in held], C)
    return FoldResult(
        index, base, norm, result.losses, report, baseline, unpersonalized, pooled, plain, personal,
        n_train=len(train), n_test=len(test), n_personalize=n_pers,
        empty_eval_sessions=list(fold.empty_eval_sessions),
    )


def _summary(reports: list[mt.EvalReport]) -> dict:
    pooled_cm = sum(r.confusion for r in reports)
    pooled = mt.EvalReport.from_confusion(pooled_cm)
    return {
        "mean_of_folds": {
            "mean_f": float(np.mean([r.mean_f for r in reports])),
            "accuracy": float(np.mean([r.accuracy for r in reports])),
        },
        "pooled": {"mean_f": pooled.mean_f, "accuracy": pooled.accuracy, "confusion": pooled.confusion.tolist()},
    }


def aggregate(results: list[FoldResult]) -> dict:
    out = {
        "model": _summary([r.report for r in results]),
        "predominant_label": _summary([r.baseline for r in results]),
    }
    if all(r.unpersonalized is not None for r in results):
        out["unpersonalized"] = _summary([r.unpersonalized for r in results])
    if all(r.plain is not None for r in results):
        out["plain_leave_users_out"] = _summary([r.plain for r in results])
    if all(r.pooled is not None for r in results):
        out["mean_pool"] = _summary([r.pooled for r in results])
    return out


def crossval(
    config: mdl.ModelConfig,
    segments,
    plan: ds.SplitPlan,
    *,
    pooled_baseline: bool = False,
    threads: int | None = None,
    out_dir=None,
    extra: dict | None = None,
) -> tuple[dict, list[FoldResult]]:
    """Run every fold of ``plan``; returns the JSON report and fold results."""
    segments = list(segments)
    ds.check_plan(plan, segments)
    by_id = {s.segment_id: s for s in segments}
    threads = thread_cap() if threads is None else threads

    def job(i):
        log.info("fold %d/%d", i + 1, len(plan.folds))
        return run_fold(config, by_id, plan.folds[i], i, pooled_baseline)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(len(plan.folds))))
    else:
        results = [job(i) for i in range(len(plan.folds))]

    report = {
        "plan": {"kind": plan.kind, "k": plan.k, "seed": plan.seed, "fraction": plan.fraction},
        "plan_hash": config_hash(plan.to_dict()),
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict(), extra or {}),
        "kernel_backend": mdl.kernels.BACKEND,
        "folds": [r.to_dict() for r in results],
        "aggregate": aggregate(results),
    }
    if extra:
        report["run"] = extra
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            mdl.save_checkpoint(out / f"fold{r.index}.ckpt.json", r.params,
                                normalizer=r.normalizer.to_dict(), seed=config.seed,
                                config_hash=report["config_hash"])
            for user, p in sorted(r.personal_params.items()):
                mdl.save_checkpoint(out / f"fold{r.index}.{user}.ckpt.json", p,
                                    normalizer=r.normalizer.to_dict(), seed=config.seed,
                                    config_hash=report["config_hash"], user_id=user)
        plan.save(out / "plan.json")
        (out / "report.json").write_text(json.dumps(report, indent=1))
    return report, results

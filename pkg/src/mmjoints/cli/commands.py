"""Command implementations. Each command reads its inputs from a run directory,
checks that prerequisite artifacts were built from the same configuration and
writes its outputs atomically."""

from __future__ import annotations

import logging
import time

import numpy as np

from ..core import JOINT_NAMES, TABLE_ORDER, descriptor_targets, format_joint_type_table, tabulate_joint_types
from ..eval import (
    ACTIVITY_MODES,
    REFINE_MODES,
    ActivitySet,
    EnrichedSet,
    activity_downstream,
    build_activity_windows,
    descriptor_report,
    flip_joint_types,
    pose_report,
    refine_downstream,
)
from ..analysis import basis_comparison, covariance_study, held_out_margin
from ..latent import JointsPipeline
from ..simulator import ACTIVITIES, PoseEstimator, make_windows, simulate_records
from . import config as C
from .store import RunDirectory, stage_hash

log = logging.getLogger("mmjoints")

TRAIN_STAGES = ("estimator", "pose", "signal", "generator", "surrogate", "descriptor")
PREREQUISITES = {
    "estimator": ("dataset",),
    "pose": ("dataset",),
    "signal": ("pose",),
    "generator": ("signal",),
    "surrogate": ("generator", "estimator"),
    "descriptor": ("surrogate",),
}
PER_KIND = ("estimator", "surrogate", "descriptor")
REPORTS = ("describe", "refine", "recognize", "analyze")


class StageHashes:
    """Chained hash of every stage, computed from the configuration alone."""

    def __init__(self, cfg):
        self.cfg = cfg
        p = cfg["pipeline"]
        h = {"dataset": stage_hash("dataset", cfg["seed"], cfg["simulation"], cfg["radar"])}
        h["estimator"] = stage_hash("estimator", h["dataset"], cfg["estimator"], p["estimator_split"])
        h["pose"] = stage_hash("pose", h["dataset"], cfg["latent"], p["upstream_split"])
        h["signal"] = stage_hash("signal", h["pose"])
        h["generator"] = stage_hash("generator", h["signal"])
        h["surrogate"] = stage_hash("surrogate", h["generator"], h["estimator"], p["head_split"])
        h["descriptor"] = stage_hash("descriptor", h["surrogate"], cfg["describe"]["mode"])
        h["describe"] = stage_hash("describe", h["descriptor"], cfg["describe"]["splits"])
        h["refine"] = stage_hash("refine", h["describe"], cfg["downstream"])
        h["recognize"] = stage_hash("recognize", h["describe"], cfg["downstream"])
        h["analyze"] = stage_hash("analyze", h["generator"], cfg["analysis"])
        self.hashes = h

    def __getitem__(self, stage):
        return self.hashes[stage]


def ancestors(stage):
    """Every prerequisite of ``stage`` in dependency order, earliest first."""
    out = []
    for dep in PREREQUISITES.get(stage, ()):
        for a in ancestors(dep) + [dep]:
            if a not in out:
                out.append(a)
    return out


def artifact_name(stage, kind):
    return f"{stage}-{kind}" if stage in PER_KIND else stage


class Context:
    """Resolved configuration plus the run directory it writes to."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.run = RunDirectory(out)
        self.hashes = StageHashes(cfg)
        self.config_hash = C.config_hash(cfg)
        self.kind = cfg["estimator"]["kind"]
        self.K = cfg["latent"]["window"]
        self._records = None

    def meta(self, stage, **extra):
        return {"stage": stage, "stage_hash": self.hashes[stage], "config_hash": self.config_hash,
                "seed": self.cfg["seed"], "preset": self.cfg["preset"], **extra}

    # -- prerequisite checks -------------------------------------------------
    def require(self, stage):
        """Raise :class:`MissingDependencyError` unless ``stage`` exists and matches this config."""
        if stage == "dataset":
            if not self.run.exists("dataset/manifest.json"):
                raise C.MissingDependencyError("stage 'dataset' has not been run; run `mmjoints simulate` first")
            meta = self.run.read_json("dataset/manifest.json")
            hint = "`mmjoints simulate`"
        else:
            name = artifact_name(stage, self.kind)
            meta = self.run.checkpoint_meta(name)
            hint = f"`mmjoints train --stage {stage}`"
            if meta is None:
                raise C.MissingDependencyError(f"stage {stage!r} has not been run for this output directory; run {hint}")
        if meta.get("stage_hash") != self.hashes[stage]:
            raise C.MissingDependencyError(
                f"stage {stage!r} was built from a different configuration (hash mismatch); re-run {hint}")

    def is_current(self, stage, rel=None) -> bool:
        if rel is None:
            meta = self.run.checkpoint_meta(artifact_name(stage, self.kind))
        else:
            meta = self.run.read_json(rel) if self.run.exists(rel) else None
        return meta is not None and meta.get("stage_hash") == self.hashes[stage]

    # -- data ----------------------------------------------------------------
    def records(self):
        if self._records is None:
            self.require("dataset")
            _, self._records = self.run.read_dataset()
        return self._records

    def windows(self, split):
        return make_windows(self.records(), self.K, split)

    def estimator(self) -> PoseEstimator:
        self.require("estimator")
        return self.run.load_checkpoint(artifact_name("estimator", self.kind))[0]

    def pipeline(self, through="generator") -> JointsPipeline:
        self.require(through)
        return self.run.load_checkpoint(through)[0]

    def full_pipeline(self) -> JointsPipeline:
        self.require("descriptor")
        pl = self.run.load_checkpoint("generator")[0]
        pl.refiners[self.kind] = self.run.load_checkpoint(artifact_name("surrogate", self.kind))[0]
        pl.heads[self.kind] = self.run.load_checkpoint(artifact_name("descriptor", self.kind))[0]
        return pl


def _notice(msg):
    log.warning(msg)
    return {"status": "up-to-date", "message": msg}


# -- simulate ------------------------------------------------------------------
def cmd_simulate(ctx: Context, **_):
    if ctx.is_current("dataset", "dataset/manifest.json"):
        return _notice("dataset is up to date for this configuration; nothing to do")
    records = simulate_records(C.simulation_config(ctx.cfg), C.radar_config(ctx.cfg))
    ctx.run.write_dataset(records, ctx.meta("dataset"))
    log.info("wrote %d records", len(records))
    return {"status": "ok", "records": len(records)}


# -- train ---------------------------------------------------------------------
def _curve(values):
    return [float(v) for v in values]


def _train_stage(ctx: Context, stage):
    cfg, kind = ctx.cfg, ctx.kind
    for dep in ancestors(stage):
        ctx.require(dep)
    split = cfg["pipeline"]
    curves = {}
    if stage == "estimator":
        est = PoseEstimator(**C.estimator_kwargs(cfg))
        if kind == "RandomInit":
            est.fit()
        else:
            data = ctx.windows(split["estimator_split"])
            est.fit(data.windows, data.poses)
            curves["loss"] = _curve(est.history_)
        obj = est
    elif stage == "pose":
        data = ctx.windows(split["upstream_split"])
        obj = JointsPipeline(C.latent_hyperparams(cfg)).fit_pose(data.poses, data.points)
        curves["loss"] = [float(h[0]) for h in obj.vae_.history_]
        curves["opl"] = _curve(getattr(obj.vae_, "opl_history_", []))
    elif stage == "signal":
        obj = ctx.run.load_checkpoint("pose")[0]
        obj.fit_signal(ctx.windows(split["upstream_split"]).windows)
        curves["loss"] = _curve(obj.signal_.history_)
    elif stage == "generator":
        obj = ctx.run.load_checkpoint("signal")[0].fit_generator()
        curves["loss"] = _curve(obj.generator_.history_)
    else:
        pl = ctx.pipeline("generator")
        est = ctx.estimator()
        data = ctx.windows(split["head_split"])
        preds = est.predict(data.windows)
        if stage == "surrogate":
            obj = pl.fit_refiner(kind, preds, data.poses, data.windows)
        else:
            pl.refiners[kind] = ctx.run.load_checkpoint(artifact_name("surrogate", kind))[0]
            obj = pl.fit_descriptor(kind, preds, data.poses, data.windows, mode=cfg["describe"]["mode"])
        curves["loss"] = _curve(obj.history_)
        curves["best_epoch"] = int(obj.best_epoch_)
    name = artifact_name(stage, kind)
    ctx.run.save_checkpoint(name, obj, ctx.meta(stage, kind=kind if stage in PER_KIND else None))
    ctx.run.write_json(f"logs/{name}.curve.json", {**ctx.meta(stage), "curves": curves})
    return curves


def cmd_train(ctx: Context, stage=None, **_):
    """Run one stage, or every stage in dependency order when ``stage`` is ``None``."""
    if stage is not None and stage not in TRAIN_STAGES:
        raise C.ConfigError(f"unknown stage {stage!r}; expected one of {TRAIN_STAGES}")
    todo = TRAIN_STAGES if stage is None else (stage,)
    result = {}
    for s in todo:
        if ctx.is_current(s):
            result[s] = _notice(f"stage {s!r} is up to date for this configuration; nothing to do")
            continue
        t0 = time.perf_counter()
        _train_stage(ctx, s)
        log.info("trained stage %s in %.1fs", s, time.perf_counter() - t0)
        result[s] = {"status": "ok"}
    return result


# -- describe ------------------------------------------------------------------
def _enriched_rel(split, kind):
    return f"enriched/{split}-{kind}.ndjson"


def cmd_describe(ctx: Context, **_):
    rel = f"reports/describe-{ctx.kind}.json"
    if ctx.is_current("describe", rel):
        return _notice("enriched poses are up to date for this configuration; nothing to do")
    pl = ctx.full_pipeline()
    est = ctx.estimator()
    stats = pl.stats_
    report = {**ctx.meta("describe", kind=ctx.kind), "splits": {}}
    timing = {}
    for split in ctx.cfg["describe"]["splits"]:
        data = ctx.windows(split)
        preds = est.predict(data.windows) if len(data) else np.zeros((0, len(JOINT_NAMES), 3))
        rows, walls, joint_records = [], [], []
        for i in range(len(data)):
            enriched = pl.describe_frame(ctx.kind, preds[i], data.windows[i], int(data.frame_ids[i]))
            walls.append(enriched.meta["wall_time_s"])
            gt_xi, gt_kappa, psi, dist = descriptor_targets(preds[i], data.poses[i], data.windows[i][-1], stats)
            joint_records.extend(zip(psi.tolist(), dist.tolist()))
            rows.append({"clip_id": data.clip_ids[i], "frame_id": int(data.frame_ids[i]),
                         "activity": ACTIVITIES[data.labels[i]], "split": split,
                         "positions": enriched.positions, "xi": enriched.xi, "kappa": enriched.kappa,
                         "gt_pose": data.poses[i], "gt_xi": gt_xi, "gt_kappa": gt_kappa, "psi": psi})
        ctx.run.write_enriched(_enriched_rel(split, ctx.kind), ctx.meta("describe", kind=ctx.kind, split=split), rows)
        timing[split] = {"frames": len(walls), "mean_ms": 1e3 * float(np.mean(walls)) if walls else 0.0,
                         "max_ms": 1e3 * float(np.max(walls)) if walls else 0.0, "per_frame_s": walls}
        entry = {"records": len(rows), "frames_in_split": sum(1 for r in ctx.records() if r["split"] == split)}
        if rows:
            xi = np.array([r["xi"] for r in rows], dtype=float)
            kappa = np.array([r["kappa"] for r in rows], dtype=float)
            gx = np.array([r["gt_xi"] for r in rows])
            gk = np.array([r["gt_kappa"] for r in rows])
            entry["descriptors"] = descriptor_report(xi, kappa, gx, gk).as_dict()
            entry["pose"] = pose_report(preds, data.poses, stats.torso_bar).as_dict()
            counts = tabulate_joint_types(joint_records, stats)
            entry["joint_types"] = {jt.value: counts[jt] for jt in TABLE_ORDER}
        report["splits"][split] = entry
    ctx.run.write_json(rel, report)
    # wall times vary between runs and live apart from the deterministic artifacts
    ctx.run.write_json(f"logs/describe-{ctx.kind}.timing.json", timing)
    return {"status": "ok", "latency_ms": {s: t["mean_ms"] for s, t in timing.items()}}


def _load_enriched(ctx: Context, split):
    if split not in ctx.cfg["describe"]["splits"]:
        raise C.ConfigError(f"split {split!r} is not listed in describe.splits")
    rel = f"reports/describe-{ctx.kind}.json"
    if not ctx.is_current("describe", rel):
        raise C.MissingDependencyError("stage 'describe' is missing or stale; run `mmjoints describe` first")
    _, rows = ctx.run.read_enriched(_enriched_rel(split, ctx.kind), f"enriched {split} poses")
    return rows


def _stack(rows, key):
    return np.array([r[key] for r in rows], dtype=float)


# -- refine --------------------------------------------------------------------
def cmd_refine(ctx: Context, **_):
    rel = f"reports/refine-{ctx.kind}.json"
    if ctx.is_current("refine", rel):
        return _notice("refinement report is up to date; nothing to do")
    d = ctx.cfg["downstream"]
    sets = {}
    for role in ("train", "test"):
        rows = _load_enriched(ctx, d[f"{role}_split"])
        sets[role] = EnrichedSet(_stack(rows, "positions"), _stack(rows, "gt_pose"), _stack(rows, "xi"),
                                 _stack(rows, "kappa"))
    report = {**ctx.meta("refine", kind=ctx.kind), "modes": {}}
    for mode in REFINE_MODES:
        out = refine_downstream(sets["train"], sets["test"], mode, epochs=d["refine_epochs"], seed=ctx.cfg["seed"])
        report["modes"][mode] = {"before": out["before"].as_dict(), "after": out["after"].as_dict(),
                                 "history": out["history"]}
    ctx.run.write_json(rel, report)
    return {"status": "ok"}


# -- recognize -----------------------------------------------------------------
def _activity_set(rows, T):
    if not rows:
        raise C.MissingDependencyError("no enriched records to build activity windows from")
    gt = _stack(rows, "gt_pose")
    pos = _stack(rows, "positions")
    arrays = {"poses": pos, "xi": _stack(rows, "xi"), "kappa": _stack(rows, "kappa"), "gt_xi": _stack(rows, "gt_xi"),
              "gt_kappa": _stack(rows, "gt_kappa"), "psi": _stack(rows, "psi"),
              "dist": np.linalg.norm(pos - gt, axis=2)}
    labels = np.array([ACTIVITIES.index(r["activity"]) for r in rows])
    y, w = build_activity_windows([r["clip_id"] for r in rows], [r["frame_id"] for r in rows], labels, arrays, T)
    data = ActivitySet(w["poses"], y, w["xi"], w["kappa"], w["gt_xi"], w["gt_kappa"])
    return data, w["psi"][:, -1], w["dist"][:, -1]


def cmd_recognize(ctx: Context, **_):
    rel = f"reports/recognize-{ctx.kind}.json"
    if ctx.is_current("recognize", rel):
        return _notice("recognition report is up to date; nothing to do")
    d = ctx.cfg["downstream"]
    train, _, _ = _activity_set(_load_enriched(ctx, d["train_split"]), d["activity_window"])
    test, psi, dist = _activity_set(_load_enriched(ctx, d["test_split"]), d["activity_window"])
    report = {**ctx.meta("recognize", kind=ctx.kind), "modes": {}}
    preds = {}
    for mode in ACTIVITY_MODES:
        out = activity_downstream(train, test, mode, n_classes=len(ACTIVITIES), epochs=d["activity_epochs"],
                                  seed=ctx.cfg["seed"])
        preds[mode] = out["predictions"]
        report["modes"][mode] = {"accuracy": out["accuracy"],
                                 "per_activity": {ACTIVITIES[c]: a for c, a in out["per_activity"].items()}}
    stats = ctx.pipeline("generator").stats_
    counts, n = flip_joint_types(preds["pose_only"], preds["pose+xi+kappa"], test.labels, psi, dist, stats)
    report["flipped_windows"] = {"count": n, "joint_types": {jt.value: counts[jt] for jt in TABLE_ORDER}}
    ctx.run.write_json(rel, report)
    return {"status": "ok"}


# -- analyze -------------------------------------------------------------------
def cmd_analyze(ctx: Context, **_):
    rel = "reports/analyze.json"
    if ctx.is_current("analyze", rel):
        return _notice("analysis report is up to date; nothing to do")
    a, seed = ctx.cfg["analysis"], ctx.cfg["seed"]
    pl = ctx.pipeline("generator")
    up = ctx.windows(ctx.cfg["pipeline"]["upstream_split"])
    test = ctx.windows("test")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(up), size=min(a["n_poses"], len(up)), replace=False))
    cov = covariance_study(up.poses[pick], a["n_samples"], a["n_pairs"], a["n_boot"], seed, C.radar_config(ctx.cfg))
    report = {**ctx.meta("analyze"),
              "covariance": {"instance": {"mean": cov.instance.mean, "hist": cov.instance.hist,
                                          "edges": cov.instance.edges},
                             "distribution": {"mean": cov.distribution.mean, "hist": cov.distribution.hist,
                                              "edges": cov.distribution.edges},
                             "distribution_stronger": cov.distribution_stronger}}
    if len(test):
        report["basis"] = basis_comparison(pl.vae_.transform(test.poses), pl.basis_, seed=seed)
        mu_s, _ = pl.encode_windows(test.windows)
        report["signal_margin"] = held_out_margin(mu_s, test.labels, a["margin_triples"], seed)
    ctx.run.write_json(rel, report)
    return {"status": "ok"}


# -- report --------------------------------------------------------------------
def expected_reports(kind):
    return {"describe": f"reports/describe-{kind}.json", "refine": f"reports/refine-{kind}.json",
            "recognize": f"reports/recognize-{kind}.json", "analyze": "reports/analyze.json",
            "dataset": "dataset/manifest.json"}


def cmd_report(ctx: Context, **_):
    paths = expected_reports(ctx.kind)
    missing = [p for p in paths.values() if not ctx.run.exists(p)]
    if missing:
        raise C.MissingDependencyError("missing artifacts: " + ", ".join(missing))
    docs = {k: ctx.run.read_json(p) for k, p in paths.items()}
    stale = [k for k, doc in docs.items() if doc.get("stage_hash") != ctx.hashes["dataset" if k == "dataset" else k]]
    if stale:
        raise C.MissingDependencyError("artifacts built from a different configuration: " + ", ".join(stale))
    ctx.run.write_text("reports/summary.md", render_summary(ctx, docs))
    return {"status": "ok"}


def _fmt(v, digits=2):
    return "n/a" if v is None else f"{v:.{digits}f}"


def render_summary(ctx: Context, docs) -> str:
    kind = ctx.kind
    lines = [f"# mmjoints run summary ({kind})", "",
             f"- config hash: `{ctx.config_hash}`", f"- seed: {ctx.cfg['seed']}", f"- preset: {ctx.cfg['preset']}",
             f"- frames: {docs['dataset']['n_frames']} in {docs['dataset']['n_clips']} clips", "",
             "## Descriptor estimation", "", "| split | MPJPE (cm) | wMAPE xi | wMAPE kappa | sMAPE xi | sMAPE kappa |",
             "|---|---|---|---|---|---|"]
    joint_rows = {}
    for split, e in docs["describe"]["splits"].items():
        if "descriptors" not in e:
            continue
        dsc, pose = e["descriptors"], e["pose"]
        lines.append(f"| {split} | {_fmt(pose['mpjpe'])} | {_fmt(dsc['wmape_xi'])} | {_fmt(dsc['wmape_kappa'])} | "
                     f"{_fmt(dsc['smape_xi'])} | {_fmt(dsc['smape_kappa'])} |")
        joint_rows[f"{kind}/{split}"] = {jt: e["joint_types"][jt.value] for jt in TABLE_ORDER}
    lines += ["", "## Joint types", "", "```", format_joint_type_table(joint_rows).rstrip(), "```", "",
              "## Downstream refinement", "", "| mode | MPJPE before | MPJPE after | PCK@0.5 after |", "|---|---|---|---|"]
    for mode in REFINE_MODES:
        r = docs["refine"]["modes"][mode]
        lines.append(f"| {mode} | {_fmt(r['before']['mpjpe'])} | {_fmt(r['after']['mpjpe'])} | "
                     f"{_fmt(r['after']['pck05'])} |")
    lines += ["", "## Activity recognition", "", "| mode | accuracy (%) |", "|---|---|"]
    for mode in ACTIVITY_MODES:
        lines.append(f"| {mode} | {_fmt(docs['recognize']['modes'][mode]['accuracy'])} |")
    an = docs["analyze"]
    cov = an["covariance"]
    lines += ["", "## Analyses", "",
              f"- mean |Cov| instance study: {_fmt(cov['instance']['mean'], 4)}",
              f"- mean |Cov| distribution study: {_fmt(cov['distribution']['mean'], 4)}"]
    if "basis" in an:
        b = an["basis"]
        lines += [f"- basis reconstruction error: learned {_fmt(b['learned_error'], 4)}, "
                  f"random {_fmt(b['random_error'], 4)}, ratio {_fmt(b['ratio'])}",
                  f"- largest |cosine| between learned basis vectors: {_fmt(b['max_abs_cosine'], 4)}",
                  f"- held-out signal margin difference: {_fmt(an['signal_margin'], 4)}"]
    return "\n".join(lines) + "\n"


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "describe": cmd_describe,
    "refine": cmd_refine,
    "recognize": cmd_recognize,
    "analyze": cmd_analyze,
    "report": cmd_report,
}

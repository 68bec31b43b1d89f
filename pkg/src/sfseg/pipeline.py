"""Stage orchestration over one output directory.

Layout of a run directory::

    data/         generated datasets (target sets carry no labels; test labels
                  and target-train labels for scoring live under data/eval/)
    selection/    baseline selection report (JSON + table)
    checkpoints/  baseline, vendor_<routing>, cpae, adapted_<variant>, online_<variant>
    pseudo/       final-round pseudo-labels of the main variant
    reports/      loss curves, round reports, metrics.json, tables and plots
    manifest.json stage records: config hash, inputs, outputs, wall time
"""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np
import torch

from . import adapt as adapt_mod
from .augment import default_candidates
from .augselect import bind_heads, select_augmentations, train_baseline
from .checkpoint import load_checkpoint, load_cpae_for, read_payload, save_checkpoint
from .config import ExperimentConfig
from .cpae import cpae_train, for_soman
from .errors import ConfigError, DependencyError, LockError
from .evaluate import evaluate_model, head_matrix
from .soman import SomanModel, class_weights_from_labels, init_from_baseline, vendor_train
from .synthdata import CLASS_NAMES_8, Dataset, derive_seed, load_dataset, make_shifted_domain, save_dataset

log = logging.getLogger(__name__)

STAGES = ("generate", "select-ags", "vendor-train", "cpae-train", "adapt", "adapt-online", "evaluate", "report")
VENDOR_SECTIONS = ("seed", "data", "selection", "routings", "training")
VENDOR_STAGES = ("generate", "select-ags", "vendor-train", "cpae-train")
SINGLE = "single"
CPAE_VARIANT = "LOpp_cPAE"

# sample-seed offsets per dataset split
_SPLITS = {"source_train": 1, "source_val": 2, "target_train": 4, "target_test": 5,
           "online_train": 6, "online_test": 7}


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False))


def _clean(v):
    """JSON-safe copy: NaN -> None, numpy scalars -> Python."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


class Run:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, resume=False):
        self.cfg = cfg
        self.root = Path(out_dir or cfg.output_dir)
        self.resume = resume
        self.full_hash = cfg.hash()
        d = cfg.to_dict()
        self.vendor_hash = ExperimentConfig.hash_of({k: d[k] for k in VENDOR_SECTIONS})
        self.manifest_path = self.root / "manifest.json"
        self._lock = self.root / ".lock"
        self.manifest = {"format": "sfseg-run/1", "config_hash": self.full_hash, "stages": {}, "lineage": []}

    # -- locking and manifest
    def __enter__(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"{self.root} is locked by another run (remove {self._lock} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            self.manifest["stages"] = old.get("stages", {})
            self.manifest["lineage"] = old.get("lineage", [])
        (self.root / "config.json").write_text(self.cfg.to_json())
        return self

    def __exit__(self, *exc):
        self._lock.unlink(missing_ok=True)
        return False

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def require(self, stage, *paths):
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise DependencyError(", ".join(missing), stage)

    def stage_hash(self, stage):
        # vendor-side stages only depend on the vendor sections of the config
        return self.vendor_hash if stage in VENDOR_STAGES else self.full_hash

    def done(self, stage):
        rec = self.manifest["stages"].get(stage)
        if not (self.resume and rec and rec["config_hash"] == self.stage_hash(stage)):
            return False
        return all(self.path(o).exists() for o in rec["outputs"])

    def record(self, stage, inputs, outputs, wall):
        rel = lambda p: str(Path(p).relative_to(self.root))
        self.manifest["stages"][stage] = {
            "config_hash": self.stage_hash(stage), "inputs": sorted(rel(p) for p in inputs),
            "outputs": sorted(rel(p) for p in outputs), "wall_time_s": round(wall, 3)}
        self.manifest["config_hash"] = self.full_hash
        _dump(self.manifest_path, self.manifest)

    # -- artifacts
    def data_dir(self, split):
        return self.path("data", split)

    def labels_file(self, split):
        return self.path("data", "eval", f"{split}_labels.npy")

    def ckpt(self, name):
        return self.path("checkpoints", f"{name}.pt")

    def report(self, name):
        return self.path("reports", name)

    def load_split(self, stage, split, labels=True):
        self.require(stage, self.data_dir(split) / "index.json")
        return load_dataset(self.data_dir(split), labels=labels)

    def load_labels(self, split):
        f = self.labels_file(split)
        return np.load(f) if f.exists() else None

    def vendor_variants(self):
        """Names of vendor-side models in ablation order."""
        return [SINGLE] + list(self.cfg.routings)

    def adapt_variants(self):
        """Adapted models: every vendor model, plus LO++ self-trained on cPAE-refined maps."""
        extra = [CPAE_VARIANT] if "LOpp" in self.cfg.routings and self.cfg.adaptation.use_cpae else []
        return self.vendor_variants() + extra

    def vendor_ckpt(self, name):
        name = "LOpp" if name == CPAE_VARIANT else name
        return self.ckpt("baseline" if name == SINGLE else f"vendor_{name}")

    def main_variant(self):
        return self.adapt_variants()[-1]

    def seed(self, split):
        return derive_seed(self.cfg.seed, _SPLITS[split])


# ------------------------------------------------------------ stages

def stage_generate(run: Run):
    cfg = run.cfg.data
    base = cfg.spec
    target = make_shifted_domain(base, cfg.target_gamma, shift_seed=cfg.target_shift_seed)
    online = make_shifted_domain(base, cfg.online_gamma, shift_seed=cfg.online_shift_seed)
    plan = [("source_train", base, cfg.n_source_train, True), ("source_val", base, cfg.n_source_val, True),
            ("target_train", target, cfg.n_target_train, False), ("target_test", target, cfg.n_target_test, True)]
    if run.cfg.online:
        plan += [("online_train", online, cfg.n_target_train, False), ("online_test", online, cfg.n_target_test, True)]
    outputs = []
    for split, spec, n, labeled in plan:
        ds = Dataset.generate(spec, n, run.seed(split))
        ds.labels = ds.labels.astype(np.uint8)
        save_dataset(run.data_dir(split), ds, run.seed(split), with_labels=labeled, extra={"split": split})
        outputs.append(run.data_dir(split) / "index.json")
        if not labeled:
            # kept apart so the client path never sees them; used for scoring only
            run.labels_file(split).parent.mkdir(parents=True, exist_ok=True)
            np.save(run.labels_file(split), ds.labels)
            outputs.append(run.labels_file(split))
    return [], outputs


def _candidates(cfg):
    by_name = {a.name: a for a in default_candidates()}
    return [by_name[n] for n in cfg.selection.candidates]


def stage_select(run: Run):
    cfg = run.cfg
    src = run.load_split("select-ags", "source_train")
    val = run.load_split("select-ags", "source_val")
    tcfg = cfg.training.baseline.train_config(cfg.seed)
    base = train_baseline(src, tcfg, cfg.training.architecture(), cfg.data.spec.num_classes)
    save_checkpoint(run.ckpt("baseline"), base, run.vendor_hash, {"train": tcfg.to_dict()})
    report = select_augmentations(base, _candidates(cfg), val, cfg.selection.tau, derive_seed(cfg.seed, 17))
    _dump(run.path("selection", "report.json"), report.to_dict())
    run.path("selection", "table.txt").write_text(report.to_table())
    log.info("selection:\n%s", report.to_table())
    inputs = [run.data_dir(s) / "index.json" for s in ("source_train", "source_val")]
    return inputs, [run.ckpt("baseline"), run.path("selection", "report.json"), run.path("selection", "table.txt")]


def _selected_ags(run, stage):
    from .augselect import SelectionReport
    f = run.path("selection", "report.json")
    run.require(stage, f)
    report = SelectionReport.from_dict(json.loads(f.read_text()))
    ags = bind_heads(report, default_candidates(), run.cfg.selection.max_k)
    if not ags:
        raise ConfigError("selection.tau", "no augmentation group was admitted; vendor training needs K >= 1")
    return ags


def _subsample(curve, n=200):
    step = max(1, len(curve) // n)
    return curve[::step]


def stage_vendor(run: Run):
    cfg = run.cfg
    src = run.load_split("vendor-train", "source_train")
    run.require("vendor-train", run.ckpt("baseline"))
    base, _ = load_checkpoint(run.ckpt("baseline"), "soman", run.vendor_hash)
    ags = _selected_ags(run, "vendor-train")
    arch = cfg.training.architecture()
    cw = base.class_weights.numpy()
    outputs = []
    for routing in cfg.routings:
        k = 0 if routing == "ERM" else len(ags)
        model = SomanModel(cfg.data.spec.num_classes, k, routing, [a.id for a in ags] if k else (), arch, cw,
                           seed=cfg.seed)
        init_from_baseline(model, base)
        tcfg = cfg.training.vendor.train_config(cfg.seed)
        recs, _ = vendor_train(model, src, tcfg.iters, tcfg, ags)
        model.lineage.append({"stage": "vendor-train", "routing": routing, "ags": [a.name for a in ags]})
        save_checkpoint(run.vendor_ckpt(routing), model, run.vendor_hash,
                        {"train": tcfg.to_dict(), "ags": [a.to_dict() for a in ags]})
        curves = {}
        for r in recs:
            for h, v in r["losses"].items():
                curves.setdefault(h, []).append([r["step"], v])
        _dump(run.report(f"vendor_{routing}_losses.json"), {h: _subsample(c) for h, c in curves.items()})
        outputs += [run.vendor_ckpt(routing), run.report(f"vendor_{routing}_losses.json")]
    if cfg.training.ksweep_iters > 0:
        outputs.append(_ksweep(run, src, base, ags))
    inputs = [run.data_dir("source_train") / "index.json", run.ckpt("baseline"), run.path("selection", "report.json")]
    return inputs, outputs


def _ksweep(run, src, base, ags):
    """ERM vendor models trained on the first k admitted groups, k = 0..K, scored on source val."""
    cfg = run.cfg
    val = run.load_split("vendor-train", "source_val")
    rows = []
    for k in range(len(ags) + 1):
        m = SomanModel(cfg.data.spec.num_classes, 0, "ERM", (), cfg.training.architecture(),
                       base.class_weights.numpy(), seed=cfg.seed)
        init_from_baseline(m, base)
        tcfg = cfg.training.vendor.train_config(cfg.seed)
        tcfg.iters = cfg.training.ksweep_iters
        vendor_train(m, src, tcfg.iters, tcfg, ags[:k])
        # score on the val set pushed through every admitted group
        scores = []
        from .augselect import augmented_val
        for ag in ags:
            imgs, labs = augmented_val(ag, val, derive_seed(cfg.seed, 23))
            scores.append(evaluate_model(m, imgs, labs).miou)
        rows.append({"k": k, "ags": [a.name for a in ags[:k]], "miou": float(np.mean(scores))})
    out = run.report("ksweep.json")
    _dump(out, rows)
    return out


def stage_cpae(run: Run):
    cfg = run.cfg
    src = run.load_split("cpae-train", "source_train")
    ck = run.vendor_ckpt("LOpp")
    run.require("cpae-train", ck)
    soman, payload = load_checkpoint(ck, "soman", run.vendor_hash)
    from .augment import AugmentationGroup
    ags = [AugmentationGroup.from_dict(a) for a in payload["extra"]["ags"]]
    q = for_soman(soman, cfg.training.cpae_width, seed=cfg.seed)
    tcfg = cfg.training.cpae.train_config(cfg.seed)
    losses = cpae_train(q, soman, src, tcfg.iters, tcfg, ags)
    save_checkpoint(run.ckpt("cpae"), q, run.vendor_hash, {"train": tcfg.to_dict(), "paired": "vendor_LOpp"})
    _dump(run.report("cpae_losses.json"), _subsample([[i + 1, v] for i, v in enumerate(losses)]))
    return [run.data_dir("source_train") / "index.json", ck], [run.ckpt("cpae"), run.report("cpae_losses.json")]


def _load_cpae(run, stage, soman, needed):
    if not needed:
        return None
    run.require(stage, run.ckpt("cpae"))
    q, _ = load_cpae_for(run.ckpt("cpae"), soman, run.vendor_hash)
    return q


def stage_adapt(run: Run, variants=None):
    """Client side: reads only target images and vendor checkpoints (labels only for scoring)."""
    cfg = run.cfg
    stage = "adapt"
    target = run.load_split(stage, "target_train", labels=False)
    gt = run.load_labels("target_train")
    variants = variants or run.adapt_variants()
    for v in variants:
        run.require(stage, run.vendor_ckpt(v))
    acfg = cfg.adaptation.adapt_config(cfg.seed)
    inputs = [run.data_dir("target_train") / "index.json"]
    outputs = []
    for v in variants:
        model, _ = load_checkpoint(run.vendor_ckpt(v), "soman", run.vendor_hash)
        q = _load_cpae(run, stage, model, v == CPAE_VARIANT)
        inputs += [run.vendor_ckpt(v)] + ([run.ckpt("cpae")] if q is not None else [])
        adapted, reports = adapt_mod.adapt(model, q, target.images, cfg=acfg, target_labels=gt)
        save_checkpoint(run.ckpt(f"adapted_{v}"), adapted, run.full_hash, {"source": run.vendor_ckpt(v).name})
        _dump(run.report(f"adapt_{v}.json"), _clean([r.to_dict() for r in reports]))
        outputs += [run.ckpt(f"adapted_{v}"), run.report(f"adapt_{v}.json")]
        if v == run.main_variant():
            outputs.append(_save_pseudo(run, adapted, q, target.images, acfg, "target_train"))
    return inputs, outputs


def _save_pseudo(run, model, q, images, acfg, split):
    """Pseudo-labels the adapted model would hand to a further round."""
    head = adapt_mod.inference_head(model)
    pl = adapt_mod.extract_pseudo_labels(model, head, q, images, acfg.retain_fraction, acfg.rounds + 1)
    root = run.path("pseudo", split)
    save_dataset(root, Dataset(images, pl.labels.astype(np.uint8)), extra={"provenance": _clean(pl.provenance())})
    return root / "index.json"


def stage_online(run: Run):
    cfg = run.cfg
    stage = "adapt-online"
    v = run.main_variant()
    src_ck = run.ckpt(f"adapted_{v}")
    run.require(stage, src_ck)
    target = run.load_split(stage, "online_train", labels=False)
    gt = run.load_labels("online_train")
    model, _ = load_checkpoint(src_ck, "soman", run.full_hash)
    acfg = cfg.adaptation.adapt_config(cfg.seed + 1)
    q = _load_cpae(run, stage, model, v == CPAE_VARIANT)
    adapted, reports = adapt_mod.adapt_online(model, q, target.images, cfg=acfg, target_labels=gt)
    save_checkpoint(run.ckpt(f"online_{v}"), adapted, run.full_hash, {"source": src_ck.name})
    _dump(run.report("online.json"), _clean([r.to_dict() for r in reports]))
    run.manifest["lineage"] = [{"checkpoint": run.ckpt(f"online_{v}").name, "chain": adapted.lineage}]
    inputs = [src_ck, run.data_dir("online_train") / "index.json"] + ([run.ckpt("cpae")] if q is not None else [])
    return inputs, [run.ckpt(f"online_{v}"), run.report("online.json")]


def stage_evaluate(run: Run):
    cfg = run.cfg
    stage = "evaluate"
    test = run.load_split(stage, "target_test")
    scales = tuple(cfg.eval.scales)
    groups = cfg.eval.groups
    names = list(CLASS_NAMES_8) if cfg.data.spec.num_classes == 8 else None
    metrics = {"config_hash": run.full_hash, "target": {}, "per_head": {}, "adaptation": {}}
    inputs = [run.data_dir("target_test") / "index.json"]
    for v in run.adapt_variants():
        run.require(stage, run.vendor_ckpt(v), run.ckpt(f"adapted_{v}"))
        vendor, _ = load_checkpoint(run.vendor_ckpt(v), "soman", run.vendor_hash)
        adapted, _ = load_checkpoint(run.ckpt(f"adapted_{v}"), "soman", run.full_hash)
        head = adapt_mod.inference_head(adapted)
        inputs += [run.vendor_ckpt(v), run.ckpt(f"adapted_{v}")]
        metrics["target"][v] = {
            "head": head,
            "vendor": evaluate_model(vendor, test.images, test.labels, "g", scales, None, groups, names).to_dict(),
            "vendor_selected_head": evaluate_model(vendor, test.images, test.labels, head, scales, None, groups,
                                                   names).to_dict(),
            "adapted": evaluate_model(adapted, test.images, test.labels, head, scales, None, groups, names).to_dict(),
        }
        if cfg.adaptation.infer_cpae and v in ("LOpp", CPAE_VARIANT) and v == run.main_variant():
            q = _load_cpae(run, stage, adapted, True)
            metrics["target"][v]["adapted_cpae"] = evaluate_model(adapted, test.images, test.labels, head, scales, q,
                                                                  groups, names).to_dict()
        if vendor.K and v in run.vendor_variants():
            metrics["per_head"][v] = head_matrix(vendor, {"target_test": (test.images, test.labels)})["target_test"]
        rep = run.report(f"adapt_{v}.json")
        if rep.exists():
            metrics["adaptation"][v] = json.loads(rep.read_text())
    if cfg.online:
        v = run.main_variant()
        run.require(stage, run.ckpt(f"online_{v}"))
        otest = run.load_split(stage, "online_test")
        models = {"vendor": load_checkpoint(run.vendor_ckpt(v), "soman", run.vendor_hash)[0],
                  "adapted_target": load_checkpoint(run.ckpt(f"adapted_{v}"), "soman", run.full_hash)[0],
                  "online": load_checkpoint(run.ckpt(f"online_{v}"), "soman", run.full_hash)[0]}
        # the vendor row uses the head the online stage settled on, for a like-for-like comparison
        head = adapt_mod.inference_head(models["online"])
        metrics["online"] = {"variant": v, "head": head, "lineage": models["online"].lineage}
        for k, m in models.items():
            h = head if k != "adapted_target" else adapt_mod.inference_head(m)
            metrics["online"][k] = evaluate_model(m, otest.images, otest.labels, h, scales, None, groups,
                                                  names).to_dict()
        inputs += [run.ckpt(f"online_{v}"), run.data_dir("online_test") / "index.json"]
    out = run.report("metrics.json")
    _dump(out, _clean(metrics))
    return inputs, [out]


def stage_report(run: Run):
    from .report import render_report
    return render_report(run)


_STAGE_FUNCS = {
    "generate": stage_generate, "select-ags": stage_select, "vendor-train": stage_vendor,
    "cpae-train": stage_cpae, "adapt": stage_adapt, "adapt-online": stage_online,
    "evaluate": stage_evaluate, "report": stage_report,
}


def planned_stages(cfg: ExperimentConfig):
    out = []
    for s in STAGES:
        if s == "cpae-train" and "LOpp" not in cfg.routings:
            continue
        if s == "adapt-online" and not cfg.online:
            continue
        out.append(s)
    return out


def run_stages(cfg: ExperimentConfig, stages, out_dir=None, resume=False, **kwargs):
    """Execute ``stages`` in order; returns the manifest."""
    torch.use_deterministic_algorithms(True)
    for s in stages:
        if s not in _STAGE_FUNCS:
            raise ConfigError("stage", f"unknown stage {s!r}; expected one of {STAGES}")
    with Run(cfg, out_dir, resume) as run:
        for s in stages:
            if run.done(s):
                log.info("stage %s: up to date, skipped", s)
                continue
            t0 = time.perf_counter()
            fn = _STAGE_FUNCS[s]
            inputs, outputs = fn(run, **kwargs) if (s == "adapt" and kwargs) else fn(run)
            run.record(s, inputs, outputs, time.perf_counter() - t0)
            log.info("stage %s finished in %.1fs", s, time.perf_counter() - t0)
        return run.manifest

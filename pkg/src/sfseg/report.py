"""Tables, CSV and plots for a finished run directory."""
from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DependencyError  # noqa: E402

ROW_NAMES = {"single": "single-source", "ERM": "ERM", "DEpp": "DE++", "LOpp": "LO++", "LOpp_cPAE": "LO++ w/ cPAE"}


def flatten(obj, prefix=""):
    """(dotted key, leaf) pairs in sorted key order."""
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from flatten(obj[k], f"{prefix}{k}.")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], obj


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_cell(s):
    """Inverse of the CSV cell encoding for numeric leaves."""
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def ablation_rows(metrics):
    rows = []
    for v, m in metrics["target"].items():
        rows.append([ROW_NAMES.get(v, v), m["head"], m["vendor"]["miou"], m["adapted"]["miou"]])
        if "adapted_cpae" in m:
            rows.append([ROW_NAMES.get(v, v) + " +cPAE inference", m["head"], m["vendor"]["miou"],
                         m["adapted_cpae"]["miou"]])
    return rows


def _fmt_table(header, rows):
    cells = [[_cell(c) if not isinstance(c, float) else f"{c:.4f}" for c in r] for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in cells)) for i, h in enumerate(header)]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in cells]) + "\n"


def render_report(run):
    needed = {
        "evaluate": run.report("metrics.json"),
        "select-ags": run.path("selection", "report.json"),
    }
    missing = [f"{stage}: {p}" for stage, p in needed.items() if not p.exists()]
    if missing:
        raise DependencyError("; ".join(missing), "report")
    metrics = json.loads(needed["evaluate"].read_text())
    sel = json.loads(needed["select-ags"].read_text())
    outputs = []

    # everything in metrics.json, one leaf per row
    flat = run.report("metrics.csv")
    write_csv(flat, ["key", "value"], [[k, _cell(v)] for k, v in flatten(metrics)])
    outputs.append(flat)

    header = ["model", "head", "vendor_miou", "adapted_miou"]
    rows = ablation_rows(metrics)
    write_csv(run.report("ablation.csv"), header, [[_cell(c) for c in r] for r in rows])
    run.report("ablation.txt").write_text(_fmt_table(header, rows))
    outputs += [run.report("ablation.csv"), run.report("ablation.txt")]

    ph_rows = [[ROW_NAMES.get(v, v), h, m] for v, heads in metrics["per_head"].items() for h, m in heads.items()]
    write_csv(run.report("per_head.csv"), ["model", "head", "target_miou"], [[_cell(c) for c in r] for r in ph_rows])
    run.report("per_head.txt").write_text(_fmt_table(["model", "head", "target_miou"], ph_rows))
    outputs += [run.report("per_head.csv"), run.report("per_head.txt")]

    # risk gaps with the admission threshold
    cands = sorted(sel["candidates"], key=lambda c: sel["diversity_order"].index(c["ag_id"]))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar([c["name"] for c in cands], [c["risk_gap"] for c in cands],
           color=["tab:blue" if c["selected"] else "tab:gray" for c in cands])
    ax.axhline(sel["tau"], color="tab:red", ls="--", label=f"tau = {sel['tau']:.2f}")
    ax.set_ylabel("risk gap (mIoU drop)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(run.report("risk_gap.png"), dpi=100)
    plt.close(fig)
    outputs.append(run.report("risk_gap.png"))

    ks = run.report("ksweep.json")
    if ks.exists():
        rows = json.loads(ks.read_text())
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot([r["k"] for r in rows], [r["miou"] for r in rows], "o-")
        ax.set_xlabel("K (admitted groups used)")
        ax.set_ylabel("mIoU on augmented val")
        fig.tight_layout()
        fig.savefig(run.report("ksweep.png"), dpi=100)
        plt.close(fig)
        write_csv(run.report("ksweep.csv"), ["k", "miou"], [[r["k"], _cell(r["miou"])] for r in rows])
        outputs += [run.report("ksweep.png"), run.report("ksweep.csv")]

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    round_rows = []
    for v, reps in metrics.get("adaptation", {}).items():
        xs = [r["round"] for r in reps]
        ys = [r["pseudo_miou"] for r in reps]
        round_rows += [[v, r["round"], _cell(r["pseudo_miou"]), _cell(r["avg_entropy"])] for r in reps]
        if all(y is not None for y in ys):
            ax.plot(xs, ys, "o-", label=ROW_NAMES.get(v, v))
    ax.set_xlabel("round")
    ax.set_ylabel("pseudo-label mIoU (retained pixels)")
    if round_rows:
        ax.legend()
    fig.tight_layout()
    fig.savefig(run.report("rounds.png"), dpi=100)
    plt.close(fig)
    write_csv(run.report("rounds.csv"), ["model", "round", "pseudo_miou", "avg_entropy"], round_rows)
    outputs += [run.report("rounds.png"), run.report("rounds.csv")]
    return [needed["evaluate"], needed["select-ags"]], outputs

"""CSV export of path logs for plotting.

Three files, one data row per ``epoch`` record in each:

``filter_norm_paths.csv``
    ``epoch`` then ``<layer>/<group>`` (W group norm) and
    ``<layer>/<group>/gamma`` (Gamma group norm) for every group recorded
    in any epoch; cells are empty where a group did not exist yet.
``sparsity_accuracy.csv``
    ``epoch,loss,metric,density`` where density is nonzero Gamma entries
    over penalized weights.
``support_counts.csv``
    ``epoch`` then ``<layer>/supp``, ``<layer>/params``,
    ``<layer>/groups_active``, ``<layer>/groups`` per layer.
"""
import csv
from pathlib import Path

from .log import read_log

FILES = ("filter_norm_paths.csv", "sparsity_accuracy.csv", "support_counts.csv")
COUNT_FIELDS = ("supp", "params", "groups_active", "groups")


def _layer_order(records):
    seen = []
    for rec in records:
        for key in rec.get("layers", {}):
            if key not in seen:
                seen.append(key)
    return seen


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_plot_data(log_path, out_dir):
    records = read_log(log_path, kind="epoch")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = _layer_order(records)

    widths = {k: 0 for k in layers}
    for rec in records:
        for k, info in rec.get("layers", {}).items():
            widths[k] = max(widths[k], len(info.get("w_group_norms", [])))
    norm_cols = [(k, j) for k in layers for j in range(widths[k])]
    header = ["epoch"] + [f"{k}/{j}" for k, j in norm_cols] + [f"{k}/{j}/gamma" for k, j in norm_cols]
    rows = []
    for rec in records:
        info = rec.get("layers", {})

        def cell(k, j, field):
            vals = info.get(k, {}).get(field, [])
            return repr(vals[j]) if j < len(vals) else ""

        rows.append([rec["epoch"]] + [cell(k, j, "w_group_norms") for k, j in norm_cols]
                    + [cell(k, j, "gamma_group_norms") for k, j in norm_cols])
    _write(out_dir / FILES[0], header, rows)

    rows = []
    for rec in records:
        info = rec.get("layers", {})
        supp = sum(v["supp"] for v in info.values())
        total = sum(v["params"] for v in info.values())
        rows.append([rec["epoch"], repr(rec["loss"]), repr(rec["metric"]),
                     repr(supp / total) if total else "0.0"])
    _write(out_dir / FILES[1], ["epoch", "loss", "metric", "density"], rows)

    header = ["epoch"] + [f"{k}/{f}" for k in layers for f in COUNT_FIELDS]
    rows = []
    for rec in records:
        info = rec.get("layers", {})
        rows.append([rec["epoch"]] + [info[k][f] if k in info else "" for k in layers
                                      for f in COUNT_FIELDS])
    _write(out_dir / FILES[2], header, rows)
    return [out_dir / f for f in FILES]

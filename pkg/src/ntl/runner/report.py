"""Render run directories as plain-text and tab-separated tables."""

from __future__ import annotations

import json
from pathlib import Path

from ntl.errors import IncompleteRun, ValidationError
from ntl.runner.pipelines import STATUS_FILE

OWNERSHIP_COLUMNS = [("Supervised", "baseline"), ("NTL", "ntl"), ("FTAL", "attacks.ftal"), ("RTAL", "attacks.rtal"),
                     ("EWC", "attacks.ewc"), ("AU", "attacks.au"), ("Overwriting", "attacks.overwrite"),
                     ("Pruning", "attacks.prune")]


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    status_path = run_dir / STATUS_FILE
    if not status_path.exists():
        raise IncompleteRun(f"{run_dir}: no {STATUS_FILE}")
    status = json.loads(status_path.read_text())
    if status.get("state") != "complete":
        raise IncompleteRun(f"{run_dir}: state is {status.get('state')!r}")
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise IncompleteRun(f"{run_dir}: no summary.json")
    return {"name": run_dir.name, "mode": status["mode"], "summary": json.loads(summary_path.read_text())}


def _cell(summary: dict, key: str) -> str:
    if key not in summary:
        return "-"
    s = summary[key]
    return f"{s['mean']:.4f}±{s['std']:.4f}" if s["n"] > 1 else f"{s['mean']:.4f}"


def _table(header: list, rows: list) -> tuple[str, str]:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    text = "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])
    tsv = "\n".join("\t".join(str(c) for c in r) for r in [header] + rows)
    return text, tsv


def _accuracy_table(runs):
    rows = [[r["name"], r["mode"], _cell(r["summary"], "source_acc"), _cell(r["summary"], "target_acc")]
            for r in runs]
    return _table(["run", "mode", "source", "target"], rows)


def _ownership_table(runs):
    header = ["run"] + [name for name, _ in OWNERSHIP_COLUMNS]
    rows = []
    for r in runs:
        s = r["summary"]
        row = [r["name"]]
        for _, key in OWNERSHIP_COLUMNS:
            # with patch / without patch, as in the verification reports
            row.append(f"{_cell(s, key + '.acc_with_patch')} / {_cell(s, key + '.acc_without_patch')}")
        rows.append(row)
    return _table(header, rows)


def _authorization_table(runs):
    cells = sorted({k[len("unauthorized_accs."):] for r in runs for k in r["summary"]
                    if k.startswith("unauthorized_accs.")})
    header = ["run", "authorized"] + cells + ["max_unauthorized"]
    rows = [[r["name"], _cell(r["summary"], "authorized_acc")]
            + [_cell(r["summary"], f"unauthorized_accs.{c}") for c in cells]
            + [_cell(r["summary"], "max_unauthorized")] for r in runs]
    return _table(header, rows)


def report(run_dirs) -> dict:
    """``{"text": ..., "tsv": ...}`` with one section per table kind present in the runs."""
    run_dirs = list(run_dirs)
    if not run_dirs:
        raise ValidationError("report needs at least one run directory")
    runs = [load_run(d) for d in run_dirs]
    sections = []
    acc = [r for r in runs if r["mode"] in ("supervised", "target-specified", "source-only")]
    if acc:
        sections.append(("source/target accuracy",) + _accuracy_table(acc))
    own = [r for r in runs if r["mode"] == "ownership"]
    if own:
        sections.append(("ownership verification: with patch / without patch",) + _ownership_table(own))
    auth = [r for r in runs if r["mode"] == "authorization"]
    if auth:
        sections.append(("applicability authorization",) + _authorization_table(auth))
    text = "\n\n".join(f"== {title} ==\n{body}" for title, body, _ in sections) + "\n"
    tsv = "\n\n".join(f"# {title}\n{body}" for title, _, body in sections) + "\n"
    return {"text": text, "tsv": tsv}

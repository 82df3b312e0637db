"""Static markdown + HTML report over a set of run directories."""

from __future__ import annotations

import html
import json
import shutil
from pathlib import Path
from typing import Sequence

import numpy as np

from .evalkit import read_metrics_csv

FIGURES = ("grid.png", "ablation_mu.png")
TABLES = ("metrics.csv", "ablation_mu.csv")


def _plot_curves(curves: dict[str, list[float]], path: Path, title: str, smooth: int = 20) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    for label in sorted(curves):
        y = np.asarray(curves[label], dtype=float)
        if len(y) >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
        ax.plot(y, label=label, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _loss_curves(run: Path) -> dict[str, list[float]]:
    curves = {}
    for m in sorted(run.rglob("manifest.json")):
        doc = json.loads(m.read_text())
        if doc.get("loss_history"):
            curves[m.parent.relative_to(run).as_posix()] = doc["loss_history"]
    mu = run / "ablation_mu_losses.json"
    if mu.exists():
        curves.update(json.loads(mu.read_text()))
    return curves


def _table_md(rows: list[dict]) -> list[str]:
    if not rows:
        return ["(empty table)"]
    cols = list(rows[0])
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    out += ["| " + " | ".join(str(r[c]) for c in cols) + " |" for r in rows]
    return out


def _table_html(rows: list[dict]) -> str:
    if not rows:
        return "<p>(empty table)</p>"
    cols = list(rows[0])
    head = "".join(f"<th>{html.escape(c)}</th>" for c in cols)
    body = "".join("<tr>" + "".join(f"<td>{html.escape(str(r[c]))}</td>" for c in cols) + "</tr>" for r in rows)
    return f"<table><tr>{head}</tr>{body}</table>"


def emit_report(runs: Sequence[Path], out_dir) -> tuple[Path, Path]:
    """Write ``report.md`` and ``report.html`` plus copied/plotted figures.

    Runs without a manifest and artifacts listed in a manifest but absent on
    disk are reported under "Missing" instead of failing the report. Output
    depends only on the run contents, so regenerating it is byte-stable.
    """
    out = Path(out_dir)
    fig_dir = out / "figures"
    if fig_dir.exists():
        shutil.rmtree(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    md = ["# fairylab report", ""]
    parts = ["<!doctype html><html><head><meta charset='utf-8'><title>fairylab report</title>",
             "<style>body{font-family:sans-serif;max-width:60em}td,th{border:1px solid #ccc;padding:2px 6px}"
             "table{border-collapse:collapse}img{image-rendering:pixelated;max-width:100%}</style></head><body>",
             "<h1>fairylab report</h1>"]
    missing: list[str] = []
    runs = sorted({Path(r) for r in runs}, key=lambda p: p.name)
    if not runs:
        md.append("No runs.")
        parts.append("<p>No runs.</p>")
    for run in runs:
        manifest_path = run / "run_manifest.json"
        if not manifest_path.exists():
            missing.append(f"{run.name}: run_manifest.json")
            continue
        manifest = json.loads(manifest_path.read_text())
        name = run.name
        md += [f"## {name}", "", f"- command: `{manifest['command']}`",
               f"- code: `{manifest.get('code_version', '?')}`", f"- seed: {manifest.get('seeds', {}).get('seed')}", ""]
        parts.append(f"<h2>{html.escape(name)}</h2><p>command <code>{html.escape(manifest['command'])}</code>, "
                     f"code <code>{html.escape(str(manifest.get('code_version', '?')))}</code></p>")
        artifacts = manifest.get("artifacts", [])
        for rel in artifacts:
            if not (run / rel).exists():
                missing.append(f"{name}: {rel}")
        for table in TABLES:
            if table in artifacts and (run / table).exists():
                rows = read_metrics_csv(run / table)
                md += [f"**{table}** (`{name}/{table}`)", ""] + _table_md(rows) + [""]
                parts.append(f"<h3>{table}</h3>" + _table_html(rows))
        for fig in FIGURES:
            if fig in artifacts and (run / fig).exists():
                dest = fig_dir / f"{name}__{fig}"
                shutil.copyfile(run / fig, dest)
                rel = dest.relative_to(out).as_posix()
                md += [f"![{fig}]({rel}) (source `{name}/{fig}`)", ""]
                parts.append(f"<figure><img src='{rel}'><figcaption>{name}/{fig}</figcaption></figure>")
        curves = _loss_curves(run)
        if curves:
            dest = _plot_curves(curves, fig_dir / f"{name}__loss.png", name)
            rel = dest.relative_to(out).as_posix()
            md += [f"![loss curves]({rel}) ({len(curves)} curve(s))", ""]
            parts.append(f"<figure><img src='{rel}'><figcaption>loss curves: "
                         f"{html.escape(', '.join(sorted(curves)))}</figcaption></figure>")
    md += ["## Missing", ""] + ([f"- {m}" for m in missing] if missing else ["none"]) + [""]
    parts.append("<h2>Missing</h2>" + ("<ul>" + "".join(f"<li>{html.escape(m)}</li>" for m in missing) + "</ul>"
                                        if missing else "<p>none</p>"))
    parts.append("</body></html>")
    md_path, html_path = out / "report.md", out / "report.html"
    md_path.write_text("\n".join(md))
    html_path.write_text("\n".join(parts) + "\n")
    return md_path, html_path

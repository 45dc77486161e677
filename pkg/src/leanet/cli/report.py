"""CSV, text-table and SVG rendering of experiment rows."""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import LeaNetError  # noqa: E402
from ..harness import summarize  # noqa: E402


class ReportError(LeaNetError, IOError):
    module = "report"


def _fmt_point(p):
    return "" if p is None else str(p)


def _fmt_ratio(r):
    return f"{r:.4f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def format_table(summary):
    """Plain-text table: one line per variant, ``mean ± std`` with the best point in parentheses."""
    lines = []
    has_ratio = any(s[0] is not None for s in summary)
    keyed = {}
    for ratio, variant, point, mean, std, _ in summary:
        keyed.setdefault((ratio, variant), {})[point] = (mean, std)
    head = ("ratio  " if has_ratio else "") + f"{'variant':<22} F1"
    lines.append(head)
    lines.append("-" * max(len(head), 48))
    for (ratio, variant), by_point in keyed.items():
        best = [p for p in by_point if isinstance(p, str) and p.startswith("best(")]
        if best:
            mean, std = by_point[best[0]]
            cell = f"{mean:.3f} ± {std:.3f} ({best[0][5:-1]})"
        else:
            mean, std = by_point[None]
            cell = f"{mean:.3f} ± {std:.3f}"
        prefix = f"{_fmt_ratio(ratio)} " if has_ratio else ""
        lines.append(f"{prefix}{variant:<22} {cell}")
    return "\n".join(lines) + "\n"


def _figure_style():
    plt.rcParams["svg.hashsalt"] = "leanet-report"
    plt.rcParams["svg.fonttype"] = "none"


def _plot_points(summary, path):
    _figure_style()
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in sorted({s[1] for s in summary}):
        pts = sorted((s[2], s[3]) for s in summary if s[1] == variant and isinstance(s[2], int))
        if pts:
            ax.plot([p for p, _ in pts], [m for _, m in pts], marker="o", label=variant)
        else:
            flat = [s[3] for s in summary if s[1] == variant and s[2] is None]
            if flat:
                ax.axhline(flat[0], linestyle="--", color="gray", label=variant)
    ax.set_xticks([1, 2, 3, 4, 5])
    ax.set_xlabel("attention point")
    ax.set_ylabel("mean F1")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _plot_ratios(summary, path):
    _figure_style()
    ratios = sorted({s[0] for s in summary})
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in sorted({s[1] for s in summary}):
        ys = []
        for r in ratios:
            cands = [s for s in summary if s[0] == r and s[1] == variant]
            best = [s for s in cands if isinstance(s[2], str)]
            ys.append((best or [s for s in cands if s[2] is None] or cands)[0][3])
        ax.plot(ratios, ys, marker="o", label=variant)
    ax.set_xticks(ratios)
    ax.set_xticklabels([f"{100 * r:.1f}%" for r in ratios])
    ax.set_xlabel("positive ratio")
    ax.set_ylabel("mean F1")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(rows, out):
    """Write ``metrics.csv``, ``summary.csv``, ``table.txt`` and an SVG chart under ``out``.

    Rows produced by the imbalance sweep carry a ratio; they get a leading
    ``ratio`` column and an F1-versus-ratio chart. Returns the written paths.
    """
    if not rows:
        raise ReportError("no result rows to report")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        sweep = any(r.ratio is not None for r in rows)
        lead = ["ratio"] if sweep else []
        per_fold = []
        for r in rows:
            if isinstance(r.point, str):
                continue
            for k, v in enumerate(r.f1s):
                per_fold.append(([_fmt_ratio(r.ratio)] if sweep else []) + [r.variant, _fmt_point(r.point), r.seed, k, f"{v:.10f}"])
        summary = summarize(rows)
        paths = {"metrics": out / "metrics.csv", "summary": out / "summary.csv", "table": out / "table.txt"}
        _write_csv(paths["metrics"], lead + ["variant", "point", "seed", "fold", "f1"], per_fold)
        _write_csv(
            paths["summary"],
            lead + ["variant", "point", "mean_f1", "std_f1"],
            [([_fmt_ratio(s[0])] if sweep else []) + [s[1], _fmt_point(s[2]), f"{s[3]:.10f}", f"{s[4]:.10f}"] for s in summary],
        )
        paths["table"].write_text(format_table(summary), encoding="utf-8")
        if sweep:
            paths["chart"] = out / "f1_vs_ratio.svg"
            _plot_ratios(summary, paths["chart"])
        else:
            paths["chart"] = out / "f1_by_point.svg"
            _plot_points(summary, paths["chart"])
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from None
    return paths

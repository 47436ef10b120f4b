"""Report writers: delimited metric/seed files plus rendered figures.

Every run directory gets machine-readable TSVs (metrics.tsv, seeds_iter<k>.tsv,
config.resolved, loss_history.tsv) and PNG figures next to them. Numeric
formatting is fixed to six decimals so identical runs produce byte-identical
files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def format_value(value: float) -> str:
    return f"{value:.6f}"


def write_metrics_tsv(report, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric\tslice\tvalue\n")
        for metric, slice_name, value in report.rows():
            fh.write(f"{metric}\t{slice_name}\t{format_value(value)}\n")


def write_seeds_tsv(seeds, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for left, right in seeds.pairs:
            fh.write(f"{left}\t{right}\n")


def write_config_resolved(config, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in config.resolved_lines():
            fh.write(line + "\n")


def write_loss_history(histories: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stage\tepoch\tloss\n")
        for stage in sorted(histories):
            for epoch, loss in enumerate(histories[stage]):
                fh.write(f"{stage}\t{epoch}\t{format_value(loss)}\n")


def write_human_summary(report, path: Path) -> None:
    width = max([len("slice")] + [len(s) for s in report.slices])
    lines = [f"{'slice':<{width}}  {'n':>6}  {'mrr':>8}  "
             + "  ".join(f"{'h@%d' % n:>8}" for n in sorted(report.hits))]
    def row(name, rep):
        cells = [f"{name:<{width}}", f"{rep.count:>6d}", f"{rep.mrr:>8.4f}"]
        cells += [f"{rep.hits[n]:>8.4f}" for n in sorted(rep.hits)]
        return "  ".join(cells)
    lines.append(row("all", report))
    for name in sorted(report.slices):
        lines.append(row(name, report.slices[name]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# figures


def metrics_figure(report, path: Path) -> None:
    """Bar chart of H@1 and MRR per slice."""
    names = ["all"] + sorted(report.slices)
    h1 = [report.hits.get(1, 0.0)] + [report.slices[n].hits.get(1, 0.0)
                                      for n in sorted(report.slices)]
    mrr = [report.mrr] + [report.slices[n].mrr for n in sorted(report.slices)]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(names)), 4))
    ax.bar(x - 0.2, h1, width=0.4, label="H@1")
    ax.bar(x + 0.2, mrr, width=0.4, label="MRR")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_figure(histories: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in sorted(histories):
        losses = histories[stage]
        if losses:
            ax.plot(range(len(losses)), losses, label=stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def seeds_figure(sizes, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(sizes) + 1), sizes, marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training seeds")
    ax.set_xticks(range(1, len(sizes) + 1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_figure(table: dict, path: Path) -> None:
    names = list(table)
    h1 = [table[n]["h@1"] for n in names]
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(names)), 4))
    ax.bar(np.arange(len(names)), h1)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("H@1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# artifact bundles


def write_run_artifacts(outcome, task, out_dir: Path) -> None:
    from .encoders import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_tsv(outcome.report, out_dir / "metrics.tsv")
    write_config_resolved(outcome.config, out_dir / "config.resolved")
    write_human_summary(outcome.report, out_dir / "metrics.txt")
    for i, it in enumerate(outcome.iterations, start=1):
        write_seeds_tsv(it.seeds, out_dir / f"seeds_iter{i}.tsv")
        save_checkpoint(it.state, out_dir / f"checkpoint_iter{i}.npz")
    final = outcome.iterations[-1]
    write_loss_history(final.state.loss_history, out_dir / "loss_history.tsv")
    metrics_figure(outcome.report, out_dir / "metrics.png")
    loss_figure(final.state.loss_history, out_dir / "loss_history.png")
    seeds_figure([len(it.seeds) for it in outcome.iterations],
                 out_dir / "seeds.png")


def write_ablation_artifacts(table: dict, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("variant\th@1\tmrr\n")
        for name in table:
            fh.write(f"{name}\t{format_value(table[name]['h@1'])}\t"
                     f"{format_value(table[name]['mrr'])}\n")
    width = max(len(n) for n in table)
    lines = [f"{'variant':<{width}}  {'H@1':>8}  {'MRR':>8}"]
    for name in table:
        lines.append(f"{name:<{width}}  {table[name]['h@1']:>8.4f}  "
                     f"{table[name]['mrr']:>8.4f}")
    (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ablation_figure(table, out_dir / "ablation.png")


def render_report_directory(out_dir: Path) -> list:
    """Re-render figures and the text table from the TSVs in a run
    directory; returns the list of written files."""
    out_dir = Path(out_dir)
    written = []
    metrics_path = out_dir / "metrics.tsv"
    if metrics_path.exists():
        report = _read_metrics(metrics_path)
        metrics_figure(report, out_dir / "metrics.png")
        write_human_summary(report, out_dir / "metrics.txt")
        written += ["metrics.png", "metrics.txt"]
    loss_path = out_dir / "loss_history.tsv"
    if loss_path.exists():
        histories = _read_losses(loss_path)
        loss_figure(histories, out_dir / "loss_history.png")
        written.append("loss_history.png")
    seed_files = sorted(out_dir.glob("seeds_iter*.tsv"))
    if seed_files:
        sizes = [sum(1 for line in f.read_text(encoding="utf-8").splitlines() if line)
                 for f in seed_files]
        seeds_figure(sizes, out_dir / "seeds.png")
        written.append("seeds.png")
    ablation_path = out_dir / "ablation.tsv"
    if ablation_path.exists():
        table = _read_ablation(ablation_path)
        ablation_figure(table, out_dir / "ablation.png")
        written.append("ablation.png")
    return written


def _read_metrics(path: Path):
    from .pipeline import MetricReport

    rows = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        metric, slice_name, value = line.split("\t")
        rows.setdefault(slice_name, {})[metric] = float(value)

    def build(cells):
        hits = {int(k.split("@")[1]): v for k, v in cells.items()
                if k.startswith("hit@")}
        return MetricReport(mrr=cells.get("mrr", 0.0), hits=hits,
                            count=int(cells.get("n", 0)))

    report = build(rows.pop("all"))
    for name in sorted(rows):
        report.slices[name] = build(rows[name])
    return report


def _read_losses(path: Path) -> dict:
    histories: dict = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        stage, _, loss = line.split("\t")
        histories.setdefault(stage, []).append(float(loss))
    return histories


def _read_ablation(path: Path) -> dict:
    table = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        name, h1, mrr = line.split("\t")
        table[name] = {"h@1": float(h1), "mrr": float(mrr)}
    return table

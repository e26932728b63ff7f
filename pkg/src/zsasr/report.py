"""Aggregate finished runs into a comparison table, CSV and figures.

A runs directory holds one subdirectory per run, each with the cer_report.csv
and run.json that run_experiment wrote. The report renders the ablation-ladder
style comparison (group B error by preset), a per-language breakdown, and
writes PNG figures next to the delimited output.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

# presentation order: baselines, then the cumulative ladder, then full models
LADDER_ORDER = [
    "no_text_baseline", "joint_w2v_bert", "w2v_bert_finetuned",
    "standard_maestro", "t4_langid", "t4_upscale", "t4_adapter", "t4_byte",
    "t4_indomain", "maestro_u_grapheme", "maestro_u_byte", "maestro_u_phoneme",
    "t5_full", "t5_uniform", "t5_nocons", "t5_nodur", "t5_none",
    "oracle_supervised",
]


@dataclass
class RunSummary:
    preset: str
    seed: int
    group_means: dict[str, float]
    per_lang: list[dict]
    path: Path


@dataclass
class Report:
    runs: list[RunSummary]
    by_preset: dict[str, list[RunSummary]] = field(default_factory=dict)

    def __post_init__(self):
        for run in self.runs:
            self.by_preset.setdefault(run.preset, []).append(run)

    def median_b(self, preset: str) -> float:
        vals = sorted(r.group_means["B"] for r in self.by_preset[preset])
        return vals[len(vals) // 2]

    def presets(self) -> list[str]:
        known = [p for p in LADDER_ORDER if p in self.by_preset]
        extra = sorted(set(self.by_preset) - set(known))
        return known + extra


def collect_runs(runs_dir) -> Report:
    from .evaluate import load_report_csv
    runs = []
    for run_json in sorted(Path(runs_dir).glob("**/run.json")):
        meta = json.loads(run_json.read_text())
        rows, groups = load_report_csv(run_json.parent / "cer_report.csv")
        runs.append(RunSummary(meta["preset"], meta["seed"],
                               meta["group_means"], rows, run_json.parent))
    if not runs:
        raise FileNotFoundError(f"no run.json files under {runs_dir}")
    return Report(runs)


def write_report_csv(report: Report, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "n_seeds", "seeds", "cer_A", "cer_B", "cer_A+B",
                    "median_B"])
        for preset in report.presets():
            runs = sorted(report.by_preset[preset], key=lambda r: r.seed)
            mean = {g: sum(r.group_means[g] for r in runs) / len(runs)
                    for g in ("A", "B", "A+B")}
            w.writerow([preset, len(runs),
                        " ".join(str(r.seed) for r in runs),
                        f"{mean['A']:.6f}", f"{mean['B']:.6f}",
                        f"{mean['A+B']:.6f}",
                        f"{report.median_b(preset):.6f}"])


def format_table(report: Report) -> str:
    lines = [f"{'preset':<22s} {'seeds':>5s} {'CER A':>8s} {'CER B':>8s} "
             f"{'median B':>9s}"]
    lines.append("-" * len(lines[0]))
    for preset in report.presets():
        runs = report.by_preset[preset]
        mean_a = sum(r.group_means["A"] for r in runs) / len(runs)
        mean_b = sum(r.group_means["B"] for r in runs) / len(runs)
        lines.append(f"{preset:<22s} {len(runs):>5d} {100 * mean_a:>7.1f}% "
                     f"{100 * mean_b:>7.1f}% {100 * report.median_b(preset):>8.1f}%")
    return "\n".join(lines)


def render_figures(report: Report, out_dir) -> list[Path]:
    """Bar chart of group B error per preset plus a per-language breakdown."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    presets = report.presets()
    medians = [100 * report.median_b(p) for p in presets]
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(presets)), 4))
    ax.bar(range(len(presets)), medians, color="#4878a8")
    ax.set_xticks(range(len(presets)))
    ax.set_xticklabels(presets, rotation=40, ha="right", fontsize=8)
    ax.set_ylabel("group B CER (%)")
    ax.set_title("zero-supervised error by configuration (median over seeds)")
    fig.tight_layout()
    path = out / "ladder_group_b.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    langs: dict[str, dict[str, list[float]]] = {}
    for run in report.runs:
        for row in run.per_lang:
            langs.setdefault(row["name"], {}).setdefault(run.preset, []) \
                .append(float(row["cer"]))
    names = sorted(langs)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(names)), 4))
    width = 0.8 / max(1, len(presets))
    for i, preset in enumerate(presets):
        xs, ys = [], []
        for j, name in enumerate(names):
            vals = langs[name].get(preset)
            if vals:
                xs.append(j + i * width)
                ys.append(100 * sum(vals) / len(vals))
        ax.bar(xs, ys, width=width, label=preset)
    ax.set_xticks([j + 0.4 for j in range(len(names))])
    ax.set_xticklabels(names)
    ax.set_ylabel("CER (%)")
    ax.set_title("per-language error")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    path = out / "per_language_cer.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def gamma_table(corpus, unit: str) -> list[tuple[str, float]]:
    """Unseen-symbol ratio per group B language at the requested unit level."""
    from .langdata import unseen_grapheme_ratio
    group_a = corpus.group("A")
    return [(lang.name, unseen_grapheme_ratio(lang, group_a, unit))
            for lang in corpus.group("B")]

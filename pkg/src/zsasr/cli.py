"""Command-line surface: corpus generation, training, evaluation, reports.

Exit codes: 0 on success, 2 on usage errors (click's default), 3 on runtime
failures. Every command is deterministic in its --seed arguments; rerunning a
command with the same flags reproduces its artifacts byte for byte.
"""
from __future__ import annotations

import functools
import json
import sys
from dataclasses import fields, is_dataclass, replace
from pathlib import Path

import click

from . import trainer as tr
from .evaluate import evaluate, save_report_csv
from .langdata import default_corpus_config, gen_synthetic_corpus, load_corpus, save_corpus
from .model import build_model
from .tensor import Rng, load_checkpoint, save_checkpoint


def _coerce(raw: str, typ):
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ in (tuple, "tuple") or str(typ).startswith("tuple"):
        return tuple(int(x) for x in raw.split(","))
    raise ValueError(f"unsupported config value type {typ}")


def apply_overrides(cfg, pairs: dict[str, str]):
    """Apply flat `key=value` settings; dotted keys reach nested dataclasses
    (e.g. curriculum.joint_steps=800, weights.w_rnnt_text=1)."""
    for key, raw in pairs.items():
        obj = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not hasattr(obj, part):
                raise ValueError(f"unknown config section {part!r} in {key!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        match = [f for f in fields(obj) if f.name == leaf] if is_dataclass(obj) else []
        if not match:
            raise ValueError(f"unknown config key {key!r}")
        hint = match[0].type
        typ = type(getattr(obj, leaf))
        if typ is tuple or (isinstance(hint, str) and hint.startswith("tuple")):
            value = tuple(int(x) for x in raw.split(","))
        else:
            value = _coerce(raw, typ)
        setattr(obj, leaf, value)
    return cfg


def read_config_file(path) -> dict[str, str]:
    """Flat key = value lines; # starts a comment."""
    out: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line {line!r}; expected key = value")
        key, raw = line.split("=", 1)
        out[key.strip()] = raw.strip()
    return out


def runtime_guard(fn):
    """Map unexpected failures to exit code 3, keeping usage errors at 2."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - the CLI boundary
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
    return wrapper


def _collect_sets(ctx_sets) -> dict[str, str]:
    out = {}
    for item in ctx_sets:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _trainer_config(preset, config_file, sets):
    tcfg = tr.trainer_config_for(preset)
    pairs = {}
    if config_file:
        pairs.update(read_config_file(config_file))
    pairs.update(_collect_sets(sets))
    return apply_overrides(tcfg, pairs)


@click.group()
def main():
    """Zero-supervised-speech ASR experiments on a synthetic multilingual
    corpus: generate data, train preset configurations, evaluate and report."""


@main.command("gen-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--oracle-b-paired", is_flag=True,
              help="also emit transcribed group B training utterances")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="override a corpus config field")
@runtime_guard
def gen_corpus_cmd(out_dir, seed, oracle_b_paired, sets):
    """Generate the default 6-language synthetic corpus to a directory."""
    ccfg = default_corpus_config(group_b_paired=oracle_b_paired)
    apply_overrides(ccfg, _collect_sets(sets))
    corpus = gen_synthetic_corpus(ccfg, seed=seed)
    save_corpus(corpus, out_dir)
    click.echo(f"wrote {len(corpus.utterances)} utterances, "
               f"{len(corpus.text_pool)} text sentences to {out_dir}")


@main.command("train")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--preset", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_file", type=click.Path(exists=True))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
@runtime_guard
def train_cmd(corpus_dir, preset, seed, out_dir, config_file, sets):
    """Train a preset on an existing corpus and write run artifacts."""
    preset_cfg = tr.get_preset(preset)
    corpus = load_corpus(corpus_dir)
    tcfg = _trainer_config(preset_cfg, config_file, sets)
    res = tr.run_experiment(preset, seed, out_dir, corpus=corpus, tcfg=tcfg)
    click.echo(f"group means: {res.report.summary()}")


@main.command("finetune")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--steps", default=150, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@runtime_guard
def finetune_cmd(corpus_dir, checkpoint, steps, seed, out_dir):
    """Supervised fine-tuning of a trained checkpoint on the paired pool."""
    res = tr.finetune_checkpoint(checkpoint, corpus_dir, steps, seed, out_dir)
    click.echo(f"group means after finetune: {res.report.summary()}")


@main.command("evaluate")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", "out_file", required=True, type=click.Path())
@click.option("--training-weights", is_flag=True,
              help="evaluate raw training weights instead of the EMA shadow")
@runtime_guard
def evaluate_cmd(corpus_dir, checkpoint, out_file, training_weights):
    """Greedy-decode the test split and write the CER report."""
    report = tr.evaluate_checkpoint(checkpoint, corpus_dir,
                                    use_ema=not training_weights)
    save_report_csv(report, out_file)
    click.echo(f"group means: {report.summary()}")


@main.command("run-preset")
@click.argument("preset")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True),
              help="reuse an existing corpus instead of generating one")
@click.option("--config", "config_file", type=click.Path(exists=True))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
@runtime_guard
def run_preset_cmd(preset, seed, out_dir, corpus_dir, config_file, sets):
    """End to end: corpus, training, optional fine-tuning, evaluation."""
    preset_cfg = tr.get_preset(preset)
    corpus = load_corpus(corpus_dir) if corpus_dir else None
    tcfg = _trainer_config(preset_cfg, config_file, sets)
    res = tr.run_experiment(preset, seed, out_dir, corpus=corpus, tcfg=tcfg)
    click.echo(f"group means: {res.report.summary()}")


@main.command("report")
@click.option("--dir", "runs_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(),
              help="where to write report.csv and figures (default: runs dir)")
@runtime_guard
def report_cmd(runs_dir, out_dir):
    """Summarize finished runs: comparison table, CSV, and PNG figures."""
    from .report import collect_runs, format_table, render_figures, write_report_csv
    report = collect_runs(runs_dir)
    out = Path(out_dir or runs_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "report.csv")
    figures = render_figures(report, out)
    click.echo(format_table(report))
    click.echo(f"wrote {out / 'report.csv'} and "
               f"{', '.join(str(f) for f in figures)}")


@main.command("ugr")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--unit", type=click.Choice(["grapheme", "byte"]),
              default="grapheme", show_default=True)
@runtime_guard
def ugr_cmd(corpus_dir, unit):
    """Unseen-symbol ratio of each group B language against group A."""
    from .report import gamma_table
    corpus = load_corpus(corpus_dir)
    click.echo(f"{'language':<12s} {'ratio':>8s}   (unit: {unit})")
    for name, gamma in gamma_table(corpus, unit):
        click.echo(f"{name:<12s} {gamma:>8.4f}")


if __name__ == "__main__":
    main()

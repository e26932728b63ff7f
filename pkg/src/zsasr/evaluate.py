"""Character error rate and grouped evaluation reports.

CER is codepoint-level Levenshtein distance divided by reference length;
whitespace counts as a character (configurable). Within a language the edits
are micro-averaged (total edits over total reference characters); across
languages each group mean is the unweighted mean of language CERs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .langdata import unseen_grapheme_ratio
from .model import Model
from .rnnt import greedy_decode


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str, strip_space: bool = False) -> float:
    """Edit distance over reference length; can exceed 1 with insertions."""
    if strip_space:
        reference = reference.replace(" ", "")
        hypothesis = hypothesis.replace(" ", "")
    if not reference:
        raise ValueError("CER undefined for an empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


@dataclass
class LangEval:
    name: str
    group: str
    n_utts: int
    ref_chars: int
    edits: int
    cer: float
    gamma_grapheme: float | None = None  # group B languages only
    gamma_byte: float | None = None


@dataclass
class EvalReport:
    preset: str
    seed: int
    step: int
    rows: list[LangEval]
    warnings: list[str] = field(default_factory=list)

    def group_mean(self, group: str) -> float:
        cers = [r.cer for r in self.rows if group in ("A+B", r.group)]
        return float(np.mean(cers)) if cers else float("nan")

    def summary(self) -> dict[str, float]:
        return {g: self.group_mean(g) for g in ("A", "B", "A+B")}


def decode_utterance(model: Model, features, lang_id: int,
                     max_symbols_per_frame: int = 4) -> str:
    """Greedy hypothesis from the grapheme decoder with the utterance's
    language embedding."""
    latents = model.encode_speech(features)
    shared = model.shared(latents, lang_id)
    dec_in = model.decoder_input(shared, lang_id)
    ids = greedy_decode(model.params, "dec.grapheme", model.decoders["grapheme"],
                        dec_in.data, max_symbols_per_frame)
    return "".join(model.vocabs["grapheme"].decode(ids))


def evaluate(model: Model, test_utterances, preset: str = "", seed: int = 0,
             step: int = 0, ema_shadow: dict | None = None,
             strip_space: bool = False) -> EvalReport:
    """Decode every test utterance and aggregate CER per language and group."""
    swapped = model.swap_in(ema_shadow) if ema_shadow is not None else None
    try:
        per_lang: dict[int, list[tuple[int, int]]] = {}
        for utt in test_utterances:
            if utt.transcript is None:
                raise ValueError(f"{utt.utt_id}: test utterance lacks a transcript")
            hyp = decode_utterance(model, utt.features, utt.lang_id)
            ref = utt.transcript
            if strip_space:
                ref, hyp = ref.replace(" ", ""), hyp.replace(" ", "")
            per_lang.setdefault(utt.lang_id, []).append(
                (levenshtein(ref, hyp), len(ref)))
    finally:
        if swapped is not None:
            model.swap_in(swapped)

    group_a = [l for l in model.languages if l.group == "A"]
    rows: list[LangEval] = []
    warnings: list[str] = []
    for lang in model.languages:
        pairs = per_lang.get(lang.lang_id)
        if not pairs:
            warnings.append(f"language {lang.name} has no test utterances; omitted")
            continue
        edits = sum(e for e, _ in pairs)
        chars = sum(n for _, n in pairs)
        row = LangEval(lang.name, lang.group, len(pairs), chars, edits,
                       edits / chars)
        if lang.group == "B":
            row.gamma_grapheme = unseen_grapheme_ratio(lang, group_a, "grapheme")
            row.gamma_byte = unseen_grapheme_ratio(lang, group_a, "byte")
        rows.append(row)
    return EvalReport(preset, seed, step, rows, warnings)


REPORT_FIELDS = ["scope", "name", "group", "n_utts", "ref_chars", "edits",
                 "cer", "gamma_grapheme", "gamma_byte"]


def save_report_csv(report: EvalReport, path) -> None:
    """Per-language rows first, then group means recomputable from them."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", report.preset, "seed", report.seed,
                    "step", report.step])
        w.writerow(REPORT_FIELDS)
        for r in report.rows:
            w.writerow(["lang", r.name, r.group, r.n_utts, r.ref_chars, r.edits,
                        f"{r.cer:.8f}",
                        "" if r.gamma_grapheme is None else f"{r.gamma_grapheme:.8f}",
                        "" if r.gamma_byte is None else f"{r.gamma_byte:.8f}"])
        for g in ("A", "B", "A+B"):
            w.writerow(["group", g, g, "", "", "",
                        f"{report.group_mean(g):.8f}", "", ""])


def load_report_csv(path) -> tuple[list[dict], dict[str, float]]:
    """Returns (per-language row dicts, group means) from a report file."""
    rows, groups = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # preset/seed/step header
        header = next(reader)
        for rec in reader:
            d = dict(zip(header, rec))
            if d["scope"] == "lang":
                rows.append(d)
            else:
                groups[d["name"]] = float(d["cer"])
    return rows, groups

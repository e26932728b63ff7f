"""Languages, tokenization, synthetic corpus generation and batch composition.

The synthetic corpus imitates the structure of a multilingual read-speech
benchmark at desk scale: every language gets a script carved out of a real
Unicode block, an oracle lexicon into a shared latent phoneme inventory, and
speech "audio" synthesized by repeating per-phoneme base vectors. Languages in
group A have transcribed training speech; group B languages have only
untranscribed speech and unpaired text, which is the whole point.

Scripts within the same block family (e.g. the Brahmic blocks) are built from
the same in-block offsets with a shared offset-to-phoneme lexicon, mirroring
how real Unicode blocks place related characters at matching offsets. UTF-8
then makes same-sounding graphemes share most of their bytes across scripts,
which is the mechanism byte-level text sharing relies on.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

PAUSE_PHONEME = 0  # the space character maps to this shared phoneme id

Group = str  # "A" (paired speech available) or "B" (zero supervised speech)


# ----------------------------------------------------------------- registries


@dataclass(frozen=True)
class BlockInfo:
    """A Unicode block we can carve synthetic scripts from."""
    start: int
    max_offsets: int
    family: str


# Offsets are kept below 64 so that all codepoints of a 3-byte block share
# their UTF-8 lead byte and, across same-family blocks, their final byte.
BLOCKS: dict[str, BlockInfo] = {
    "latin": BlockInfo(0x0061, 26, "latin"),
    "greek": BlockInfo(0x03B1, 25, "greek"),
    "cyrillic": BlockInfo(0x0430, 32, "cyrillic"),
    "devanagari": BlockInfo(0x0900, 60, "brahmic"),
    "bengali": BlockInfo(0x0980, 60, "brahmic"),
    "gurmukhi": BlockInfo(0x0A00, 60, "brahmic"),
    "gujarati": BlockInfo(0x0A80, 60, "brahmic"),
    "oriya": BlockInfo(0x0B00, 60, "brahmic"),
    "tamil": BlockInfo(0x0B80, 60, "brahmic"),
    "telugu": BlockInfo(0x0C00, 60, "brahmic"),
    "kannada": BlockInfo(0x0C80, 60, "brahmic"),
    "malayalam": BlockInfo(0x0D00, 60, "brahmic"),
}


@dataclass
class LanguageSpec:
    lang_id: int
    name: str
    group: Group
    script: tuple[str, ...]                 # ordered codepoint inventory
    lexicon: dict[str, tuple[int, ...]]     # grapheme -> latent phoneme ids
    text_unit: str = "grapheme"

    def __post_init__(self):
        if not self.script:
            raise ValueError(f"language {self.name}: empty script")
        bad = [g for g in self.lexicon if g not in self.script]
        if bad:
            raise ValueError(f"language {self.name}: lexicon keys {bad} not in script")


@dataclass
class Utterance:
    utt_id: str
    lang_id: int
    split: str                              # "train" or "test"
    features: np.ndarray                    # T x F float32
    transcript: str | None = None
    # generator internals kept for tests: (phoneme ids, per-phoneme durations)
    trace: tuple[list[int], list[int]] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.utt_id}: features must be T x F with T >= 1")


@dataclass
class TextSample:
    text: str
    lang_id: int
    domain: str = "general"                 # "general" or "indomain"


@dataclass
class MixedBatch:
    untranscribed: list[Utterance]
    unspoken_text: list[TextSample]
    transcribed: list[Utterance]


# ------------------------------------------------------------------- vocabs


@dataclass
class Vocab:
    kind: str                               # "grapheme", "byte" or "phoneme"
    tokens: list                            # token at index i has id i
    blank_id: int
    _ids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._ids:
            self._ids = {t: i for i, t in enumerate(self.tokens)}
        if self.blank_id != len(self.tokens):
            raise ValueError("blank must be the id after the last real token")

    @property
    def size(self) -> int:
        """Number of real tokens, excluding blank."""
        return len(self.tokens)

    def id_of(self, token) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in {self.kind} vocab") from None

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> list:
        return [self.tokens[i] for i in ids]


def byte_encode(text: str) -> list[int]:
    """UTF-8 bytes of `text`, each as its 0..255 id."""
    return list(text.encode("utf-8"))


def byte_decode(ids) -> str:
    return bytes(ids).decode("utf-8")


def byte_vocab() -> Vocab:
    return Vocab("byte", list(range(256)), 256)


def phoneme_vocab(n_phonemes: int) -> Vocab:
    return Vocab("phoneme", list(range(n_phonemes)), n_phonemes)


def grapheme_inventory(texts, include_space: bool = False) -> set[str]:
    inv = set()
    for t in texts:
        inv.update(t)
    if not include_space:
        inv.discard(" ")
    return inv


def grapheme_vocab(texts_by_lang: dict[int, list[str]],
                   include_space: bool = False) -> tuple[dict[int, set[str]], Vocab]:
    """Per-language codepoint inventories plus a global union vocab with
    stable (sorted) ids."""
    if not texts_by_lang or all(not v for v in texts_by_lang.values()):
        raise ValueError("grapheme_vocab: empty corpus")
    per_lang = {lid: grapheme_inventory(texts, include_space)
                for lid, texts in texts_by_lang.items()}
    union = sorted(set().union(*per_lang.values()))
    return per_lang, Vocab("grapheme", union, len(union))


def decoder_grapheme_vocab(languages: list[LanguageSpec]) -> Vocab:
    """Global grapheme table for the recognizer output: all scripts plus space."""
    union = sorted({c for lang in languages for c in lang.script} | {" "})
    return Vocab("grapheme", union, len(union))


def to_phonemes(text: str, lang: LanguageSpec) -> list[int]:
    """Oracle grapheme-to-phoneme: concatenate lexicon entries; the space
    character maps to the shared pause phoneme."""
    out: list[int] = []
    for ch in text:
        if ch == " ":
            out.append(PAUSE_PHONEME)
            continue
        seq = lang.lexicon.get(ch)
        if seq is None:
            raise KeyError(f"grapheme {ch!r} not in lexicon of {lang.name}")
        out.extend(seq)
    return out


# --------------------------------------------------------- unseen grapheme ratio


def vocab_set(lang: LanguageSpec, unit: str = "grapheme") -> set:
    """The language's symbol inventory at the requested unit level, derived
    from its script (space excluded at both levels)."""
    if unit == "grapheme":
        return set(lang.script)
    if unit == "byte":
        out: set[int] = set()
        for ch in lang.script:
            out.update(ch.encode("utf-8"))
        return out
    raise ValueError(f"unsupported unit {unit!r}")


def unseen_grapheme_ratio(lang: LanguageSpec, group_a: list[LanguageSpec],
                          unit: str = "grapheme",
                          vocab_fn=None) -> float:
    """Fraction of `lang`'s vocabulary not covered by any group A language.

    With V(l) the vocabulary of language l, this is
    1 - |union_k (V(l) & V(a_k))| / |V(l)|, always in [0, 1]. `vocab_fn` may
    supply corpus-derived vocabularies instead of the script-derived default.
    """
    fn = vocab_fn or (lambda l: vocab_set(l, unit))
    v = set(fn(lang))
    if not v:
        raise ValueError(f"empty vocabulary for {lang.name}; ratio undefined")
    covered = set()
    for other in group_a:
        covered |= v & set(fn(other))
    return 1.0 - len(covered) / len(v)


# ------------------------------------------------------------ corpus generation


@dataclass
class LanguageCfg:
    name: str
    group: Group
    block: str
    script_size: int = 6
    n_paired: int = 120         # transcribed train utterances (group A only)
    n_untranscribed: int = 60
    n_text: int = 120           # general unpaired sentences
    n_text_indomain: int = 60   # unpaired sentences matching the test domain
    n_test: int = 8


@dataclass
class CorpusConfig:
    languages: list[LanguageCfg]
    n_phonemes: int = 20        # id 0 is the pause phoneme
    feature_dim: int = 16
    noise_sigma: float = 0.05
    words_per_lang: int = 16    # first half is the test/in-domain inventory
    word_len: tuple[int, int] = (2, 2)
    sentence_words: tuple[int, int] = (1, 2)
    duration_range: tuple[int, int] = (1, 3)
    require_disjoint_scripts: bool = False
    family_aligned_lexicons: bool = True
    group_b_paired: bool = False  # oracle corpora only


def default_corpus_config(**overrides) -> CorpusConfig:
    """The 6-language preset: 3 supervised, 3 zero-supervised, group B scripts
    from blocks unseen in group A but in the same block family, so graphemes
    are disjoint while bytes overlap."""
    langs = [
        LanguageCfg("lat", "A", "latin"),
        LanguageCfg("dev", "A", "devanagari"),
        LanguageCfg("tel", "A", "telugu"),
        LanguageCfg("ben", "B", "bengali"),
        LanguageCfg("guj", "B", "gujarati"),
        LanguageCfg("tam", "B", "tamil"),
    ]
    cfg = CorpusConfig(languages=langs, require_disjoint_scripts=True)
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise TypeError(f"unknown corpus config field {k!r}")
        setattr(cfg, k, v)
    return cfg


@dataclass
class Corpus:
    config: CorpusConfig
    languages: list[LanguageSpec]
    utterances: list[Utterance]
    text_pool: list[TextSample]
    phoneme_bases: np.ndarray | None = None  # P x F, generator internal

    def language(self, lang_id: int) -> LanguageSpec:
        return self.languages[lang_id]

    def by_name(self, name: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.name == name:
                return lang
        raise KeyError(name)

    def group(self, group: Group) -> list[LanguageSpec]:
        return [l for l in self.languages if l.group == group]


def _family_offsets(cfg: CorpusConfig, rng: Rng) -> dict[str, list[int]]:
    """One shared offset list per block family, so same-family scripts sit at
    matching in-block positions."""
    sizes: dict[str, int] = {}
    caps: dict[str, int] = {}
    for lc in cfg.languages:
        info = BLOCKS[lc.block]
        sizes[info.family] = max(sizes.get(info.family, 0), lc.script_size)
        caps[info.family] = info.max_offsets
    out = {}
    for fam in sorted(sizes):
        n, cap = sizes[fam], caps[fam]
        if n > cap:
            raise ValueError(f"script_size {n} exceeds block family capacity {cap}")
        offs = rng.key(f"offsets/{fam}").permutation(cap)[:n]
        out[fam] = sorted(int(o) for o in offs)
    return out


def _family_lexicon(offsets: list[int], n_phonemes: int, rng: Rng) -> list[tuple[int, ...]]:
    """Injective offset -> phoneme-sequence map (1 or 2 phonemes, pause excluded)."""
    used: set[tuple[int, ...]] = set()
    seqs: list[tuple[int, ...]] = []
    g = rng.gen
    for _ in offsets:
        while True:
            n = int(g.integers(1, 3))
            seq = tuple(int(g.integers(1, n_phonemes)) for _ in range(n))
            if seq not in used:
                used.add(seq)
                seqs.append(seq)
                break
    return seqs


def _make_sentence(words: list[str], cfg: CorpusConfig, g) -> str:
    n = int(g.integers(cfg.sentence_words[0], cfg.sentence_words[1] + 1))
    return " ".join(words[int(g.integers(0, len(words)))] for _ in range(n))


def synth_features(text: str, lang: LanguageSpec, bases: np.ndarray,
                   cfg: CorpusConfig, rng: Rng) -> tuple[np.ndarray, list[int], list[int]]:
    """Render a sentence to frames: each phoneme's base vector repeated for a
    random 1..3 frame duration, plus white noise. Returns (T x F, ids, durs)."""
    g = rng.gen
    pids = to_phonemes(text, lang)
    lo, hi = cfg.duration_range
    durs = [int(g.integers(lo, hi + 1)) for _ in pids]
    feats = np.repeat(bases[pids], durs, axis=0)
    if cfg.noise_sigma > 0:
        feats = feats + g.normal(0.0, cfg.noise_sigma, size=feats.shape)
    return feats.astype(np.float32), pids, durs


def gen_synthetic_corpus(cfg: CorpusConfig, seed: int) -> Corpus:
    rng = Rng(seed).key("corpus")
    bases = rng.key("phoneme-bases").normal((cfg.n_phonemes, cfg.feature_dim))

    offsets = _family_offsets(cfg, rng)
    lexicons: dict[str, list[tuple[int, ...]]] = {}
    languages: list[LanguageSpec] = []
    seen_scripts: set[str] = set()
    for lang_id, lc in enumerate(cfg.languages):
        info = BLOCKS[lc.block]
        offs = offsets[info.family][:lc.script_size]
        script = tuple(chr(info.start + o) for o in offs)
        overlap = seen_scripts & set(script)
        if overlap and cfg.require_disjoint_scripts:
            raise ValueError(f"script of {lc.name} overlaps an earlier script "
                             f"on {sorted(overlap)} but disjoint scripts were required")
        seen_scripts |= set(script)
        if cfg.family_aligned_lexicons:
            seqs = lexicons.setdefault(
                info.family,
                _family_lexicon(offsets[info.family], cfg.n_phonemes,
                                rng.key(f"lexicon/{info.family}")))
            seqs = seqs[:lc.script_size]
        else:
            seqs = _family_lexicon(offs, cfg.n_phonemes, rng.key(f"lexicon/{lc.name}"))
        languages.append(LanguageSpec(lang_id, lc.name, lc.group, script,
                                      dict(zip(script, seqs))))

    utterances: list[Utterance] = []
    text_pool: list[TextSample] = []
    for lang, lc in zip(languages, cfg.languages):
        wrng = rng.key(f"words/{lang.name}").gen
        lo, hi = cfg.word_len
        words = ["".join(lang.script[int(wrng.integers(0, len(lang.script)))]
                         for _ in range(int(wrng.integers(lo, hi + 1))))
                 for _ in range(cfg.words_per_lang)]
        indomain = words[:cfg.words_per_lang // 2]
        general = words[cfg.words_per_lang // 2:]

        def emit(kind: str, count: int, split: str, word_pool: list[str],
                 transcribed: bool):
            for i in range(count):
                r = rng.key(f"utt/{lang.name}/{kind}/{i}")
                text = _make_sentence(word_pool, cfg, r.key("text").gen)
                feats, pids, durs = synth_features(text, lang, bases, cfg,
                                                   r.key("audio"))
                utterances.append(Utterance(
                    utt_id=f"{lang.name}-{kind}-{i:04d}", lang_id=lang.lang_id,
                    split=split, features=feats,
                    transcript=text if transcribed else None,
                    trace=(pids, durs)))

        paired = lc.n_paired if (lang.group == "A" or cfg.group_b_paired) else 0
        emit("paired", paired, "train", indomain, transcribed=True)
        emit("speech", lc.n_untranscribed, "train", words, transcribed=False)
        emit("test", lc.n_test, "test", indomain, transcribed=True)

        trng = rng.key(f"text/{lang.name}").gen
        for _ in range(lc.n_text):
            text_pool.append(TextSample(_make_sentence(general, cfg, trng),
                                        lang.lang_id, "general"))
        for _ in range(lc.n_text_indomain):
            text_pool.append(TextSample(_make_sentence(indomain, cfg, trng),
                                        lang.lang_id, "indomain"))

    return Corpus(cfg, languages, utterances, text_pool, bases)


# ----------------------------------------------------------- batch composition


@dataclass
class BatchPools:
    """The three training streams a batch is drawn from."""
    speech: list[Utterance]
    text: list[TextSample]
    paired: list[Utterance]


def build_pools(corpus: Corpus, include_in_domain_text: bool = False) -> BatchPools:
    train = [u for u in corpus.utterances if u.split == "train"]
    speech = [u for u in train if u.transcript is None]
    paired = [u for u in train if u.transcript is not None]
    domains = {"general", "indomain"} if include_in_domain_text else {"general"}
    text = [t for t in corpus.text_pool if t.domain in domains]
    return BatchPools(speech, text, paired)


def compose_batch(pools: BatchPools, sizes: tuple[int, int, int],
                  step: int, seed: int) -> MixedBatch:
    """Deterministically sample the (speech, text, paired) sub-batches for one
    step. A size of 0 disables a stream; a requested stream with an empty pool
    is an error naming the stream."""
    n_speech, n_text, n_paired = sizes
    rng = Rng(seed).key(f"batch/{step}")

    def draw(pool, n, name):
        if n == 0:
            return []
        if not pool:
            raise ValueError(f"stream {name!r} requested ({n} items) but its "
                             f"pool is empty")
        idx = rng.key(name).integers(0, len(pool), size=n)
        return [pool[int(i)] for i in idx]

    return MixedBatch(draw(pools.speech, n_speech, "speech"),
                      draw(pools.text, n_text, "text"),
                      draw(pools.paired, n_paired, "paired"))


# ------------------------------------------------------------------ file I/O


def _write_feats(path: Path, feats: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.asarray(feats.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def _read_feats(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    t, f = np.frombuffer(raw[:8], dtype="<u4")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(int(t), int(f)).copy()


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    langs = [{"lang_id": l.lang_id, "name": l.name, "group": l.group,
              "script": list(l.script),
              "lexicon": {g: list(s) for g, s in l.lexicon.items()},
              "text_unit": l.text_unit}
             for l in corpus.languages]
    (out / "languages.json").write_text(
        json.dumps({"n_phonemes": corpus.config.n_phonemes,
                    "feature_dim": corpus.config.feature_dim,
                    "languages": langs}, ensure_ascii=False, indent=1))
    group_of = {l.lang_id: l.group for l in corpus.languages}
    with open(out / "manifest.jsonl", "w") as fh:
        for u in corpus.utterances:
            _write_feats(out / "feats" / f"{u.utt_id}.bin", u.features)
            fh.write(json.dumps({
                "utt_id": u.utt_id, "lang": u.lang_id, "group": group_of[u.lang_id],
                "split": u.split, "text": u.transcript,
                "feats": f"feats/{u.utt_id}.bin"}, ensure_ascii=False) + "\n")
    with open(out / "text_pool.jsonl", "w") as fh:
        for t in corpus.text_pool:
            fh.write(json.dumps({"lang": t.lang_id, "text": t.text,
                                 "domain": t.domain}, ensure_ascii=False) + "\n")


def load_corpus(in_dir) -> Corpus:
    src = Path(in_dir)
    head = json.loads((src / "languages.json").read_text())
    languages = [LanguageSpec(d["lang_id"], d["name"], d["group"],
                              tuple(d["script"]),
                              {g: tuple(s) for g, s in d["lexicon"].items()},
                              d.get("text_unit", "grapheme"))
                 for d in head["languages"]]
    utterances = []
    with open(src / "manifest.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            utterances.append(Utterance(d["utt_id"], d["lang"], d["split"],
                                        _read_feats(src / d["feats"]),
                                        d["text"]))
    text_pool = []
    with open(src / "text_pool.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            text_pool.append(TextSample(d["text"], d["lang"], d["domain"]))
    cfg = CorpusConfig(languages=[], n_phonemes=head["n_phonemes"],
                       feature_dim=head["feature_dim"])
    return Corpus(cfg, languages, utterances, text_pool)

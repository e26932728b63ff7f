"""Assembles the full joint speech-text model around one parameter dict.

A model owns: the conformer speech/shared encoders with per-language adapters,
the text branch, one transducer decoder per active text unit (the grapheme
decoder always exists and produces the final hypotheses; byte or phoneme
decoders are added when that unit drives the text encoder), the decoder-side
and text-side language embeddings, the frozen feature quantizer, and the
self-supervised heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoders, rnnt, selfsup, textpath
from .langdata import (Corpus, LanguageSpec, Vocab, byte_encode, byte_vocab,
                       decoder_grapheme_vocab, phoneme_vocab, to_phonemes)
from .tensor import Rng, Tensor


@dataclass
class ModelConfig:
    conformer: encoders.ConformerConfig = field(
        default_factory=encoders.ConformerConfig)
    text: textpath.TextEncoderConfig = field(
        default_factory=textpath.TextEncoderConfig)
    dec_embed_dim: int = 16
    dec_pred_dim: int = 32
    dec_joint_dim: int = 16
    n_codes: int = 64
    code_dim: int = 16
    text_unit: str = "grapheme"   # unit feeding the text encoder and alignment
    use_dec_lang_embed: bool = True
    use_txt_lang_embed: bool = True
    use_adapters: bool = True

    @property
    def active_units(self) -> list[str]:
        """Decoders to train: the grapheme head always, plus the text unit's
        own head when it is not grapheme."""
        return ["grapheme"] if self.text_unit == "grapheme" \
            else ["grapheme", self.text_unit]


@dataclass
class Model:
    cfg: ModelConfig
    languages: list[LanguageSpec]
    vocabs: dict[str, Vocab]
    decoders: dict[str, rnnt.RnntDecoderConfig]
    quantizer: selfsup.Quantizer
    params: dict[str, Tensor]
    seed: int

    @property
    def n_languages(self) -> int:
        return len(self.languages)

    def language(self, lang_id: int) -> LanguageSpec:
        return self.languages[lang_id]

    # ----------------------------------------------------------- tokenization

    def encode_targets(self, text: str, lang_id: int, unit: str) -> list[int]:
        if unit == "grapheme":
            return self.vocabs["grapheme"].encode(text)
        if unit == "byte":
            return byte_encode(text)
        if unit == "phoneme":
            return to_phonemes(text, self.languages[lang_id])
        raise ValueError(f"unknown unit {unit!r}")

    def text_tokens(self, text: str, lang_id: int) -> list[int]:
        return self.encode_targets(text, lang_id, self.cfg.text_unit)

    # --------------------------------------------------------------- forwards

    def encode_speech(self, features: np.ndarray) -> Tensor:
        return encoders.speech_encode(self.params, self.cfg.conformer,
                                      np.asarray(features, dtype=np.float64))

    def shared(self, latents: Tensor, lang_id: int) -> Tensor:
        return encoders.shared_encode(self.params, self.cfg.conformer, latents,
                                      lang_id, self.cfg.use_adapters,
                                      self.n_languages)

    def decoder_input(self, shared_out: Tensor, lang_id: int) -> Tensor:
        if not self.cfg.use_dec_lang_embed:
            return shared_out
        return rnnt.apply_decoder_lang_embed(shared_out, lang_id,
                                             self.params["dec.lang_embed"])

    def txt_lang(self, lang_id: int) -> int:
        """Language id seen by the text encoder; a single shared row when the
        text-side language embedding is disabled."""
        return lang_id if self.cfg.use_txt_lang_embed else 0

    def swap_in(self, shadow: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Install EMA (or any) weights, returning the previous ones."""
        old = {}
        for k, v in shadow.items():
            old[k] = self.params[k].data
            self.params[k].data = v
        return old


def build_model(corpus: Corpus, cfg: ModelConfig, seed: int) -> Model:
    rng = Rng(seed).key("model")
    languages = corpus.languages
    vocabs = {"grapheme": decoder_grapheme_vocab(languages)}
    if cfg.text_unit == "byte":
        vocabs["byte"] = byte_vocab()
    if cfg.text_unit == "phoneme":
        vocabs["phoneme"] = phoneme_vocab(corpus.config.n_phonemes)

    params: dict[str, Tensor] = {}
    encoders.init_encoder_params(rng, cfg.conformer, params,
                                 n_languages=len(languages))
    textpath.init_textpath_params(rng, cfg.text, params,
                                  vocab_size=vocabs[cfg.text_unit].size + 1,
                                  n_languages=len(languages),
                                  model_dim=cfg.conformer.model_dim)
    decoders = {}
    for unit in cfg.active_units:
        dec = rnnt.RnntDecoderConfig(unit, vocabs[unit], cfg.dec_embed_dim,
                                     cfg.dec_pred_dim, cfg.dec_joint_dim)
        decoders[unit] = dec
        rnnt.init_decoder_params(rng, dec, cfg.conformer.model_dim, params,
                                 prefix=f"dec.{unit}")
    params["dec.lang_embed"] = Tensor(
        np.zeros((len(languages), cfg.conformer.model_dim)), requires_grad=True)
    selfsup.init_selfsup_params(rng, params, cfg.conformer.model_dim,
                                cfg.code_dim, cfg.n_codes)

    train = [u.features for u in corpus.utterances if u.split == "train"]
    stride = max(1, len(train) // 200)  # spread the sample across languages
    sample = train[::stride][:200]
    quantizer = selfsup.fit_quantizer(np.concatenate(sample), cfg.n_codes,
                                      cfg.code_dim, rng.key("quantizer"))
    return Model(cfg, languages, vocabs, decoders, quantizer, params, seed)

"""Transducer decoders: prediction network, joint, exact loss, alignment.

The loss marginalizes over all monotonic alignments of U token emissions and
T blanks. A path interleaves them arbitrarily; the i-th blank consumes frame
i with that frame's blank probability at the current token count, and an
emission uses the probability at the current (frame, token) cell, clamped to
the final frame once all frames are consumed (trailing emissions are legal).
The forward/backward recursions and the Viterbi path all share this one
convention, which an exhaustive path-enumeration oracle pins down in tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .langdata import Vocab
from .tensor import (Rng, ShapeError, Tensor, _make, add, embedding,
                     log_softmax, matmul, reshape, rnn_scan, take_rows, tanh)

NEG_INF = float("-inf")


def _lse2(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


# ------------------------------------------------------------- loss / alignment


def _check_lattice(lat: np.ndarray, targets) -> tuple[int, int]:
    if lat.ndim != 3:
        raise ShapeError(f"lattice must be T x (U+1) x (V+1), got {lat.shape}")
    t_len, u1, v1 = lat.shape
    u_len = len(targets)
    if t_len < 1:
        raise ShapeError("lattice needs at least one frame")
    if u1 != u_len + 1:
        raise ShapeError(f"lattice has {u1} token rows but {u_len} targets")
    if np.isnan(lat).any():
        raise ValueError("NaN in lattice log-probabilities")
    if any(t < 0 or t >= v1 for t in targets):
        raise IndexError(f"target id out of vocabulary range 0..{v1 - 1}")
    return t_len, u_len


def _alpha(lat: np.ndarray, targets, blank: int, t_len: int, u_len: int) -> np.ndarray:
    """alpha[t, u] = log prob of consuming t frames while emitting u tokens."""
    emit = lat[:, np.arange(u_len), targets] if u_len else np.zeros((t_len, 0))
    blk = lat[:, :, blank]
    alpha = np.full((t_len + 1, u_len + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(t_len + 1):
        row = alpha[t]
        if t > 0:
            np.add(alpha[t - 1], blk[t - 1], out=row)
        erow = emit[min(t, t_len - 1)]
        for u in range(1, u_len + 1):
            row[u] = _lse2(row[u], row[u - 1] + erow[u - 1])
    return alpha


def _beta(lat: np.ndarray, targets, blank: int, t_len: int, u_len: int) -> np.ndarray:
    """beta[t, u] = log prob of completing the path from state (t, u)."""
    emit = lat[:, np.arange(u_len), targets] if u_len else np.zeros((t_len, 0))
    blk = lat[:, :, blank]
    beta = np.full((t_len + 1, u_len + 1), NEG_INF)
    beta[t_len, u_len] = 0.0
    for t in range(t_len, -1, -1):
        row = beta[t]
        if t < t_len:
            np.add(beta[t + 1], blk[t], out=row)
        erow = emit[min(t, t_len - 1)]
        if t == t_len:
            row[u_len] = 0.0
        for u in range(u_len - 1, -1, -1):
            row[u] = _lse2(row[u], row[u + 1] + erow[u])
    return beta


def rnnt_loss_from_lattice(lattice: Tensor, targets, blank: int) -> Tensor:
    """Negative log-likelihood of `targets` under the alignment lattice.

    The backward rule computes transition posteriors from the alpha/beta
    recursions rather than taping the recursion itself.
    """
    lat = lattice.data
    t_len, u_len = _check_lattice(lat, targets)
    tgt = list(targets)
    alpha = _alpha(lat, tgt, blank, t_len, u_len)
    log_z = alpha[t_len, u_len]
    loss = -log_z

    def back(g):
        beta = _beta(lat, tgt, blank, t_len, u_len)
        grad = np.zeros_like(lat)
        post_blank = np.exp(alpha[:t_len] + lat[:, :, blank] + beta[1:] - log_z)
        grad[:, :, blank] -= post_blank
        if u_len:
            rows = np.minimum(np.arange(t_len + 1), t_len - 1)
            emit = lat[rows][:, np.arange(u_len), tgt]          # (T+1, U)
            post_emit = np.exp(alpha[:, :u_len] + emit + beta[:, 1:] - log_z)
            t_idx = np.repeat(rows, u_len)
            u_idx = np.tile(np.arange(u_len), t_len + 1)
            v_idx = np.tile(np.asarray(tgt), t_len + 1)
            np.add.at(grad, (t_idx, u_idx, v_idx), -post_emit.reshape(-1))
        return grad * float(g)

    return _make(np.asarray(loss), [(lattice, back)])


@dataclass
class ViterbiAlignment:
    durations: list[int]        # per-token frame counts, summing to T
    emission_frames: list[int]  # frames consumed when each token was emitted
    log_prob: float


def viterbi_alignment(lattice: np.ndarray, targets, blank: int) -> ViterbiAlignment:
    """Best single alignment path; ties prefer taking blanks before emissions.

    Token u's duration counts the frames between its emission and the next
    token's emission; the first token absorbs any leading frames and the last
    any trailing ones, so durations always sum to T.
    """
    lat = np.asarray(lattice, dtype=np.float64)
    t_len, u_len = _check_lattice(lat, targets)
    tgt = list(targets)
    if u_len == 0:
        lp = float(lat[:, 0, blank].sum())
        return ViterbiAlignment([], [], lp)
    emit = lat[:, np.arange(u_len), tgt]
    blk = lat[:, :, blank]
    score = np.full((t_len + 1, u_len + 1), NEG_INF)
    from_emit = np.zeros((t_len + 1, u_len + 1), dtype=bool)
    score[0, 0] = 0.0
    for t in range(t_len + 1):
        row = score[t]
        if t > 0:
            np.add(score[t - 1], blk[t - 1], out=row)
        erow = emit[min(t, t_len - 1)]
        for u in range(1, u_len + 1):
            via_emit = row[u - 1] + erow[u - 1]
            if via_emit >= row[u]:        # tie -> emit arrived last: blanks first
                row[u] = via_emit
                from_emit[t, u] = True
    times: list[int] = []
    t, u = t_len, u_len
    while u > 0:
        if from_emit[t, u]:
            u -= 1
            times.append(t)
        else:
            t -= 1
    times.reverse()
    bounds = [0] + times[1:] + [t_len]
    durations = [bounds[i + 1] - bounds[i] for i in range(u_len)]
    return ViterbiAlignment(durations, times, float(score[t_len, u_len]))


# ---------------------------------------------------------------- decoder model


@dataclass
class RnntDecoderConfig:
    """One transducer head: prediction network plus additive joint."""
    name: str
    vocab: Vocab
    embed_dim: int = 16
    pred_dim: int = 32
    joint_dim: int = 16

    @property
    def blank(self) -> int:
        return self.vocab.blank_id


def init_decoder_params(rng: Rng, cfg: RnntDecoderConfig, enc_dim: int,
                        params: dict[str, Tensor], prefix: str) -> None:
    """The BOS row of the prediction-net embedding reuses the blank id."""
    n_tok = cfg.vocab.size + 1
    r = rng.key(prefix)

    def p(name, shape, scale):
        params[f"{prefix}.{name}"] = Tensor(r.key(name).normal(shape, scale),
                                            requires_grad=True)

    p("embed", (n_tok, cfg.embed_dim), 0.5)
    p("pred.wx", (cfg.embed_dim, cfg.pred_dim), (1.0 / cfg.embed_dim) ** 0.5)
    p("pred.wh", (cfg.pred_dim, cfg.pred_dim), (1.0 / cfg.pred_dim) ** 0.5)
    params[f"{prefix}.pred.h0"] = Tensor(np.zeros(cfg.pred_dim), requires_grad=True)
    params[f"{prefix}.pred.b"] = Tensor(np.zeros(cfg.pred_dim), requires_grad=True)
    p("joint.w_enc", (enc_dim, cfg.joint_dim), (1.0 / enc_dim) ** 0.5)
    p("joint.w_pred", (cfg.pred_dim, cfg.joint_dim), (1.0 / cfg.pred_dim) ** 0.5)
    p("joint.w_out", (cfg.joint_dim, cfg.vocab.size + 1),
      (1.0 / cfg.joint_dim) ** 0.5)


def pred_states(params: dict[str, Tensor], prefix: str, cfg: RnntDecoderConfig,
                targets) -> Tensor:
    """(U+1) x pred_dim states; state u conditions on the first u tokens."""
    ids = [cfg.blank] + list(targets)
    emb = embedding(params[f"{prefix}.embed"], ids)
    return rnn_scan(emb, params[f"{prefix}.pred.h0"], params[f"{prefix}.pred.wx"],
                    params[f"{prefix}.pred.wh"], params[f"{prefix}.pred.b"])


def joint_log_probs(params: dict[str, Tensor], prefix: str, enc_out: Tensor,
                    pred: Tensor) -> Tensor:
    """Full lattice: log softmax of W_out tanh(W_e enc_t + W_p pred_u)."""
    t_len = enc_out.shape[0]
    j = params[f"{prefix}.joint.w_enc"].shape[1]
    a = reshape(matmul(enc_out, params[f"{prefix}.joint.w_enc"]), (t_len, 1, j))
    b = matmul(pred, params[f"{prefix}.joint.w_pred"])
    z = tanh(add(a, b))
    return log_softmax(matmul(z, params[f"{prefix}.joint.w_out"]), axis=-1)


def joint_logits(params: dict[str, Tensor], prefix: str, enc_t: Tensor,
                 pred_u: Tensor) -> Tensor:
    """Single-cell joint, mostly for inspection and decoding."""
    a = matmul(reshape(enc_t, (1, -1)), params[f"{prefix}.joint.w_enc"])
    b = matmul(reshape(pred_u, (1, -1)), params[f"{prefix}.joint.w_pred"])
    z = tanh(add(a, b))
    return reshape(matmul(z, params[f"{prefix}.joint.w_out"]), (-1,))


def rnnt_loss(params: dict[str, Tensor], prefix: str, cfg: RnntDecoderConfig,
              enc_out: Tensor, targets) -> tuple[Tensor, Tensor]:
    """Loss plus the lattice it was computed from (reused for alignment)."""
    pred = pred_states(params, prefix, cfg, targets)
    lattice = joint_log_probs(params, prefix, enc_out, pred)
    return rnnt_loss_from_lattice(lattice, targets, cfg.blank), lattice


def apply_decoder_lang_embed(enc_out: Tensor, lang_id: int,
                             table: Tensor) -> Tensor:
    """Add the language vector to every encoder frame, ahead of the joint."""
    if lang_id < 0 or lang_id >= table.shape[0]:
        raise IndexError(f"unknown lang_id {lang_id}")
    return add(enc_out, take_rows(table, [lang_id]))


def greedy_decode(params: dict[str, Tensor], prefix: str, cfg: RnntDecoderConfig,
                  enc_out: np.ndarray, max_symbols_per_frame: int = 4) -> list[int]:
    """Standard greedy transducer decoding on plain arrays (no tape).

    At each frame, emit argmax tokens until blank wins, capped at
    `max_symbols_per_frame`, then advance. Never returns blank symbols.
    """
    emb = params[f"{prefix}.embed"].data
    wx = params[f"{prefix}.pred.wx"].data
    wh = params[f"{prefix}.pred.wh"].data
    bp = params[f"{prefix}.pred.b"].data
    w_enc = params[f"{prefix}.joint.w_enc"].data
    w_pred = params[f"{prefix}.joint.w_pred"].data
    w_out = params[f"{prefix}.joint.w_out"].data
    enc_proj = np.asarray(enc_out, dtype=np.float64) @ w_enc
    h = np.tanh(emb[cfg.blank] @ wx + params[f"{prefix}.pred.h0"].data @ wh + bp)
    out: list[int] = []
    for t in range(enc_proj.shape[0]):
        for _ in range(max_symbols_per_frame):
            logits = np.tanh(enc_proj[t] + h @ w_pred) @ w_out
            k = int(np.argmax(logits))
            if k == cfg.blank:
                break
            out.append(k)
            h = np.tanh(emb[k] @ wx + h @ wh + bp)
    return out


def dual_decoder_losses(params: dict[str, Tensor], decoders: dict[str, RnntDecoderConfig],
                        enc_out: Tensor, targets_by_unit: dict[str, list[int]],
                        align_unit: str | None = None,
                        ) -> tuple[dict[str, Tensor], list[int] | None]:
    """Independent transducer losses sharing one encoder output.

    Runs every decoder named in `targets_by_unit`; when `align_unit` is given,
    that decoder's lattice also yields Viterbi durations for the text branch.
    """
    losses: dict[str, Tensor] = {}
    durations: list[int] | None = None
    for unit, targets in targets_by_unit.items():
        cfg = decoders[unit]
        loss, lattice = rnnt_loss(params, f"dec.{unit}", cfg, enc_out, targets)
        losses[unit] = loss
        if unit == align_unit:
            ali = viterbi_alignment(lattice.data, targets, cfg.blank)
            durations = ali.durations
    return losses, durations

"""Word-level vocabulary and a small autoregressive caption decoder.

The decoder is one causal self-attention block (4 heads, residual) followed
by an affine map to vocabulary logits.  Teacher-forced training feeds
[visual prefix, BOS, caption tokens] and scores next-token log-likelihoods;
several captions are packed into one forward pass with a block-diagonal
causal mask, so sequences never attend across each other.  The output
affine starts at zero, making untrained logits exactly uniform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Matrix, Node, constant, random_uniform

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
NEG_MASK = -1e9


class Vocabulary:
    """Whitespace word-level token<->id map with fixed special tokens."""

    def __init__(self, words: list[str]):
        seen = set(_SPECIALS)
        cleaned = []
        for w in words:
            if w not in seen:
                seen.add(w)
                cleaned.append(w)
        self.id_to_token = list(_SPECIALS) + cleaned
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        words = sorted({w for t in texts for w in t.lower().split()})
        return cls(words)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str, on_unknown: str = "error") -> list[int]:
        ids = []
        for w in text.lower().split():
            i = self.token_to_id.get(w)
            if i is None:
                if on_unknown == "unk":
                    i = UNK
                else:
                    raise ContractError(f"unknown token {w!r}")
            ids.append(i)
        return ids

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            if not 0 <= i < len(self.id_to_token):
                raise ContractError(f"unknown token id {i}")
            words.append(self.id_to_token[i])
        return " ".join(words)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        tokens = json.loads(text)["tokens"]
        if tokens[:4] != list(_SPECIALS):
            raise ContractError("vocabulary file missing special tokens")
        return cls(tokens[4:])


@dataclass(frozen=True)
class CaptionParams:
    embed: Matrix                 # |V| x d_model token embeddings
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    w_out: Matrix                 # d_model x |V|, zero-initialized
    b_out: Matrix                 # 1 x |V|
    n_heads: int = 4
    max_len: int = 47

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int,
             d_model: int = 768, n_heads: int = 4,
             max_len: int = 47) -> "CaptionParams":
        if d_model % n_heads:
            raise ContractError(f"d_model={d_model} not divisible by {n_heads} heads")
        s = 1.0 / np.sqrt(d_model)
        return cls(embed=random_uniform(rng, vocab_size, d_model, -s, s),
                   wq=random_uniform(rng, d_model, d_model, -s, s),
                   wk=random_uniform(rng, d_model, d_model, -s, s),
                   wv=random_uniform(rng, d_model, d_model, -s, s),
                   wo=random_uniform(rng, d_model, d_model, -s, s),
                   w_out=Matrix.zeros(d_model, vocab_size),
                   b_out=Matrix.zeros(1, vocab_size),
                   n_heads=n_heads,
                   max_len=max_len)

    def named(self) -> dict[str, Matrix]:
        return {"embed": self.embed, "wq": self.wq, "wk": self.wk,
                "wv": self.wv, "wo": self.wo, "w_out": self.w_out,
                "b_out": self.b_out}

    @property
    def d_model(self) -> int:
        return self.embed.cols

    @property
    def vocab_size(self) -> int:
        return self.embed.rows


def _lift_params(params) -> dict[str, Node]:
    if isinstance(params, CaptionParams):
        params = params.named()
    return {k: (v if isinstance(v, Node) else constant(v))
            for k, v in params.items()}


def _decode_states(x: Node, mask: Matrix, p: dict[str, Node],
                   n_heads: int) -> Node:
    """Causal self-attention block with residual; mask is additive."""
    d_model = x.value.cols
    d_head = d_model // n_heads
    q = nm.matmul(x, p["wq"])
    k = nm.matmul(x, p["wk"])
    v = nm.matmul(x, p["wv"])
    ctx = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = nm.slice_cols(q, lo, hi)
        kh = nm.slice_cols(k, lo, hi)
        vh = nm.slice_cols(v, lo, hi)
        att = nm.scalar_mul(nm.matmul(qh, nm.transpose(kh)), 1.0 / np.sqrt(d_head))
        weights = nm.softmax_rows(nm.add(att, mask))
        ctx.append(nm.matmul(weights, vh))
    out = nm.matmul(nm.concat_cols(ctx), p["wo"])
    return nm.add(x, out)


def _logits(states: Node, p: dict[str, Node]) -> Node:
    return nm.add(nm.matmul(states, p["w_out"]), p["b_out"])


def _validate_tokens(tokens, vocab_size: int) -> list[int]:
    out = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < vocab_size:
            raise ContractError(f"unknown token id {t}")
        out.append(t)
    return out


def caption_nll(params, prefixes, token_seqs, n_heads: int = 4) -> Node:
    """Teacher-forced negative log-likelihood, summed per caption over
    positions (targets are the caption tokens then EOS) and averaged over
    the batch.  All captions are packed into one forward pass under a
    block-diagonal causal mask."""
    p = _lift_params(params)
    vocab_size = p["embed"].value.rows
    if len(prefixes) != len(token_seqs) or not token_seqs:
        raise ContractError("caption_nll: one prefix per caption required")

    seqs = [_validate_tokens(t, vocab_size) for t in token_seqs]
    parts = []
    pred_rows = []      # rows of the packed input whose output is scored
    targets = []
    seq_of_row = []
    offset = 0
    for prefix, toks in zip(prefixes, seqs):
        pref = prefix if isinstance(prefix, Node) else constant(prefix)
        ids = [BOS] + toks
        parts.append(nm.concat_rows([pref, nm.gather_rows(p["embed"], ids)]))
        tgt = toks + [EOS]
        for j, t in enumerate(tgt):
            pred_rows.append(offset + 1 + j)
            targets.append(t)
        length = len(ids) + 1
        seq_of_row.extend([len(parts) - 1] * length)
        offset += length

    x = nm.concat_rows(parts)
    total = offset
    seq_ids = np.asarray(seq_of_row)
    causal = np.tril(np.ones((total, total)))
    same_seq = (seq_ids[:, None] == seq_ids[None, :])
    mask = Matrix(np.where(causal * same_seq > 0, 0.0, NEG_MASK))

    states = _decode_states(x, mask, p, n_heads)
    logprobs = nm.log_softmax_rows(_logits(states, p))
    picked = nm.gather_rows(logprobs, pred_rows)
    onehot = np.zeros((len(targets), vocab_size))
    onehot[np.arange(len(targets)), targets] = 1.0
    summed = nm.reduce_sum(nm.elementwise_mul(picked, Matrix(onehot)))
    return nm.scalar_mul(summed, -1.0 / len(seqs))


def step_logits(params, prefix, tokens, n_heads: int = 4) -> np.ndarray:
    """Logits at every position for one [prefix, BOS, tokens...] sequence."""
    p = _lift_params(params)
    pref = prefix if isinstance(prefix, Node) else constant(prefix)
    ids = [BOS] + _validate_tokens(tokens, p["embed"].value.rows)
    x = nm.concat_rows([pref, nm.gather_rows(p["embed"], ids)])
    t = x.value.rows
    mask = Matrix(np.where(np.tril(np.ones((t, t))) > 0, 0.0, NEG_MASK))
    states = _decode_states(x, mask, p, n_heads)
    return _logits(states, p).value.data


def generate(params, prefix, max_len: int | None = None, mode: str = "greedy",
             temperature: float = 1.0,
             rng: np.random.Generator | None = None) -> list[int]:
    """Autoregressive decoding; stops at EOS or `max_len` tokens.

    Greedy mode is deterministic (argmax, ties to the lowest id); sampling
    mode draws from the temperature-scaled distribution using `rng`.
    """
    if isinstance(params, CaptionParams) and max_len is None:
        max_len = params.max_len
    if max_len is None:
        max_len = 47
    if mode not in ("greedy", "sample"):
        raise ContractError(f"unknown generation mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ContractError("sampling mode needs an rng")
    n_heads = params.n_heads if isinstance(params, CaptionParams) else 4

    tokens: list[int] = []
    for _ in range(max_len):
        logits = step_logits(params, prefix, tokens, n_heads)[-1]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            z -= z.max()
            prob = np.exp(z)
            prob /= prob.sum()
            nxt = int(rng.choice(len(prob), p=prob))
        if nxt == EOS:
            break
        tokens.append(nxt)
    return tokens

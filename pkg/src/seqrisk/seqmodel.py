"""Miniature pre-norm Transformer encoder-decoder built on numkit.

Sized so that a full training run takes minutes on one CPU core.  The
public single-sequence entry points (``encode``, ``forward_teacher_forced``,
``decode_step``) are thin wrappers over the batched internals that training
and decoding use directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from . import numkit as nk
from .errors import ContractError, LengthError, ShapeError, VocabularyError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

CHECKPOINT_FORMAT = "seqrisk-checkpoint-v1"
NEG_INF_FILL = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    num_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    dropout_rate: float = 0.1
    max_seq_len: int = 32
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ContractError(f"vocab_size must be >= 5 (4 specials + content), got {self.vocab_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 2:
            raise ContractError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Vocabulary:
    """Bidirectional token/id map with the four reserved ids fixed up front."""

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token: list[str] = list(SPECIAL_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        for tok in tokens:
            if tok in self._token_to_id:
                raise VocabularyError(f"duplicate or reserved token: {tok!r}")
            self._token_to_id[tok] = len(self._id_to_token)
            self._id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        """Map a token to its id; unknown tokens map to the UNK id."""
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise VocabularyError(f"id {idx} outside vocabulary of size {len(self)}")
        return self._id_to_token[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_specials and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.token_of(int(i)))
        return out

    def content_tokens(self) -> list[str]:
        return self._id_to_token[len(SPECIAL_TOKENS):]

    def to_json(self) -> str:
        return json.dumps({"tokens": self.content_tokens()})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text)["tokens"])


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class ParameterStore:
    """Named, shaped parameter tensors plus the step counter; the checkpoint unit."""

    def __init__(self, config: ModelConfig, params: dict[str, nk.Tensor], step_count: int = 0):
        self.config = config
        self._params = params
        self.step_count = step_count

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=None) -> "ParameterStore":
        dtype = dtype or nk.DEFAULT_DTYPE
        rng = np.random.default_rng(seed)
        d, f, v = config.embed_dim, config.ffn_dim, config.vocab_size
        p: dict[str, np.ndarray] = {}

        if config.tie_embeddings:
            p["embed.shared"] = _xavier(rng, v, d, dtype)
        else:
            p["embed.src"] = _xavier(rng, v, d, dtype)
            p["embed.tgt"] = _xavier(rng, v, d, dtype)
            p["out.weight"] = _xavier(rng, v, d, dtype)

        def attn_block(prefix: str):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{prefix}.{w}"] = _xavier(rng, d, d, dtype)

        def ln_block(prefix: str):
            p[f"{prefix}.gain"] = np.ones(d, dtype=dtype)
            p[f"{prefix}.bias"] = np.zeros(d, dtype=dtype)

        def ffn_block(prefix: str):
            p[f"{prefix}.w1"] = _xavier(rng, d, f, dtype)
            p[f"{prefix}.b1"] = np.zeros(f, dtype=dtype)
            p[f"{prefix}.w2"] = _xavier(rng, f, d, dtype)
            p[f"{prefix}.b2"] = np.zeros(d, dtype=dtype)

        for i in range(config.enc_layers):
            ln_block(f"enc.{i}.ln1")
            attn_block(f"enc.{i}.attn")
            ln_block(f"enc.{i}.ln2")
            ffn_block(f"enc.{i}.ffn")
        ln_block("enc.final_ln")

        for i in range(config.dec_layers):
            ln_block(f"dec.{i}.ln1")
            attn_block(f"dec.{i}.self")
            ln_block(f"dec.{i}.ln2")
            attn_block(f"dec.{i}.cross")
            ln_block(f"dec.{i}.ln3")
            ffn_block(f"dec.{i}.ffn")
        ln_block("dec.final_ln")

        tensors = {name: nk.Tensor(arr, requires_grad=True) for name, arr in p.items()}
        return cls(config, tensors, step_count=0)

    def __getitem__(self, name: str) -> nk.Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    @property
    def dtype(self):
        return next(iter(self._params.values())).dtype

    def zero_grads(self) -> None:
        nk.zero_grads(self._params.values())

    def copy(self) -> "ParameterStore":
        params = {n: nk.Tensor(t.data.copy(), requires_grad=True) for n, t in self._params.items()}
        return ParameterStore(self.config, params, self.step_count)

    def src_embedding(self) -> nk.Tensor:
        return self["embed.shared"] if self.config.tie_embeddings else self["embed.src"]

    def tgt_embedding(self) -> nk.Tensor:
        return self["embed.shared"] if self.config.tie_embeddings else self["embed.tgt"]

    def output_weight(self) -> nk.Tensor:
        return self["embed.shared"] if self.config.tie_embeddings else self["out.weight"]

    # -- checkpoint io -----------------------------------------------------

    def save(self, path) -> None:
        """Write a manifest line (JSON) followed by raw little-endian payloads."""
        entries = []
        payload = bytearray()
        for name, t in self._params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "offset": len(payload)})
            payload.extend(raw)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "step_count": self.step_count,
            "tensors": entries,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(bytes(payload))

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            header = fh.readline()
            payload = fh.read()
        manifest = json.loads(header.decode("utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"not a {CHECKPOINT_FORMAT} file: {path}")
        config = ModelConfig.from_dict(manifest["config"])
        params: dict[str, nk.Tensor] = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            start = entry["offset"]
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            params[entry["name"]] = nk.Tensor(
                np.ascontiguousarray(arr.reshape(shape)), requires_grad=True)
        return cls(config, params, step_count=manifest["step_count"])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def sinusoid_table(max_len: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal position encodings, shape [max_len, dim]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def _validate_ids(ids: np.ndarray, config: ModelConfig, what: str) -> None:
    if ids.shape[-1] > config.max_seq_len:
        raise LengthError(
            f"{what} length {ids.shape[-1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.shape[-1] < 1:
        raise LengthError(f"{what} must contain at least one token")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise VocabularyError(
            f"{what} ids out of range for vocab_size {config.vocab_size}")


def _dropout(x: nk.Tensor, rate: float, rng: np.random.Generator | None) -> nk.Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    return nk.mul(x, nk.Tensor(keep))


def _attention(store: ParameterStore, prefix: str, query_x: nk.Tensor, key_x: nk.Tensor,
               mask: np.ndarray | None, rng: np.random.Generator | None) -> nk.Tensor:
    """Multi-head attention; `mask` is a bool array broadcastable to
    [batch, heads, q_len, k_len] marking positions to suppress."""
    cfg = store.config
    h = cfg.num_heads
    dh = cfg.embed_dim // h
    bsz, q_len, _ = query_x.shape
    k_len = key_x.shape[1]

    def split_heads(t: nk.Tensor, length: int) -> nk.Tensor:
        t = nk.reshape(t, (bsz, length, h, dh))
        return nk.transpose(t, (0, 2, 1, 3))

    q = split_heads(nk.matmul(query_x, store[f"{prefix}.wq"]), q_len)
    k = split_heads(nk.matmul(key_x, store[f"{prefix}.wk"]), k_len)
    v = split_heads(nk.matmul(key_x, store[f"{prefix}.wv"]), k_len)

    scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = nk.masked_fill(scores, mask, NEG_INF_FILL)
    weights = _dropout(nk.softmax(scores), cfg.dropout_rate, rng)
    context = nk.matmul(weights, v)
    context = nk.reshape(nk.transpose(context, (0, 2, 1, 3)), (bsz, q_len, cfg.embed_dim))
    return nk.matmul(context, store[f"{prefix}.wo"])


def _ffn(store: ParameterStore, prefix: str, x: nk.Tensor,
         rng: np.random.Generator | None) -> nk.Tensor:
    cfg = store.config
    hidden = nk.relu(nk.add(nk.matmul(x, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]))
    hidden = _dropout(hidden, cfg.dropout_rate, rng)
    return nk.add(nk.matmul(hidden, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def _ln(store: ParameterStore, prefix: str, x: nk.Tensor) -> nk.Tensor:
    return nk.layer_norm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"])


def _embed(store: ParameterStore, weight: nk.Tensor, ids: np.ndarray,
           rng: np.random.Generator | None) -> nk.Tensor:
    cfg = store.config
    x = nk.scale(nk.embedding(weight, ids), math.sqrt(cfg.embed_dim))
    table = sinusoid_table(cfg.max_seq_len, cfg.embed_dim, dtype=store.dtype)
    x = nk.add(x, nk.Tensor(table[: ids.shape[-1]]))
    return _dropout(x, cfg.dropout_rate, rng)


def encode_batch(store: ParameterStore, src_ids: np.ndarray,
                 rng: np.random.Generator | None = None) -> nk.Tensor:
    """Encoder over a [batch, src_len] id array (PAD-aware); returns
    memory [batch, src_len, embed_dim]."""
    src_ids = np.asarray(src_ids, dtype=np.int64)
    _validate_ids(src_ids, store.config, "source")
    pad_mask = (src_ids == PAD_ID)[:, None, None, :]  # [B,1,1,Ls]
    use_mask = pad_mask if pad_mask.any() else None

    x = _embed(store, store.src_embedding(), src_ids, rng)
    for i in range(store.config.enc_layers):
        normed = _ln(store, f"enc.{i}.ln1", x)
        attn = _attention(store, f"enc.{i}.attn", normed, normed, use_mask, rng)
        x = nk.add(x, _dropout(attn, store.config.dropout_rate, rng))
        ff = _ffn(store, f"enc.{i}.ffn", _ln(store, f"enc.{i}.ln2", x), rng)
        x = nk.add(x, _dropout(ff, store.config.dropout_rate, rng))
    return _ln(store, "enc.final_ln", x)


def decode_batch(store: ParameterStore, memory: nk.Tensor, src_ids: np.ndarray,
                 tgt_ids: np.ndarray, rng: np.random.Generator | None = None) -> nk.Tensor:
    """Decoder over [batch, tgt_len] inputs given encoder memory; returns
    log-probability rows [batch, tgt_len, vocab].  Row t conditions on
    target positions <= t (causal) and on non-PAD source positions."""
    cfg = store.config
    tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
    src_ids = np.asarray(src_ids, dtype=np.int64)
    _validate_ids(tgt_ids, cfg, "target")
    t_len = tgt_ids.shape[-1]

    causal = np.triu(np.ones((t_len, t_len), dtype=bool), k=1)[None, None, :, :]
    tgt_pad = (tgt_ids == PAD_ID)[:, None, None, :]
    self_mask = causal | tgt_pad if tgt_pad.any() else causal
    mem_pad = (src_ids == PAD_ID)[:, None, None, :]
    cross_mask = mem_pad if mem_pad.any() else None

    x = _embed(store, store.tgt_embedding(), tgt_ids, rng)
    for i in range(cfg.dec_layers):
        normed = _ln(store, f"dec.{i}.ln1", x)
        attn = _attention(store, f"dec.{i}.self", normed, normed, self_mask, rng)
        x = nk.add(x, _dropout(attn, cfg.dropout_rate, rng))
        cross = _attention(store, f"dec.{i}.cross", _ln(store, f"dec.{i}.ln2", x),
                           memory, cross_mask, rng)
        x = nk.add(x, _dropout(cross, cfg.dropout_rate, rng))
        ff = _ffn(store, f"dec.{i}.ffn", _ln(store, f"dec.{i}.ln3", x), rng)
        x = nk.add(x, _dropout(ff, cfg.dropout_rate, rng))
    x = _ln(store, "dec.final_ln", x)
    logits = nk.matmul(x, nk.transpose(store.output_weight(), (1, 0)))
    return nk.log_softmax(logits)


# -- single-sequence wrappers ------------------------------------------------


def encode(store: ParameterStore, src: Sequence[int]) -> nk.Tensor:
    """Encode one id sequence; returns memory [len, embed_dim]."""
    memory = encode_batch(store, np.asarray([src], dtype=np.int64))
    return nk.reshape(memory, memory.shape[1:])


def forward_teacher_forced(store: ParameterStore, src: Sequence[int],
                           tgt: Sequence[int]) -> nk.Tensor:
    """Log-probability rows [len(tgt), vocab]; row t is the next-token
    log-distribution after consuming tgt[0..t]."""
    tgt = list(tgt)
    if not tgt or tgt[0] != BOS_ID:
        raise ContractError("target must begin with BOS")
    src_arr = np.asarray([src], dtype=np.int64)
    memory = encode_batch(store, src_arr)
    rows = decode_batch(store, memory, src_arr, np.asarray([tgt], dtype=np.int64))
    return nk.reshape(rows, rows.shape[1:])


def decode_step(store: ParameterStore, memory: nk.Tensor,
                prefix: Sequence[int], src: Sequence[int]) -> nk.Tensor:
    """Next-token log-distribution [vocab] given a BOS-led prefix; equals the
    last row of the teacher-forced pass over the same prefix."""
    prefix = list(prefix)
    if not prefix or prefix[0] != BOS_ID:
        raise ContractError("prefix must begin with BOS")
    mem = nk.reshape(memory, (1,) + tuple(memory.shape))
    rows = decode_batch(store, mem, np.asarray([src], dtype=np.int64),
                        np.asarray([prefix], dtype=np.int64))
    return nk.reshape(nk.narrow(rows, 1, len(prefix) - 1, 1), (rows.shape[-1],))

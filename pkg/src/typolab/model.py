"""Transformer encoder, 2-layer bottleneck decoder, and cross-encoder reranker.

The decoder receives the encoder's [CLS] vector in place of its own [CLS]
embedding, so everything the decoder reconstructs must flow through that
bottleneck. The MLM head is tied to the token-embedding table (the output
projection literally is the table's transpose).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, pack_text, save_tensors, unpack_text
from .errors import ContractViolation
from .tokenizer import CLS, PAD, SEP

NEG_INF = -1e9


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    ffn_dim: int = 256
    vocab_size: int = 2000
    max_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractViolation(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.decoder_layers != 2:
            raise ContractViolation("the bottleneck decoder is fixed at 2 layers")

    def to_text(self) -> str:
        pairs = sorted(vars(self).items())
        return "\n".join(f"{k} = {v}" for k, v in pairs) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            kwargs[key] = float(value) if key == "dropout" else int(value)
        return cls(**kwargs)


_BLOCK_PARAMS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
)


def _init_block(params: dict[str, Tensor], prefix: str, cfg: ModelConfig, rng: np.random.Generator):
    d, f = cfg.d_model, cfg.ffn_dim

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, shape).astype(np.float32), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    params[f"{prefix}/wq"] = w((d, d))
    params[f"{prefix}/bq"] = zeros((d,))
    params[f"{prefix}/wk"] = w((d, d))
    params[f"{prefix}/bk"] = zeros((d,))
    params[f"{prefix}/wv"] = w((d, d))
    params[f"{prefix}/bv"] = zeros((d,))
    params[f"{prefix}/wo"] = w((d, d))
    params[f"{prefix}/bo"] = zeros((d,))
    params[f"{prefix}/ln1_g"] = ones((d,))
    params[f"{prefix}/ln1_b"] = zeros((d,))
    params[f"{prefix}/w1"] = w((d, f))
    params[f"{prefix}/b1"] = zeros((f,))
    params[f"{prefix}/w2"] = w((f, d))
    params[f"{prefix}/b2"] = zeros((d,))
    params[f"{prefix}/ln2_g"] = ones((d,))
    params[f"{prefix}/ln2_b"] = zeros((d,))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh encoder-decoder parameters; call init_decoder_from_encoder next."""
    params: dict[str, Tensor] = {}
    d = cfg.d_model
    params["emb/token"] = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, d)).astype(np.float32), requires_grad=True)
    params["emb/pos"] = Tensor(rng.normal(0.0, 0.02, (cfg.max_len, d)).astype(np.float32), requires_grad=True)
    params["emb/ln_g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["emb/ln_b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params["mlm/bias"] = Tensor(np.zeros(cfg.vocab_size, dtype=np.float32), requires_grad=True)
    for i in range(cfg.encoder_layers):
        _init_block(params, f"enc{i}", cfg, rng)
    params["enc/out_ln_g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["enc/out_ln_b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params["dec/pos"] = Tensor(params["emb/pos"].data.copy(), requires_grad=True)
    params["dec/ln_g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["dec/ln_b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    for i in range(cfg.decoder_layers):
        _init_block(params, f"dec{i}", cfg, rng)
    params["dec/out_ln_g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["dec/out_ln_b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    return params


def init_decoder_from_encoder(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    """Copy the last two encoder blocks (and embedding-side norms/positions)
    into the decoder; the copies diverge during training."""
    if cfg.encoder_layers < 2:
        raise ContractViolation("decoder initialization needs an encoder with >= 2 layers")
    for j, i in enumerate(range(cfg.encoder_layers - 2, cfg.encoder_layers)):
        for name in _BLOCK_PARAMS:
            params[f"dec{j}/{name}"].data = params[f"enc{i}/{name}"].data.copy()
    params["dec/pos"].data = params["emb/pos"].data.copy()
    params["dec/ln_g"].data = params["emb/ln_g"].data.copy()
    params["dec/ln_b"].data = params["emb/ln_b"].data.copy()
    params["dec/out_ln_g"].data = params["enc/out_ln_g"].data.copy()
    params["dec/out_ln_b"].data = params["enc/out_ln_b"].data.copy()


def encoder_param_names(cfg: ModelConfig) -> list[str]:
    names = ["emb/token", "emb/pos", "emb/ln_g", "emb/ln_b", "mlm/bias",
             "enc/out_ln_g", "enc/out_ln_b"]
    for i in range(cfg.encoder_layers):
        names.extend(f"enc{i}/{p}" for p in _BLOCK_PARAMS)
    return names


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD; mask is 1.0 on real positions."""
    n = max(len(s) for s in sequences)
    ids = np.full((len(sequences), n), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), n), dtype=np.float32)
    for r, seq in enumerate(sequences):
        ids[r, : len(seq)] = seq
        mask[r, : len(seq)] = 1.0
    return ids, mask


def _mask_bias(mask: np.ndarray) -> Tensor:
    return Tensor(((1.0 - mask) * NEG_INF)[:, None, None, :].astype(np.float32))


def _affine_ln(x: Tensor, params, prefix: str) -> Tensor:
    return ad.layer_norm(x) * params[f"{prefix}_g"] + params[f"{prefix}_b"]


def _block_forward(
    x: Tensor,
    bias: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    train_rng: Optional[np.random.Generator],
) -> Tensor:
    """Pre-norm transformer block (normalize, transform, residual-add)."""
    b, n, d = x.shape
    h, hd = cfg.n_heads, cfg.d_model // cfg.n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, n, h, hd)), (0, 2, 1, 3))

    a_in = _affine_ln(x, params, f"{prefix}/ln1")
    q = heads(ad.matmul(a_in, params[f"{prefix}/wq"]) + params[f"{prefix}/bq"])
    k = heads(ad.matmul(a_in, params[f"{prefix}/wk"]) + params[f"{prefix}/bk"])
    v = heads(ad.matmul(a_in, params[f"{prefix}/wv"]) + params[f"{prefix}/bv"])
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / float(np.sqrt(hd)))
    attn = ad.softmax(scores + bias, axis=-1)
    if train_rng is not None and cfg.dropout > 0.0:
        attn = ad.dropout(attn, cfg.dropout, train_rng)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    out = ad.matmul(ctx, params[f"{prefix}/wo"]) + params[f"{prefix}/bo"]
    if train_rng is not None and cfg.dropout > 0.0:
        out = ad.dropout(out, cfg.dropout, train_rng)
    x = x + out
    f_in = _affine_ln(x, params, f"{prefix}/ln2")
    ffn = ad.matmul(ad.gelu(ad.matmul(f_in, params[f"{prefix}/w1"]) + params[f"{prefix}/b1"]),
                    params[f"{prefix}/w2"]) + params[f"{prefix}/b2"]
    if train_rng is not None and cfg.dropout > 0.0:
        ffn = ad.dropout(ffn, cfg.dropout, train_rng)
    return x + ffn


def _embed(params, cfg, ids: np.ndarray, pos_key: str, ln_prefix: str, train_rng) -> Tensor:
    n = ids.shape[1]
    x = ad.embedding_lookup(params["emb/token"], ids) + ad.slice_axis(params[pos_key], 0, 0, n)
    x = _affine_ln(x, params, ln_prefix)
    if train_rng is not None and cfg.dropout > 0.0:
        x = ad.dropout(x, cfg.dropout, train_rng)
    return x


def _mlm_logits(params, hidden: Tensor) -> Tensor:
    b, n, d = hidden.shape
    flat = ad.reshape(hidden, (b * n, d))
    logits = ad.matmul(flat, ad.transpose(params["emb/token"])) + params["mlm/bias"]
    return ad.reshape(logits, (b, n, params["emb/token"].shape[0]))


def encoder_hidden(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    train_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Final-layer hidden states [b, n, d] of the encoder stack."""
    n = ids.shape[1]
    if n > cfg.max_len:
        raise ContractViolation(f"sequence length {n} exceeds max_len {cfg.max_len}")
    bias = _mask_bias(mask)
    x = _embed(params, cfg, ids, "emb/pos", "emb/ln", train_rng)
    for i in range(cfg.encoder_layers):
        x = _block_forward(x, bias, params, f"enc{i}", cfg, train_rng)
    return _affine_ln(x, params, "enc/out_ln")


def cls_of(hidden: Tensor, cfg: ModelConfig) -> Tensor:
    return ad.reshape(ad.slice_axis(hidden, 1, 0, 1), (hidden.shape[0], cfg.d_model))


def encode(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    with_mlm_logits: bool = True,
    train_rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Optional[Tensor]]:
    """Run the encoder stack: ([CLS] embeddings [b, d], token logits [b, n, V])."""
    x = encoder_hidden(params, cfg, ids, mask, train_rng)
    logits = _mlm_logits(params, x) if with_mlm_logits else None
    return cls_of(x, cfg), logits


def decoder_hidden(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    cls: Tensor,
    dec_ids: np.ndarray,
    dec_mask: np.ndarray,
    train_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Decoder hidden states with the encoder bottleneck in the [CLS] slot."""
    b, m = dec_ids.shape
    if cls.shape[0] != b:
        raise ContractViolation(f"cls batch {cls.shape[0]} != decoder batch {b}")
    if m > cfg.max_len:
        raise ContractViolation(f"sequence length {m} exceeds max_len {cfg.max_len}")
    emb = ad.embedding_lookup(params["emb/token"], dec_ids)
    rest = ad.slice_axis(emb, 1, 1, m)
    x = ad.concat([ad.reshape(cls, (b, 1, cfg.d_model)), rest], axis=1)
    x = x + ad.slice_axis(params["dec/pos"], 0, 0, m)
    x = _affine_ln(x, params, "dec/ln")
    if train_rng is not None and cfg.dropout > 0.0:
        x = ad.dropout(x, cfg.dropout, train_rng)
    bias = _mask_bias(dec_mask)
    for i in range(cfg.decoder_layers):
        x = _block_forward(x, bias, params, f"dec{i}", cfg, train_rng)
    return _affine_ln(x, params, "dec/out_ln")


def decode(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    cls: Tensor,
    dec_ids: np.ndarray,
    dec_mask: np.ndarray,
    train_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Decoder logits with the encoder bottleneck in the [CLS] slot."""
    return _mlm_logits(params, decoder_hidden(params, cfg, cls, dec_ids, dec_mask, train_rng))


def masked_lm_loss(
    params: dict[str, Tensor],
    hidden: Tensor,
    flat_positions: np.ndarray,
    targets: np.ndarray,
) -> Tensor:
    """Tied-head cross-entropy computed only at the masked rows.

    Equivalent to running the full MLM head and masking, but the head
    matmul touches len(flat_positions) rows instead of b*n."""
    b, n, d = hidden.shape
    if len(flat_positions) == 0:
        return Tensor(np.zeros((), dtype=hidden.data.dtype))
    flat = ad.reshape(hidden, (b * n, d))
    rows = ad.embedding_lookup(flat, np.asarray(flat_positions, dtype=np.int64))
    logits = ad.matmul(rows, ad.transpose(params["emb/token"])) + params["mlm/bias"]
    return ad.cross_entropy(logits, targets, np.arange(len(flat_positions)))


def cls_embeddings(params, cfg, sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """Inference-mode [CLS] vectors for a list of id sequences."""
    ids, mask = pad_batch(sequences)
    with ad.no_grad():
        cls, _ = encode(params, cfg, ids, mask, with_mlm_logits=False)
    return cls.data


# ---------------------------------------------------------------------------
# cross-encoder reranker


def init_reranker_params(
    cfg: ModelConfig,
    rng: np.random.Generator,
    from_encoder: Optional[dict[str, Tensor]] = None,
) -> dict[str, Tensor]:
    """Reranker = encoder stack + scalar scoring head over [CLS].

    When `from_encoder` is given, the shared stack starts from those
    weights (the desk-scale analogue of starting from a pre-trained
    checkpoint)."""
    params: dict[str, Tensor] = {}
    d = cfg.d_model
    params["emb/token"] = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, d)).astype(np.float32), requires_grad=True)
    params["emb/pos"] = Tensor(rng.normal(0.0, 0.02, (cfg.max_len, d)).astype(np.float32), requires_grad=True)
    params["emb/ln_g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["emb/ln_b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    for i in range(cfg.encoder_layers):
        _init_block(params, f"enc{i}", cfg, rng)
    params["enc/out_ln_g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["enc/out_ln_b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params["head/w"] = Tensor(rng.normal(0.0, 0.02, (d, 1)).astype(np.float32), requires_grad=True)
    params["head/b"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    if from_encoder is not None:
        for name, tensor in from_encoder.items():
            if name in params and name != "mlm/bias":
                params[name].data = tensor.data.copy()
    return params


def build_pair_ids(query_ids: Sequence[int], passage_ids: Sequence[int], max_len: int) -> list[int]:
    """[CLS] query [SEP] passage [SEP], truncating the passage first."""
    q = list(query_ids)[: max_len - 3]
    p = list(passage_ids)[: max(0, max_len - 3 - len(q))]
    return [CLS] + q + [SEP] + p + [SEP]


def rerank_scores(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    train_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """One unbounded matching score per joint (query, passage) sequence."""
    b, n = ids.shape
    if n > cfg.max_len:
        raise ContractViolation(f"sequence length {n} exceeds max_len {cfg.max_len}")
    bias = _mask_bias(mask)
    x = _embed(params, cfg, ids, "emb/pos", "emb/ln", train_rng)
    for i in range(cfg.encoder_layers):
        x = _block_forward(x, bias, params, f"enc{i}", cfg, train_rng)
    x = _affine_ln(x, params, "enc/out_ln")
    cls = ad.reshape(ad.slice_axis(x, 1, 0, 1), (b, cfg.d_model))
    return ad.reshape(ad.matmul(cls, params["head/w"]) + params["head/b"], (b,))


# ---------------------------------------------------------------------------
# persistence


def save_model(path, params: dict[str, Tensor], cfg: ModelConfig,
               extra: Optional[dict[str, np.ndarray]] = None) -> None:
    tensors = {name: t.data for name, t in params.items()}
    tensors["meta/config"] = pack_text(cfg.to_text())
    if extra:
        for name, arr in extra.items():
            tensors[f"opt/{name}"] = arr
    save_tensors(path, tensors)


def load_model(path) -> tuple[dict[str, Tensor], ModelConfig, dict[str, np.ndarray]]:
    tensors = load_tensors(path)
    cfg = ModelConfig.from_text(unpack_text(tensors.pop("meta/config")))
    extra = {}
    params = {}
    for name, arr in tensors.items():
        if name.startswith("opt/"):
            extra[name[len("opt/"):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return params, cfg, extra

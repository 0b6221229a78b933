"""A small transformer encoder with KGE injection and an entity-linking head.

Everything runs in float64 so that finite-difference checks are meaningful.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CLS, MASK, PAD, SPECIAL_TOKENS, TokenizedDocument, Vocabulary, extended_embedding_matrix

DTYPE = torch.float64
LN_EPS = 1e-12


@dataclass
class EncoderConfig:
    vocab_size: int
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 0
    max_len: int = 64
    injection_layer: int = 3
    candidates: int = 5
    kge_dim: int = 0
    pooling: str = "mean"
    el_candidates_only: bool = False
    init_std: float = 0.02
    seed: int = 0
    pad_id: int = 0
    cls_id: int = 2
    mask_id: int = 4
    num_special: int = len(SPECIAL_TOKENS)

    def __post_init__(self):
        if self.ffn <= 0:
            self.ffn = 4 * self.hidden
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        if self.injection_layer and not 1 <= self.injection_layer <= self.num_layers:
            raise ValueError("injection layer must lie in 1..num_layers")
        if self.candidates < 1:
            raise ValueError("candidate count must be at least 1")
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in asdict(self).items():
                fh.write(f"{key}={value}\n")

    @classmethod
    def load(cls, path) -> "EncoderConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                key, _, value = line.strip().partition("=")
                if key not in types:
                    continue
                kind = types[key]
                if kind in ("int", int):
                    kwargs[key] = int(value)
                elif kind in ("float", float):
                    kwargs[key] = float(value)
                elif kind in ("bool", bool):
                    kwargs[key] = value == "True"
                else:
                    kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, **kwargs) -> "EncoderConfig":
        ids = vocab.special_ids()
        return cls(vocab_size=len(vocab), pad_id=ids[PAD], cls_id=ids[CLS], mask_id=ids[MASK], **kwargs)


def layer_norm(x, weight, bias):
    return F.layer_norm(x, x.shape[-1:], weight, bias, LN_EPS)


class Block(nn.Module):
    """Post-norm transformer block (attention then feed-forward)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.hidden
        self.heads = cfg.heads
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.o = nn.Linear(d, d, dtype=DTYPE)
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS, dtype=DTYPE)
        self.ff1 = nn.Linear(d, cfg.ffn, dtype=DTYPE)
        self.ff2 = nn.Linear(cfg.ffn, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS, dtype=DTYPE)

    def attention_probs(self, x, key_mask):
        B, T, d = x.shape
        dk = d // self.heads
        q = self.q(x).view(B, T, self.heads, dk).transpose(1, 2)
        k = self.k(x).view(B, T, self.heads, dk).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(x.dtype).min)
        return torch.softmax(scores, dim=-1)

    def forward(self, x, key_mask=None):
        B, T, d = x.shape
        dk = d // self.heads
        probs = self.attention_probs(x, key_mask)
        v = self.v(x).view(B, T, self.heads, dk).transpose(1, 2)
        ctx = (probs @ v).transpose(1, 2).reshape(B, T, d)
        x = self.ln1(x + self.o(ctx))
        return self.ln2(x + self.ff2(F.gelu(self.ff1(x))))


@dataclass
class LinkerOutput:
    projected: torch.Tensor
    candidates: torch.Tensor
    weights: torch.Tensor


def inject_entities(hidden: torch.Tensor, spans: Sequence[tuple[int, int, int]], proj_weight, proj_bias,
                    entity_table, n: int, ln_weight=None, ln_bias=None):
    """Fuse linked entity embeddings into the mention tokens of ``hidden``.

    ``hidden`` is ``(B, T, d_h)`` and ``spans`` lists ``(row, start, end)``.
    Each mention is mean-pooled, projected to KGE space, linked to its ``n``
    most similar entities by dot product, and the softmax-weighted entity sum
    is projected back (transpose of the same map) and added to every mention
    token, which is then layer-normalized.  Other rows are returned untouched.
    """
    if not spans:
        empty = hidden.new_zeros((0, proj_weight.shape[1]))
        return hidden, LinkerOutput(empty, torch.zeros((0, 0), dtype=torch.long), empty[:, :0])
    B, T, d = hidden.shape
    flat = hidden.reshape(B * T, d)
    M = len(spans)
    pool = hidden.new_zeros((M, B * T))
    member = torch.zeros((M, B * T), dtype=torch.bool)
    for j, (b, s, e) in enumerate(spans):
        if e <= s:
            raise ValueError(f"empty mention span {(s, e)}")
        pool[j, b * T + s:b * T + e] = 1.0 / (e - s)
        member[j, b * T + s:b * T + e] = True

    h_m = pool @ flat
    projected = h_m @ proj_weight + proj_bias
    sims = projected @ entity_table.T
    k = min(n, entity_table.shape[0])
    top = torch.topk(sims, k, dim=1)
    a = torch.softmax(top.values, dim=1)
    e_m = (a[:, :, None] * entity_table[top.indices]).sum(1)
    back = e_m @ proj_weight.T

    added = flat + member.to(flat.dtype).T @ back
    normed = layer_norm(added, ln_weight, ln_bias)
    is_mention = member.any(0)[:, None]
    out = torch.where(is_mention, normed, flat).reshape(B, T, d)
    return out, LinkerOutput(projected, top.indices, a)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, entity_table: np.ndarray | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, d, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, d, dtype=DTYPE))
        self.emb_ln = nn.LayerNorm(d, eps=LN_EPS, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size, dtype=DTYPE))
        if entity_table is None:
            entity_table = np.zeros((1, max(cfg.kge_dim, 1)))
        entity_table = np.asarray(entity_table, dtype=np.float64)
        cfg.kge_dim = entity_table.shape[1]
        self.register_buffer("entity_table", torch.tensor(entity_table, dtype=DTYPE))
        self.proj_weight = nn.Parameter(torch.zeros(d, cfg.kge_dim, dtype=DTYPE))
        self.proj_bias = nn.Parameter(torch.zeros(cfg.kge_dim, dtype=DTYPE))
        self.inj_ln = nn.LayerNorm(d, eps=LN_EPS, dtype=DTYPE)
        self.reset_parameters()

    def reset_parameters(self):
        g = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() == 1:
                    p.zero_()
                elif name == "proj_weight":
                    p.normal_(0.0, 1.0 / math.sqrt(self.cfg.hidden), generator=g)
                else:
                    p.normal_(0.0, self.cfg.init_std, generator=g)
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)

    def init_token_embeddings(self, vocab: Vocabulary, seed: int = 0):
        """Mean-pool rows of added tokens from the rows they decompose into."""
        base = self.tok_emb.detach().numpy()[:vocab.num_base]
        with torch.no_grad():
            self.tok_emb.copy_(torch.tensor(extended_embedding_matrix(vocab, base, seed), dtype=DTYPE))

    def layer_output(self, ids, key_mask=None, spans=(), stop_at=None):
        x = self.tok_emb[ids] + self.pos_emb[: ids.shape[1]][None]
        x = self.emb_ln(x)
        linker = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, key_mask)
            if stop_at == i:
                return x, None
            if self.cfg.injection_layer == i and spans:
                x, linker = inject_entities(x, spans, self.proj_weight, self.proj_bias, self.entity_table,
                                            self.cfg.candidates, self.inj_ln.weight, self.inj_ln.bias)
        return x, linker

    def forward(self, ids, key_mask=None, spans=()):
        """Hidden states ``(B, T, d_h)`` and the linker output (``None`` without mentions)."""
        if ids.dim() != 2:
            raise ValueError("ids must be (batch, length)")
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ValueError("unknown token id")
        return self.layer_output(ids, key_mask, spans)

    def mlm_logits(self, hidden):
        return hidden @ self.tok_emb.T + self.mlm_bias


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int):
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def pool_mention(hidden, span, strategy: str = "mean", normalize: bool = False):
    """Mean over the mention tokens, or the first (CLS) position.

    Works on numpy arrays and torch tensors alike.
    """
    if strategy == "cls":
        vec = hidden[0]
    elif strategy == "mean":
        s, e = span
        if e <= s:
            raise ValueError("empty mention span")
        if s < 0 or e > len(hidden):
            raise ValueError("mention span outside the sequence")
        vec = hidden[s:e].mean(0)
    else:
        raise ValueError(f"unknown pooling {strategy!r}")
    if normalize:
        vec = vec / ((vec * vec).sum() ** 0.5)
    return vec


def encode(model: Encoder, token_ids: Sequence[int]):
    """Inference-mode hidden states ``(T, d_h)`` and the CLS vector, as numpy."""
    model.eval()
    with torch.no_grad():
        ids = torch.as_tensor([list(token_ids)], dtype=torch.long)
        hidden, _ = model(ids)
    hidden = hidden[0].numpy()
    return hidden, hidden[0].copy()


def context_input(tokens: Sequence[int], span: tuple[int, int], cls_id: int):
    """Prefix ``[CLS]`` to a mention context and shift its span."""
    return [cls_id] + list(tokens), (span[0] + 1, span[1] + 1)


def embed_contexts(model: Encoder, contexts, batch_size: int = 64, grad: bool = False,
                   strategy: str | None = None, inject: bool = True) -> torch.Tensor:
    """Pooled mention vectors (not normalized) for a list of ``(tokens, span)``.

    The mention span doubles as the injection span when the encoder has an
    injection layer.
    """
    strategy = strategy or model.cfg.pooling
    out = []
    ctx_mgr = torch.enable_grad() if grad else torch.no_grad()
    with ctx_mgr:
        for start in range(0, len(contexts), batch_size):
            chunk = [context_input(t, s, model.cfg.cls_id) for t, s in contexts[start:start + batch_size]]
            ids, mask = pad_batch([c[0] for c in chunk], model.cfg.pad_id)
            spans = [(i, s, e) for i, (_, (s, e)) in enumerate(chunk)] if inject else ()
            hidden, _ = model(ids, mask, spans)
            for i, (_, span) in enumerate(chunk):
                out.append(pool_mention(hidden[i], span, strategy))
    return torch.stack(out)


# entity linking

def entity_linking_loss(projected: np.ndarray, gold: Sequence[int], entity_table: np.ndarray,
                        candidates: np.ndarray | None = None):
    """Summed softmax cross-entropy of each mention against its gold entity.

    ``gold`` holds entity rows, negative for mentions without a KGE entity;
    those are skipped.  With ``candidates`` (``(M, n)`` row indices) the
    denominator is restricted to the candidates plus the gold row.  Returns
    ``(loss, grad wrt projected, skipped)``; the entity table gets no gradient.
    """
    P = np.asarray(projected, dtype=np.float64)
    E = np.asarray(entity_table, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    grad = np.zeros_like(P)
    keep = gold >= 0
    skipped = int((~keep).sum())
    if not keep.any():
        return 0.0, grad, skipped
    rows = np.flatnonzero(keep)
    logits = P[rows] @ E.T
    allowed = np.ones_like(logits, dtype=bool)
    if candidates is not None:
        allowed[:] = False
        cand = np.asarray(candidates)[rows]
        allowed[np.arange(len(rows))[:, None], cand] = True
        allowed[np.arange(len(rows)), gold[rows]] = True
    z = np.where(allowed, logits, -np.inf)
    top = z.max(axis=1, keepdims=True)
    expz = np.exp(z - top)
    denom = expz.sum(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(denom[:, 0])
    loss = float((log_norm - logits[np.arange(len(rows)), gold[rows]]).sum())
    probs = expz / denom
    probs[np.arange(len(rows)), gold[rows]] -= 1.0
    grad[rows] = probs @ E
    return loss, grad, skipped


class EntityLinkingLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, projected, gold, entity_table, candidates):
        loss, grad, _ = entity_linking_loss(projected.detach().numpy(), gold, entity_table.detach().numpy(),
                                            None if candidates is None else candidates.numpy())
        ctx.save_for_backward(torch.as_tensor(grad, dtype=projected.dtype))
        return projected.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None


# masking

def mlm_masking(token_ids: Sequence[int], mentions: Sequence[tuple[int, int]], rate: float = 0.15,
                seed=0, mask_id: int = 4, vocab_size: int | None = None, num_special: int = 0,
                protected: Sequence[int] = ()):
    """Whole-entity masked-LM corruption.

    ``ceil(rate * n)`` positions are drawn without replacement among the
    ``n`` unprotected positions; a draw inside a mention pulls in the whole
    mention.  Each target becomes ``[MASK]`` with probability 0.8, a random
    non-special token with 0.1, and stays as is otherwise.  Returns the
    corrupted ids and the sorted target positions.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError("masking rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    ids = list(token_ids)
    protected = set(protected)
    eligible = [i for i, t in enumerate(ids) if t not in protected]
    if not eligible:
        return ids, []
    count = math.ceil(rate * len(eligible) - 1e-12)
    picked = rng.choice(len(eligible), size=count, replace=False)
    span_of = {}
    for s, e in mentions:
        for p in range(s, e):
            span_of[p] = (s, e)
    targets = set()
    for j in picked:
        pos = eligible[j]
        if pos in span_of:
            s, e = span_of[pos]
            targets.update(p for p in range(s, e) if ids[p] not in protected)
        else:
            targets.add(pos)
    targets = sorted(targets)
    high = vocab_size if vocab_size is not None else max(ids) + 1
    for pos in targets:
        u = rng.random()
        if u < 0.8:
            ids[pos] = mask_id
        elif u < 0.9:
            ids[pos] = int(rng.integers(num_special, high)) if high > num_special else mask_id
    return ids, targets


@dataclass
class InjectionBatch:
    ids: torch.Tensor
    key_mask: torch.Tensor
    spans: list
    gold: list
    mlm_positions: list
    mlm_labels: list


@dataclass
class JointLoss:
    total: torch.Tensor
    mlm: torch.Tensor
    el: torch.Tensor


def joint_injection_loss(model: Encoder, batch: InjectionBatch) -> JointLoss:
    """Masked-LM cross-entropy (mean over targets) plus the summed linking loss."""
    hidden, linker = model(batch.ids, batch.key_mask, batch.spans)
    zero = hidden.new_zeros(())
    if batch.mlm_positions:
        rows = torch.as_tensor([p[0] for p in batch.mlm_positions])
        cols = torch.as_tensor([p[1] for p in batch.mlm_positions])
        logits = model.mlm_logits(hidden[rows, cols])
        mlm = F.cross_entropy(logits, torch.as_tensor(batch.mlm_labels, dtype=torch.long))
    else:
        mlm = zero
    if linker is not None and any(g >= 0 for g in batch.gold):
        cand = linker.candidates if model.cfg.el_candidates_only else None
        el = EntityLinkingLoss.apply(linker.projected, list(batch.gold), model.entity_table, cand)
    else:
        el = zero
    return JointLoss(mlm + el, mlm, el)


def document_sequences(docs: Sequence[TokenizedDocument], max_len: int, entity_index: dict[str, int]):
    """Cut documents into ``max_len - 1`` token windows that never split a mention.

    Yields ``(ids, [(start, end, gold_row)])`` with positions relative to the
    window; gold rows are -1 for concepts without a KGE entity.
    """
    size = max_len - 1
    for doc in docs:
        ms = sorted(doc.mentions)
        start = 0
        while start < len(doc.ids):
            end = min(start + size, len(doc.ids))
            for s, e, _ in ms:
                if s < end < e:
                    end = s if s > start else e
            if end - start > size:
                end = start + size
            inside = [(s - start, e - start, entity_index.get(c, -1)) for s, e, c in ms if s >= start and e <= end]
            yield doc.ids[start:end], inside
            start = end


def make_injection_batch(seqs, cfg: EncoderConfig, seed, rate: float = 0.15, protected=()) -> InjectionBatch:
    inputs, spans, gold, positions, labels = [], [], [], [], []
    for b, (ids, mentions) in enumerate(seqs):
        full = [cfg.cls_id] + list(ids)
        shifted = [(s + 1, e + 1) for s, e, _ in mentions]
        masked, targets = mlm_masking(full, shifted, rate, seed=[*np.atleast_1d(seed).tolist(), b],
                                      mask_id=cfg.mask_id, vocab_size=cfg.vocab_size,
                                      num_special=cfg.num_special, protected=set(protected) | {cfg.cls_id})
        inputs.append(masked)
        for (s, e), (_, _, g) in zip(shifted, mentions):
            spans.append((b, s, e))
            gold.append(g)
        for t in targets:
            positions.append((b, t))
            labels.append(full[t])
    ids, mask = pad_batch(inputs, cfg.pad_id)
    return InjectionBatch(ids, mask, spans, gold, positions, labels)


# optimisation

def make_optimizer(model: nn.Module, lr: float, weight_decay: float, warmup: int, total: int):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)

    def schedule(step):
        if warmup and step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total - step) / max(1, total - warmup))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, schedule)


@dataclass
class InjectionConfig:
    steps: int = 200
    batch_size: int = 6
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 20
    max_grad_norm: float = 1.0
    mask_rate: float = 0.15
    seed: int = 0


class NumericalError(FloatingPointError):
    pass


def train_injected(model: Encoder, docs: Sequence[TokenizedDocument], entity_names: Sequence[str],
                   config: InjectionConfig | None = None, log=None):
    """Joint masked-LM and entity-linking training; the entity table stays frozen.

    ``log`` receives ``(step, total, mlm, el)`` per optimizer step.  Returns
    the list of logged rows.
    """
    cfg = config or InjectionConfig()
    entity_index = {e: i for i, e in enumerate(entity_names)}
    seqs = [s for s in document_sequences(docs, model.cfg.max_len, entity_index) if s[0]]
    if not seqs:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    opt, sched = make_optimizer(model, cfg.lr, cfg.weight_decay, cfg.warmup, cfg.steps)
    model.train()
    rows = []
    for step in range(cfg.steps):
        pick = rng.choice(len(seqs), size=min(cfg.batch_size, len(seqs)), replace=False)
        batch = make_injection_batch([seqs[i] for i in pick], model.cfg, [cfg.seed, step], cfg.mask_rate)
        opt.zero_grad()
        loss = joint_injection_loss(model, batch)
        if not torch.isfinite(loss.total):
            raise NumericalError(f"non-finite joint loss at step {step}")
        loss.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
        opt.step()
        sched.step()
        row = (step, loss.total.item(), loss.mlm.item(), loss.el.item())
        rows.append(row)
        if log is not None:
            log(*row)
    model.eval()
    return rows


# checkpoints: magic, version, section count, then named float64 sections

_MAGIC = b"MENC"
_VERSION = 1


def save_encoder(model: Encoder, path) -> str:
    """Write parameters and config; returns the checkpoint's sha256."""
    path = Path(path)
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MAGIC, _VERSION, len(state)))
        for name, tensor in state.items():
            arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    model.cfg.save(path.with_suffix(".cfg"))
    return file_sha256(path)


def load_encoder(path) -> Encoder:
    path = Path(path)
    cfg = EncoderConfig.load(path.with_suffix(".cfg"))
    state = {}
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<4sII", fh.read(12))
        if magic != _MAGIC or version != _VERSION:
            raise ValueError(f"{path} is not a version {_VERSION} encoder checkpoint")
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            state[name] = torch.tensor(arr, dtype=DTYPE)
    model = Encoder(cfg, state["entity_table"].numpy())
    model.load_state_dict(state)
    model.eval()
    return model


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

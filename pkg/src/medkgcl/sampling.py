"""Prototype-driven batch sampling and the contrastive training loop."""

from __future__ import annotations

import copy
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .contrastive import ContrastiveBatch, MsParams, ms_loss_torch
from .corpus import MentionContext
from .encoder import Encoder, NumericalError, embed_contexts, make_optimizer
from .kge import KgeModel, kge_similarity_matrix

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class PrototypeSet:
    by_concept: dict[str, list[int]]

    def flat(self) -> list[int]:
        return [i for c in sorted(self.by_concept) for i in self.by_concept[c]]


def _by_concept(dataset: Sequence[MentionContext]) -> dict[str, list[int]]:
    groups = defaultdict(list)
    for i, ctx in enumerate(dataset):
        groups[ctx.concept_id].append(i)
    return dict(groups)


def build_prototypes(dataset: Sequence[MentionContext], per_entity: int = 2, seed: int = 0) -> PrototypeSet:
    """Pick up to ``per_entity`` contexts per concept, one surface form at a time.

    Surface forms are visited round-robin in a seeded order, so distinct
    synonyms are used before any form repeats.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for concept, idxs in sorted(_by_concept(dataset).items()):
        by_term = defaultdict(list)
        for i in idxs:
            by_term[dataset[i].term].append(i)
        terms = sorted(by_term)
        rng.shuffle(terms)
        queues = []
        for t in terms:
            q = list(by_term[t])
            rng.shuffle(q)
            queues.append(q)
        chosen = []
        while len(chosen) < per_entity and any(queues):
            for q in queues:
                if q and len(chosen) < per_entity:
                    chosen.append(q.pop())
        out[concept] = chosen
    return PrototypeSet(out)


@dataclass
class SimilarityIndex:
    embeddings: np.ndarray
    labels: np.ndarray
    epoch: int = 0


def refresh_index(encoder: Encoder, dataset: Sequence[MentionContext], previous: SimilarityIndex | None = None,
                  batch_size: int = 64) -> SimilarityIndex:
    """Re-embed every mention context with the current weights."""
    encoder.eval()
    vecs = embed_contexts(encoder, [(c.tokens, c.mention_span) for c in dataset], batch_size).numpy()
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    epoch = 0 if previous is None else previous.epoch + 1
    return SimilarityIndex(vecs, np.array([c.concept_id for c in dataset], dtype=object), epoch)


def ranked_neighbors(index: SimilarityIndex, query: np.ndarray, exclude=None) -> np.ndarray:
    """All eligible rows by descending cosine, ties to the lower index."""
    sims = index.embeddings @ np.asarray(query, dtype=np.float64)
    rows = np.arange(len(sims))
    if exclude is not None:
        keep = index.labels != exclude
        sims, rows = sims[keep], rows[keep]
    order = np.lexsort((rows, -sims))
    return rows[order]


def top_m_neighbors(index: SimilarityIndex, query_vector, m: int, exclude=None) -> list[int]:
    if m < 1:
        raise ValueError("m must be at least 1")
    return ranked_neighbors(index, query_vector, exclude)[:m].tolist()


@dataclass
class SampledBatch:
    """Context ids chosen for one step, with index-time embeddings and labels.

    ``anchors`` holds, per entry, the prototype context it was drawn for.
    """

    context_ids: list[int]
    labels: list[str]
    roles: list[str]
    anchors: list[int]
    batch: ContrastiveBatch


def sample_batch(prototypes: PrototypeSet, dataset: Sequence[MentionContext], index: SimilarityIndex,
                 k: int = 20, m: int = 30, rng=None, n_prototypes: int = 4, per_term_cap: int = 4,
                 kge_model: KgeModel | None = None) -> SampledBatch:
    """Assemble a virtual batch from prototypes, their positives and hard negatives."""
    if k < 1 or m < 1:
        raise ValueError("k and m must be at least 1")
    rng = np.random.default_rng(rng)
    groups = _by_concept(dataset)
    pool = prototypes.flat()
    chosen = rng.choice(len(pool), size=min(n_prototypes, len(pool)), replace=False)

    ids: list[int] = []
    roles: list[str] = []
    anchors: list[int] = []
    in_batch: set[int] = set()
    per_term: Counter = Counter()

    def add(i, role, anchor):
        key = (dataset[i].concept_id, dataset[i].term)
        if i in in_batch or per_term[key] >= per_term_cap:
            return False
        in_batch.add(i)
        per_term[key] += 1
        ids.append(i)
        roles.append(role)
        anchors.append(anchor)
        return True

    for j in chosen:
        p = pool[j]
        add(p, "prototype", p)
        concept, term = dataset[p].concept_id, dataset[p].term
        cands = [i for i in groups[concept] if i != p]
        rng.shuffle(cands)
        # different surface forms first; stable sort keeps the shuffle within groups
        cands.sort(key=lambda i: dataset[i].term == term)
        taken = 0
        for i in cands:
            if taken == k:
                break
            taken += add(i, "positive", p)
        taken = 0
        for i in ranked_neighbors(index, index.embeddings[p], exclude=concept):
            if taken == m:
                break
            taken += add(int(i), "negative", p)

    labels = [dataset[i].concept_id for i in ids]
    S_kge = kge_similarity_matrix(kge_model, labels) if kge_model is not None else None
    batch = ContrastiveBatch.from_embeddings(index.embeddings[ids], labels, S_kge, normalize=False)
    return SampledBatch(ids, labels, roles, anchors, batch)


@dataclass
class ContrastiveConfig:
    epochs: int = 4
    steps_per_epoch: int = 0
    accumulation: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: int = 0
    max_grad_norm: float = 1.0
    k: int = 20
    m: int = 30
    n_prototypes: int = 4
    per_entity: int = 2
    per_term_cap: int = 4
    seed: int = 0
    ms: MsParams = field(default_factory=MsParams)


@dataclass
class ContrastiveLog:
    losses: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    prototypes: PrototypeSet | None = None

    def epoch_means(self):
        per = defaultdict(list)
        for epoch, _, loss in self.losses:
            per[epoch].append(loss)
        return [float(np.mean(per[e])) for e in sorted(per)]


def train_contrastive(encoder: Encoder, dataset: Sequence[MentionContext], kge_model: KgeModel | None,
                      loss_variant: str = "v3", config: ContrastiveConfig | None = None) -> ContrastiveLog:
    """Fine-tune ``encoder`` in place with a multi-similarity loss.

    Each optimizer step accumulates ``accumulation`` sampled batches.  The
    nearest-neighbour index is rebuilt after every epoch.  On a non-finite
    loss the encoder is restored to its last finite state and
    :class:`NumericalError` is raised.
    """
    cfg = config or ContrastiveConfig()
    if loss_variant not in ("v1", "v2", "v3"):
        raise ConfigError(f"unknown loss variant {loss_variant!r}")
    if loss_variant == "v3" and kge_model is None:
        raise ConfigError("loss v3 needs a KGE model")
    rng = np.random.default_rng(cfg.seed)
    log = ContrastiveLog()
    log.prototypes = build_prototypes(dataset, cfg.per_entity, cfg.seed)
    n_protos = len(log.prototypes.flat())
    steps = cfg.steps_per_epoch or max(1, -(-n_protos // (cfg.n_prototypes * cfg.accumulation)))
    total = steps * cfg.epochs
    opt, sched = make_optimizer(encoder, cfg.lr, cfg.weight_decay, cfg.warmup, total)
    kge = kge_model if loss_variant == "v3" else None

    index = refresh_index(encoder, dataset)
    good_state = copy.deepcopy(encoder.state_dict())
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps):
            encoder.train()
            opt.zero_grad()
            step_losses = []
            for _ in range(cfg.accumulation):
                sb = sample_batch(log.prototypes, dataset, index, cfg.k, cfg.m, rng, cfg.n_prototypes,
                                  cfg.per_term_cap, kge)
                items = [(dataset[i].tokens, dataset[i].mention_span) for i in sb.context_ids]
                vecs = embed_contexts(encoder, items, batch_size=len(items), grad=True)
                S_kge = sb.batch.S_kge
                loss = ms_loss_torch(vecs, sb.labels, S_kge, cfg.ms, loss_variant)
                if not torch.isfinite(loss):
                    encoder.load_state_dict(good_state)
                    raise NumericalError(f"non-finite contrastive loss at step {step}")
                (loss / cfg.accumulation).backward()
                step_losses.append(loss.item())
            torch.nn.utils.clip_grad_norm_(encoder.parameters(), cfg.max_grad_norm)
            opt.step()
            sched.step()
            good_state = copy.deepcopy(encoder.state_dict())
            log.losses.append((epoch, step, float(np.mean(step_losses))))
            step += 1
        index = refresh_index(encoder, dataset, index)
        log.refreshes.append(index.epoch)
        logger.info("epoch %d: mean loss %.5f", epoch, log.epoch_means()[-1])
    encoder.eval()
    return log

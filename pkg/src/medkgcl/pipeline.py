"""Glue between corpus, KGE, encoder and evaluation used by the CLI and tests."""

from __future__ import annotations

import numpy as np

from .corpus import MENTION_END, MENTION_START, Vocabulary
from .encoder import Encoder, EncoderConfig, embed_contexts
from .evaluation import TypedConceptSet
from .kge import KgeModel


def new_encoder(vocab: Vocabulary, kge_model: KgeModel | None = None, **kwargs) -> Encoder:
    """Fresh encoder whose added-token rows are mean-pooled from their subtokens."""
    entity_table = None if kge_model is None else kge_model.entity_table
    cfg = EncoderConfig.for_vocab(vocab, **kwargs)
    model = Encoder(cfg, entity_table)
    model.init_token_embeddings(vocab, seed=cfg.seed)
    return model


def term_context(vocab: Vocabulary, term: str):
    """A bare term as its own mention context: ``[M_s] term [M_e]``."""
    ids, _ = vocab.tokenize(term.lower().split())
    return [vocab[MENTION_START]] + ids + [vocab[MENTION_END]], (1, 1 + len(ids))


def embed_terms(encoder: Encoder, vocab: Vocabulary, terms) -> np.ndarray:
    vecs = embed_contexts(encoder, [term_context(vocab, t) for t in terms]).numpy()
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def concept_embeddings(encoder: Encoder, vocab: Vocabulary, concept_terms: dict[str, list[str]]):
    """One row per concept: the normalized mean of its synonyms' term vectors."""
    concepts = sorted(concept_terms)
    terms = [t for c in concepts for t in concept_terms[c]]
    vecs = embed_terms(encoder, vocab, terms)
    rows, pos = [], 0
    for c in concepts:
        n = len(concept_terms[c])
        v = vecs[pos:pos + n].mean(axis=0)
        rows.append(v / np.linalg.norm(v))
        pos += n
    return concepts, np.array(rows)


def typed_concepts(encoder: Encoder, vocab: Vocabulary, concept_terms, concept_types) -> TypedConceptSet:
    known = {c: ts for c, ts in concept_terms.items() if c in concept_types}
    concepts, emb = concept_embeddings(encoder, vocab, known)
    return TypedConceptSet(concepts, [concept_types[c] for c in concepts], emb)

"""Corpus preparation: vocabulary extension, mention matching, contexts and KG splits."""

from __future__ import annotations

import json
import logging
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
MENTION_START, MENTION_END = "[M_s]", "[M_e]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, MENTION_START, MENTION_END)

NOVEL_TOKEN_STD = 0.02


@dataclass
class Vocabulary:
    """Subword inventory.

    ``composition`` maps tokens added by :func:`extend_vocabulary` to the base
    token ids they decompose into; inherited tokens have an empty entry.
    """

    tokens: list[str]
    composition: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.id_of = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.id_of:
                raise ValueError(f"duplicate token {tok!r}")
            self.id_of[tok] = i

    @classmethod
    def with_specials(cls, tokens: Iterable[str]) -> "Vocabulary":
        seen = list(SPECIAL_TOKENS)
        have = set(seen)
        for tok in tokens:
            if tok not in have:
                seen.append(tok)
                have.add(tok)
        return cls(seen)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    def __getitem__(self, token):
        return self.id_of[token]

    @property
    def num_base(self) -> int:
        """Tokens that were not added by an extension (they come first)."""
        return len(self.tokens) - len(self.composition)

    def special_ids(self) -> dict[str, int]:
        return {tok: self.id_of[tok] for tok in SPECIAL_TOKENS if tok in self.id_of}

    def tokenize_word(self, word: str) -> list[int]:
        """WordPiece-style greedy longest match; ``[UNK]`` when no segmentation exists."""
        if word in self.id_of:
            return [self.id_of[word]]
        pieces = []
        start = 0
        while start < len(word):
            end = len(word)
            found = None
            while end > start:
                sub = word[start:end]
                if start > 0:
                    sub = "##" + sub
                if sub in self.id_of:
                    found = self.id_of[sub]
                    break
                end -= 1
            if found is None:
                return [self.id_of[UNK]]
            pieces.append(found)
            start = end
        return pieces

    def tokenize(self, words: Sequence[str]) -> tuple[list[int], list[tuple[int, int]]]:
        """Tokenize a word list; also return each word's piece span."""
        ids: list[int] = []
        offsets = []
        for w in words:
            pieces = self.tokenize_word(w)
            offsets.append((len(ids), len(ids) + len(pieces)))
            ids.extend(pieces)
        return ids, offsets

    def detokenize(self, ids: Sequence[int]) -> str:
        words: list[str] = []
        for i in ids:
            tok = self.tokens[i]
            if tok.startswith("##") and words:
                words[-1] += tok[2:]
            else:
                words.append(tok)
        return " ".join(words)

    def save(self, path):
        """One token per line; added tokens carry ``<TAB>+<TAB>`` and their composition."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                if tok in self.composition:
                    fh.write(f"{tok}\t+\t{' '.join(map(str, self.composition[tok]))}\n")
                else:
                    fh.write(f"{tok}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, composition = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                tokens.append(parts[0])
                if len(parts) > 1:
                    composition[parts[0]] = [int(x) for x in parts[2].split()] if len(parts) > 2 else []
        return cls(tokens, composition)


def segment(token: str, base: Vocabulary) -> list[int]:
    """Greedy longest-match segmentation of ``token`` over ``base``.

    Continuation pieces prefer their ``##`` form and fall back to the bare
    string.  Returns ``[]`` when some position cannot be matched.
    """
    out = []
    start = 0
    while start < len(token):
        found = None
        for end in range(len(token), start, -1):
            sub = token[start:end]
            candidates = (sub,) if start == 0 else ("##" + sub, sub)
            for cand in candidates:
                if cand in base.id_of:
                    found = base.id_of[cand]
                    break
            if found is not None:
                start = end
                break
        if found is None:
            return []
        out.append(found)
    return out


def extend_vocabulary(base: Vocabulary, new_tokens: Sequence[str]) -> Vocabulary:
    """Append unseen tokens to ``base``, recording how each splits into base tokens.

    Base tokens keep their ids; tokens already present are skipped, so applying
    the same extension twice is a no-op.  A token that cannot be segmented
    keeps an empty composition and is later initialized randomly.
    """
    tokens = list(base.tokens)
    composition = {k: list(v) for k, v in base.composition.items()}
    present = set(tokens)
    for tok in new_tokens:
        if not tok:
            raise ValueError("new tokens must be non-empty strings")
        if tok in present:
            continue
        comp = segment(tok, base)
        if not comp:
            logger.warning("token %r has no decomposition over the base vocabulary", tok)
        tokens.append(tok)
        present.add(tok)
        composition[tok] = comp
    if len(tokens) == len(base.tokens):
        return base
    return Vocabulary(tokens, composition)


def init_new_token_embedding(token: str, vocab: Vocabulary, base_embeddings: np.ndarray,
                             seed: int = 0, std: float = NOVEL_TOKEN_STD) -> np.ndarray:
    if token not in vocab:
        raise KeyError(token)
    comp = vocab.composition.get(token, [])
    if comp:
        return np.asarray(base_embeddings)[comp].mean(axis=0)
    # seed mixes in the token so the vector does not depend on insertion order
    rng = np.random.default_rng([seed, zlib.crc32(token.encode("utf-8"))])
    return rng.normal(0.0, std, size=np.asarray(base_embeddings).shape[1])


def extended_embedding_matrix(vocab: Vocabulary, base_embeddings: np.ndarray, seed: int = 0) -> np.ndarray:
    """Embedding table for ``vocab``: the given rows copied, later rows mean-pooled.

    Rows are filled in id order so tokens from repeated extensions can pool
    over earlier extension rows.
    """
    base_embeddings = np.asarray(base_embeddings, dtype=np.float64)
    n_base = base_embeddings.shape[0]
    out = np.empty((len(vocab), base_embeddings.shape[1]))
    out[:n_base] = base_embeddings
    for i in range(n_base, len(vocab)):
        out[i] = init_new_token_embedding(vocab.tokens[i], vocab, out[:i], seed=seed)
    return out


@dataclass(frozen=True)
class Mention:
    concept_id: str
    term: str
    doc_id: int
    span: tuple[int, int]


@dataclass
class MentionContext:
    tokens: list
    mention_span: tuple[int, int]
    concept_id: str
    term: str

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "span": list(self.mention_span),
                           "cui": self.concept_id, "term": self.term}, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "MentionContext":
        obj = json.loads(line)
        return cls(obj["tokens"], tuple(obj["span"]), obj["cui"], obj["term"])


def match_mentions(documents: Sequence[Sequence[str]], dictionary: dict[str, str]) -> list[Mention]:
    """Case-insensitive exact matching of dictionary terms against token lists.

    Overlaps are resolved globally: longer matches first, then leftmost.
    """
    if not dictionary:
        return []
    by_first: dict[str, set[int]] = defaultdict(set)
    for term in dictionary:
        words = term.lower().split()
        if words:
            by_first[words[0]].add(len(words))
    keyed = {tuple(t.lower().split()): cui for t, cui in dictionary.items()}

    mentions = []
    for doc_id, doc in enumerate(documents):
        lowered = [w.lower() for w in doc]
        found = []
        for start, w in enumerate(lowered):
            for n in by_first.get(w, ()):
                key = tuple(lowered[start:start + n])
                if len(key) == n and key in keyed:
                    found.append((start, start + n, keyed[key]))
        found.sort(key=lambda m: (m[0] - m[1], m[0]))
        taken = np.zeros(len(doc), dtype=bool)
        chosen = []
        for s, e, cui in found:
            if not taken[s:e].any():
                taken[s:e] = True
                chosen.append((s, e, cui))
        chosen.sort()
        for s, e, cui in chosen:
            mentions.append(Mention(cui, " ".join(doc[s:e]), doc_id, (s, e)))
    return mentions


def extract_contexts(documents: Sequence[Sequence], mentions: Sequence[Mention], window: int,
                     start_tag=MENTION_START, end_tag=MENTION_END) -> list[MentionContext]:
    """Cut ``window // 2`` tokens each side of every mention and wrap it in tags.

    Tags default to the tag strings; pass the tag ids when documents hold ids.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    half = window // 2
    out = []
    for m in mentions:
        doc = documents[m.doc_id]
        s, e = m.span
        if not 0 <= s < e <= len(doc):
            raise ValueError(f"mention span {m.span} outside document {m.doc_id}")
        left = list(doc[max(0, s - half):s])
        right = list(doc[e:e + half])
        tokens = left + [start_tag] + list(doc[s:e]) + [end_tag] + right
        span = (len(left) + 1, len(left) + 1 + (e - s))
        out.append(MentionContext(tokens, span, m.concept_id, m.term))
    return out


@dataclass
class TripleSplit:
    train: list
    test: list
    valid: list


def split_triples(triples: Sequence[tuple], ratios=(0.90, 0.06, 0.04), seed: int = 0) -> TripleSplit:
    """Random split where test/valid only use entities and relations seen in train.

    Triples are visited in a seeded random order and moved out of train only
    while every entity and relation they use keeps another train occurrence.
    When the graph is too sparse the held-out splits come out short.
    """
    if not triples:
        raise ValueError("no triples to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    triples = [tuple(t) for t in triples]
    n = len(triples)
    n_test = int(round(ratios[1] * n))
    n_valid = int(round(ratios[2] * n))

    ent_count = Counter()
    rel_count = Counter()
    for h, r, t in triples:
        ent_count[h] += 1
        if t != h:
            ent_count[t] += 1
        rel_count[r] += 1

    order = np.random.default_rng(seed).permutation(n)
    held = {"test": [], "valid": []}
    targets = (("test", n_test), ("valid", n_valid))
    moved = np.zeros(n, dtype=bool)
    slot = 0
    for idx in order:
        while slot < len(targets) and len(held[targets[slot][0]]) >= targets[slot][1]:
            slot += 1
        if slot == len(targets):
            break
        h, r, t = triples[idx]
        if ent_count[h] > 1 and ent_count[t] > 1 and rel_count[r] > 1:
            ent_count[h] -= 1
            if t != h:
                ent_count[t] -= 1
            rel_count[r] -= 1
            held[targets[slot][0]].append(triples[idx])
            moved[idx] = True

    if len(held["test"]) < n_test or len(held["valid"]) < n_valid:
        logger.warning("graph too sparse for requested split: test %d/%d, valid %d/%d",
                       len(held["test"]), n_test, len(held["valid"]), n_valid)
    train = [triples[i] for i in range(n) if not moved[i]]
    return TripleSplit(train, held["test"], held["valid"])


# file formats

def read_dictionary(path) -> dict[str, str]:
    """``concept_id<TAB>term`` lines; terms are lowercased, first CUI wins."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cui, term = line.split("\t")[:2]
            term = " ".join(term.lower().split())
            if term in out and out[term] != cui:
                logger.warning("term %r maps to %s and %s; keeping %s", term, out[term], cui, out[term])
                continue
            out[term] = cui
    return out


def read_concept_terms(path) -> dict[str, list[str]]:
    """Synonym lists per concept from a dictionary file, in file order."""
    out: dict[str, list[str]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                cui, term = line.split("\t")[:2]
                term = " ".join(term.lower().split())
                if term not in out[cui]:
                    out[cui].append(term)
    return dict(out)


def read_types(path) -> dict[str, str]:
    """``concept_id<TAB>semantic_type`` lines."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2:
                out[parts[0]] = parts[1]
    return out


def read_corpus(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.lower().split() for line in fh if line.strip()]


def read_triples(path) -> list[tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 3:
                out.append((parts[0], parts[1], parts[2]))
    return out


def write_triples(path, triples):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def write_contexts(path, contexts: Iterable[MentionContext]):
    with open(path, "w", encoding="utf-8") as fh:
        for c in contexts:
            fh.write(c.to_json() + "\n")


def read_contexts(path) -> list[MentionContext]:
    with open(path, encoding="utf-8") as fh:
        return [MentionContext.from_json(line) for line in fh if line.strip()]


@dataclass
class TokenizedDocument:
    """A document as token ids plus every mention it contains (piece spans)."""

    ids: list[int]
    mentions: list[tuple[int, int, str]]


def build_corpus(documents: Sequence[Sequence[str]], dictionary: dict[str, str], base: Vocabulary,
                 window: int = 32, extra_tokens: Sequence[str] = ()):
    """Full corpus pass: extend vocabulary, match mentions, cut contexts.

    Every distinct corpus and dictionary word becomes a candidate new token,
    as do ``extra_tokens``.  Returns ``(vocab, mentions, contexts, docs)`` with
    contexts and documents expressed in token ids.
    """
    words = sorted({w for doc in documents for w in doc} | {w for t in dictionary for w in t.split()})
    vocab = extend_vocabulary(base, list(extra_tokens) + words)
    mentions = match_mentions(documents, dictionary)

    id_docs, offsets = [], []
    for doc in documents:
        ids, off = vocab.tokenize(doc)
        id_docs.append(ids)
        offsets.append(off)

    piece_mentions = []
    per_doc = defaultdict(list)
    for m in mentions:
        off = offsets[m.doc_id]
        span = (off[m.span[0]][0], off[m.span[1] - 1][1])
        pm = Mention(m.concept_id, m.term, m.doc_id, span)
        piece_mentions.append(pm)
        per_doc[m.doc_id].append((span[0], span[1], m.concept_id))

    contexts = extract_contexts(id_docs, piece_mentions, window,
                                vocab[MENTION_START], vocab[MENTION_END])
    docs = [TokenizedDocument(ids, per_doc.get(i, [])) for i, ids in enumerate(id_docs)]
    return vocab, mentions, contexts, docs


def write_documents(path, docs: Iterable[TokenizedDocument]):
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"ids": d.ids, "mentions": [list(m) for m in d.mentions]}) + "\n")


def read_documents(path) -> list[TokenizedDocument]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(TokenizedDocument(obj["ids"], [tuple(m) for m in obj["mentions"]]))
    return out

"""Toy medical world: typed concepts, synonyms, a corpus and a consistent KG.

Words are built from a fixed syllable inventory, so the base vocabulary is
the syllables (plain and ``##`` continuation forms) and every word is a
decomposable new token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Vocabulary
from .evaluation import RelatednessDataset

CONSONANTS = "bcdfglmnprstvz"
VOWELS = "aeiou"


@dataclass
class SyntheticWorld:
    concept_terms: dict[str, list[str]]
    concept_types: dict[str, str]
    documents: list[list[str]]
    triples: list[tuple[str, str, str]]
    relatedness: RelatednessDataset
    syllables: list[str] = field(default_factory=list)

    def base_vocabulary(self) -> Vocabulary:
        return Vocabulary.with_specials(self.syllables + ["##" + s for s in self.syllables])

    def dictionary(self) -> dict[str, str]:
        return {t: c for c, terms in self.concept_terms.items() for t in terms}

    def write(self, root):
        """Write the input files consumed by the command line."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "corpus.txt", "w", encoding="utf-8") as fh:
            for doc in self.documents:
                fh.write(" ".join(doc) + "\n")
        with open(root / "dictionary.tsv", "w", encoding="utf-8") as fh:
            for c, terms in self.concept_terms.items():
                for t in terms:
                    fh.write(f"{c}\t{t}\n")
        with open(root / "types.tsv", "w", encoding="utf-8") as fh:
            for c, t in self.concept_types.items():
                fh.write(f"{c}\t{t}\n")
        with open(root / "triples.tsv", "w", encoding="utf-8") as fh:
            for h, r, t in self.triples:
                fh.write(f"{h}\t{r}\t{t}\n")
        with open(root / "base_vocab.txt", "w", encoding="utf-8") as fh:
            for tok in self.base_vocabulary().tokens:
                fh.write(tok + "\n")
        self.relatedness.save(root / "relatedness.tsv")


def _word_factory(rng, syllables):
    used = set()

    def word(n_syll=None):
        while True:
            n = n_syll or int(rng.integers(2, 4))
            w = "".join(syllables[i] for i in rng.integers(0, len(syllables), size=n))
            if w not in used:
                used.add(w)
                return w

    return word


def make_world(n_types: int = 4, concepts_per_type: int = 10, synonyms: int = 5, n_docs: int = 400,
               sentences_per_doc: int = 4, concept_words: int = 4, type_words: int = 8,
               filler_words: int = 40, sites_per_type: int = 5, sites_per_concept: int = 3,
               seed: int = 0) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    word = _word_factory(rng, syllables)

    types = [f"T{t}" for t in range(n_types)]
    concept_terms, concept_types = {}, {}
    concept_vocab, type_vocab = {}, {}
    for t in types:
        type_vocab[t] = [word() for _ in range(type_words)]
    for t_i, t in enumerate(types):
        for j in range(concepts_per_type):
            c = f"C{t_i:02d}{j:03d}"
            concept_types[c] = t
            terms = []
            for s in range(synonyms):
                n_words = 1 if s % 2 == 0 else 2
                terms.append(" ".join(word() for _ in range(n_words)))
            concept_terms[c] = terms
            concept_vocab[c] = [word() for _ in range(concept_words)]
    filler = [word(2) for _ in range(filler_words)]
    concepts = list(concept_terms)

    documents = []
    for _ in range(n_docs):
        doc_type = types[int(rng.integers(n_types))]
        pool = [c for c in concepts if concept_types[c] == doc_type]
        doc = []
        for _ in range(sentences_per_doc):
            c = pool[int(rng.integers(len(pool)))]
            term = concept_terms[c][int(rng.integers(synonyms))]
            around = ([concept_vocab[c][int(i)] for i in rng.integers(0, concept_words, size=2)]
                      + [type_vocab[doc_type][int(i)] for i in rng.integers(0, type_words, size=2)]
                      + [filler[int(i)] for i in rng.integers(0, filler_words, size=3)])
            rng.shuffle(around)
            cut = int(rng.integers(0, len(around) + 1))
            doc.extend(around[:cut] + term.split() + around[cut:])
        documents.append(doc)

    # type-coherent graph: hub, two intra-type rings and shared type-specific sites
    triples = []
    for t_i, t in enumerate(types):
        members = [c for c in concepts if concept_types[c] == t]
        sites = [f"S{t_i:02d}{j}" for j in range(sites_per_type)]
        for i, c in enumerate(members):
            triples.append((c, "isa", t))
            triples.append((c, "related_to", members[(i + 1) % len(members)]))
            triples.append((c, "associated_with", members[(i + 3) % len(members)]))
            for s in rng.choice(sites, size=min(sites_per_concept, len(sites)), replace=False):
                triples.append((c, "has_site", str(s)))
        triples.append((t, "subtype_of", "ROOT"))

    pairs = []
    seen = set()

    def add_pair(a, b, score):
        key = frozenset((a, b))
        if a != b and key not in seen:
            seen.add(key)
            pairs.append((a, b, score))

    for c in concepts[:: max(1, len(concepts) // 20)]:
        terms = concept_terms[c]
        add_pair(terms[0], terms[1], 4.0)
        same = [o for o in concepts if concept_types[o] == concept_types[c] and o != c]
        other = [o for o in concepts if concept_types[o] != concept_types[c]]
        add_pair(terms[0], concept_terms[same[int(rng.integers(len(same)))]][0], 2.0)
        add_pair(terms[0], concept_terms[other[int(rng.integers(len(other)))]][0], 0.0)
    relatedness = RelatednessDataset(pairs, 0.0, 4.0)

    return SyntheticWorld(concept_terms, concept_types, documents, triples, relatedness, syllables)


def toy_graph(n_entities: int = 20, n_relations: int = 2, n_triples: int = 100, clusters: int = 4,
              seed: int = 0) -> list[tuple[str, str, str]]:
    """Small clustered graph: relation ``r{j}`` links cluster ``c`` to cluster ``c + j``."""
    rng = np.random.default_rng(seed)
    ents = [f"e{i:02d}" for i in range(n_entities)]
    cluster = [i % clusters for i in range(n_entities)]
    members = [[e for e, c in zip(ents, cluster) if c == k] for k in range(clusters)]
    candidates = []
    for r in range(n_relations):
        for i, h in enumerate(ents):
            for t in members[(cluster[i] + r) % clusters]:
                if t != h:
                    candidates.append((h, f"r{r}", t))
    pick = rng.choice(len(candidates), size=min(n_triples, len(candidates)), replace=False)
    return [candidates[i] for i in sorted(pick)]

"""Knowledge graph embeddings: TransE, ComplEx, RotatE and SimplE.

All four models keep an ``|E| x d`` entity table and an ``|R| x d`` relation
table.  ComplEx and RotatE store the real part in the first half of each row
and the imaginary part in the second; SimplE stores head/tail entity roles
(and relation/inverse relation) as the two halves.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("TransE", "ComplEx", "RotatE", "SimplE")
_HALVED = ("ComplEx", "RotatE", "SimplE")


class CorruptDatasetError(IndexError):
    pass


class KgeTrainingError(FloatingPointError):
    pass


@dataclass
class KgeModel:
    kind: str
    entity_table: np.ndarray
    relation_table: np.ndarray
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown KGE kind {self.kind!r}")
        if self.kind in _HALVED and self.dim % 2:
            raise ValueError(f"{self.kind} needs an even dimension")
        if not self.entities:
            self.entities = [str(i) for i in range(len(self.entity_table))]
        if not self.relations:
            self.relations = [str(i) for i in range(len(self.relation_table))]
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def dim(self) -> int:
        return self.entity_table.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity_table.shape[0]

    def check_ids(self, triples: np.ndarray):
        triples = np.asarray(triples)
        if triples.size == 0:
            return
        if (triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= self.num_entities
                or triples[:, 1].min() < 0 or triples[:, 1].max() >= len(self.relation_table)):
            raise CorruptDatasetError("triple references an entity or relation outside the tables")

    def encode_triples(self, triples: Sequence[tuple[str, str, str]]) -> np.ndarray:
        try:
            return np.array([[self.entity_index[h], self.relation_index[r], self.entity_index[t]]
                             for h, r, t in triples], dtype=np.int64).reshape(-1, 3)
        except KeyError as exc:
            raise CorruptDatasetError(f"unknown entity or relation {exc}") from None


def _halves(x):
    d = x.shape[-1] // 2
    return x[..., :d], x[..., d:]


def score_and_grad(kind: str, h: np.ndarray, r: np.ndarray, t: np.ndarray, need_grad: bool = True):
    """Batched plausibility scores (higher is better) and their gradients.

    ``h``, ``r``, ``t`` are ``(B, d)`` rows (or broadcastable).  Returns
    ``score`` of shape ``(B,)`` and, if requested, ``(gh, gr, gt)``.
    """
    if kind == "TransE":
        diff = h + r - t
        dist = np.sqrt((diff * diff).sum(-1))
        score = -dist
        if not need_grad:
            return score, None
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
        return score, (-unit, -unit, unit)

    if kind == "ComplEx":
        a, b = _halves(h)
        c, d = _halves(r)
        e, f = _halves(t)
        score = (a * c * e + b * c * f + a * d * f - b * d * e).sum(-1)
        if not need_grad:
            return score, None
        gh = np.concatenate([c * e + d * f, c * f - d * e], -1)
        gr = np.concatenate([a * e + b * f, a * f - b * e], -1)
        gt = np.concatenate([a * c - b * d, b * c + a * d], -1)
        return score, (gh, gr, gt)

    if kind == "RotatE":
        a, b = _halves(h)
        c, d = _halves(r)
        e, f = _halves(t)
        xr = a * c - b * d - e
        xi = a * d + b * c - f
        mod = np.sqrt(xr * xr + xi * xi)
        score = -mod.sum(-1)
        if not need_grad:
            return score, None
        with np.errstate(invalid="ignore", divide="ignore"):
            ur = np.where(mod > 0, xr / mod, 0.0)
            ui = np.where(mod > 0, xi / mod, 0.0)
        gh = -np.concatenate([ur * c + ui * d, -ur * d + ui * c], -1)
        gr = -np.concatenate([ur * a + ui * b, -ur * b + ui * a], -1)
        gt = np.concatenate([ur, ui], -1)
        return score, (gh, gr, gt)

    if kind == "SimplE":
        hh, ht = _halves(h)
        r_fwd, r_inv = _halves(r)
        th, tt = _halves(t)
        score = 0.5 * ((hh * r_fwd * tt).sum(-1) + (th * r_inv * ht).sum(-1))
        if not need_grad:
            return score, None
        gh = 0.5 * np.concatenate([r_fwd * tt, th * r_inv], -1)
        gr = 0.5 * np.concatenate([hh * tt, th * ht], -1)
        gt = 0.5 * np.concatenate([r_inv * ht, hh * r_fwd], -1)
        return score, (gh, gr, gt)

    raise ValueError(f"unknown KGE kind {kind!r}")


def kge_score(model: KgeModel, triple) -> float:
    h, r, t = (int(x) for x in triple)
    model.check_ids(np.array([[h, r, t]]))
    score, _ = score_and_grad(model.kind, model.entity_table[h], model.relation_table[r],
                              model.entity_table[t], need_grad=False)
    return float(score)


def score_tails(model: KgeModel, h: int, r: int) -> np.ndarray:
    """Scores of ``(h, r, e)`` for every entity ``e``."""
    E = model.entity_table
    return score_and_grad(model.kind, E[h][None, :], model.relation_table[r][None, :], E, False)[0]


def score_heads(model: KgeModel, r: int, t: int) -> np.ndarray:
    E = model.entity_table
    return score_and_grad(model.kind, E, model.relation_table[r][None, :], E[t][None, :], False)[0]


def project_rotations(relation_table: np.ndarray):
    """Rescale every complex coordinate of RotatE relations to modulus one, in place."""
    re, im = _halves(relation_table)
    mod = np.sqrt(re * re + im * im)
    mod[mod == 0] = 1.0
    re /= mod
    im /= mod


def init_model(kind: str, num_entities: int, num_relations: int, dim: int, seed: int = 0,
               entities=None, relations=None) -> KgeModel:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    E = rng.uniform(-bound, bound, size=(num_entities, dim))
    if kind == "RotatE":
        phase = rng.uniform(-np.pi, np.pi, size=(num_relations, dim // 2))
        R = np.concatenate([np.cos(phase), np.sin(phase)], axis=1)
    else:
        R = rng.uniform(-bound, bound, size=(num_relations, dim))
    return KgeModel(kind, E, R, list(entities or []), list(relations or []))


@dataclass
class KgeConfig:
    dim: int = 64
    epochs: int = 100
    lr: float = 0.1
    negatives_per_positive: int = 1
    batch_size: int = 256
    margin: float = 0.0
    l2: float = 1e-4
    seed: int = 0


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def train_kge(triples, kind: str, config: KgeConfig | None = None, entities=None, relations=None,
              epoch_callback=None) -> tuple[KgeModel, list[float]]:
    """Adagrad on the logistic (softplus) loss with uniform negative sampling.

    ``triples`` are either name triples (then ``entities``/``relations`` may be
    given to fix the id order) or an integer array.  ``epoch_callback(epoch,
    model)`` runs after every epoch.  Returns the model and the mean loss per
    epoch, with the loss at initialization in position 0.
    """
    cfg = config or KgeConfig()
    if len(triples) == 0:
        raise ValueError("empty training split")
    if isinstance(triples, np.ndarray) and np.issubdtype(triples.dtype, np.integer):
        ids = triples.astype(np.int64)
        n_ent = int(max(ids[:, 0].max(), ids[:, 2].max()) + 1) if entities is None else len(entities)
        n_rel = int(ids[:, 1].max() + 1) if relations is None else len(relations)
    else:
        if entities is None:
            entities = sorted({h for h, _, _ in triples} | {t for _, _, t in triples})
        if relations is None:
            relations = sorted({r for _, r, _ in triples})
        n_ent, n_rel = len(entities), len(relations)
        eidx = {e: i for i, e in enumerate(entities)}
        ridx = {r: i for i, r in enumerate(relations)}
        ids = np.array([[eidx[h], ridx[r], eidx[t]] for h, r, t in triples], dtype=np.int64)

    model = init_model(kind, n_ent, n_rel, cfg.dim, cfg.seed, entities, relations)
    model.check_ids(ids)
    rng = np.random.default_rng(cfg.seed + 1)
    E, R = model.entity_table, model.relation_table
    acc_E = np.zeros_like(E)
    acc_R = np.zeros_like(R)
    k = cfg.negatives_per_positive

    def batch_loss(batch, neg, grads=None):
        pos_s, pos_g = score_and_grad(kind, E[batch[:, 0]], R[batch[:, 1]], E[batch[:, 2]], grads is not None)
        neg_s, neg_g = score_and_grad(kind, E[neg[:, 0]], R[neg[:, 1]], E[neg[:, 2]], grads is not None)
        pos_s = pos_s + cfg.margin
        neg_s = neg_s + cfg.margin
        loss = _softplus(-pos_s).sum() + _softplus(neg_s).sum() / k
        if grads is not None:
            gE, gR = grads
            w_pos = -_sigmoid(-pos_s)[:, None]
            w_neg = (_sigmoid(neg_s) / k)[:, None]
            for trip, (gh, gr, gt), w in ((batch, pos_g, w_pos), (neg, neg_g, w_neg)):
                np.add.at(gE, trip[:, 0], w * gh)
                np.add.at(gR, trip[:, 1], w * gr)
                np.add.at(gE, trip[:, 2], w * gt)
        return loss

    def corrupt(batch, rng):
        neg = np.repeat(batch, k, axis=0)
        swap_head = rng.random(len(neg)) < 0.5
        repl = rng.integers(0, n_ent, size=len(neg))
        neg[swap_head, 0] = repl[swap_head]
        neg[~swap_head, 2] = repl[~swap_head]
        return neg

    # fixed negatives so the loss curve is comparable across epochs
    probe_neg = corrupt(ids, np.random.default_rng(cfg.seed + 2))

    def epoch_objective():
        return batch_loss(ids, probe_neg) / len(ids)

    history = [epoch_objective()]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        for start in range(0, len(ids), cfg.batch_size):
            batch = ids[order[start:start + cfg.batch_size]]
            neg = corrupt(batch, rng)
            gE = np.zeros_like(E)
            gR = np.zeros_like(R)
            loss = batch_loss(batch, neg, (gE, gR))
            if not np.isfinite(loss):
                raise KgeTrainingError(f"non-finite KGE loss at epoch {epoch}, batch starting {start}")
            touched_e = np.unique(np.concatenate([batch[:, 0], batch[:, 2], neg[:, 0], neg[:, 2]]))
            touched_r = np.unique(batch[:, 1])
            gE[touched_e] += cfg.l2 * E[touched_e]
            gR[touched_r] += cfg.l2 * R[touched_r]
            gE /= len(batch)
            gR /= len(batch)
            acc_E += gE * gE
            acc_R += gR * gR
            E -= cfg.lr * gE / (np.sqrt(acc_E) + 1e-10)
            R -= cfg.lr * gR / (np.sqrt(acc_R) + 1e-10)
            if kind == "RotatE":
                project_rotations(R)
        history.append(epoch_objective())
        if not np.isfinite(history[-1]):
            raise KgeTrainingError(f"non-finite KGE loss after epoch {epoch}")
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return model, history


@dataclass
class LinkPredReport:
    hits1: float
    hits3: float
    hits10: float
    mean_rank: float
    mrr: float

    def as_row(self, name: str) -> str:
        return (f"{name}\t{self.hits1:.4f}\t{self.hits3:.4f}\t{self.hits10:.4f}"
                f"\t{self.mean_rank:.2f}\t{self.mrr:.4f}")


REPORT_HEADER = "model\thits@1\thits@3\thits@10\tMR\tMRR"


def filtered_rank(scores: np.ndarray, true_idx: int, filtered: np.ndarray) -> float:
    """Rank of ``true_idx``; entities flagged in ``filtered`` are removed first.

    Ties share the mean rank of their group.
    """
    s_true = scores[true_idx]
    keep = ~filtered
    keep[true_idx] = False
    better = np.count_nonzero(scores[keep] > s_true)
    ties = np.count_nonzero(scores[keep] == s_true)
    return 1.0 + better + ties / 2.0


def link_prediction_eval(model: KgeModel, eval_triples, all_known_triples) -> LinkPredReport:
    """Filtered head and tail ranking, averaged over both directions."""
    eval_ids = np.asarray(eval_triples, dtype=np.int64).reshape(-1, 3)
    known = np.asarray(all_known_triples, dtype=np.int64).reshape(-1, 3)
    model.check_ids(eval_ids)
    tails, heads = {}, {}
    for h, r, t in known:
        tails.setdefault((h, r), []).append(t)
        heads.setdefault((r, t), []).append(h)
    n = model.num_entities
    ranks = []
    for h, r, t in eval_ids:
        mask = np.zeros(n, dtype=bool)
        mask[tails.get((h, r), [])] = True
        ranks.append(filtered_rank(score_tails(model, h, r), t, mask))
        mask = np.zeros(n, dtype=bool)
        mask[heads.get((r, t), [])] = True
        ranks.append(filtered_rank(score_heads(model, r, t), h, mask))
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no evaluation triples")
    return LinkPredReport(
        hits1=float(np.mean(ranks <= 1)),
        hits3=float(np.mean(ranks <= 3)),
        hits10=float(np.mean(ranks <= 10)),
        mean_rank=float(ranks.mean()),
        mrr=float(np.mean(1.0 / ranks)),
    )


def kge_similarity(model: KgeModel, concept_a: str, concept_b: str) -> float:
    """Cosine of two entity rows mapped to [0, 1]; 0.5 when either is unknown."""
    ia = model.entity_index.get(concept_a)
    ib = model.entity_index.get(concept_b)
    if ia is None or ib is None:
        return 0.5
    a = model.entity_table[ia]
    b = model.entity_table[ib]
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0 or nb == 0:
        logger.warning("zero-norm entity embedding for %s/%s", concept_a, concept_b)
        return 0.5
    cos = float(a @ b) / float(na * nb)
    return (min(1.0, max(-1.0, cos)) + 1.0) / 2.0


def kge_similarity_matrix(model: KgeModel | None, labels: Sequence[str]) -> np.ndarray:
    """Pairwise :func:`kge_similarity` over batch labels (0.5 without a model)."""
    m = len(labels)
    if model is None:
        return np.full((m, m), 0.5)
    uniq = sorted(set(labels))
    pos = {c: i for i, c in enumerate(uniq)}
    table = np.empty((len(uniq), len(uniq)))
    for i, a in enumerate(uniq):
        for j in range(i, len(uniq)):
            table[i, j] = table[j, i] = kge_similarity(model, a, uniq[j])
    idx = np.array([pos[c] for c in labels])
    return table[np.ix_(idx, idx)]


# checkpoint: magic, kind, |E|, |R|, d, then little-endian float64 tables

_MAGIC = b"MKGE"
_HEADER = struct.Struct("<4s16sQQQ")


def save_kge(model: KgeModel, path):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, model.kind.encode("ascii"), model.num_entities,
                              len(model.relation_table), model.dim))
        fh.write(np.ascontiguousarray(model.entity_table, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.relation_table, dtype="<f8").tobytes())
    with open(path.with_suffix(".ids.tsv"), "w", encoding="utf-8") as fh:
        for i, e in enumerate(model.entities):
            fh.write(f"entity\t{i}\t{e}\n")
        for i, r in enumerate(model.relations):
            fh.write(f"relation\t{i}\t{r}\n")


def load_kge(path) -> KgeModel:
    path = Path(path)
    with open(path, "rb") as fh:
        magic, kind, n_e, n_r, d = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a KGE checkpoint")
        E = np.frombuffer(fh.read(8 * n_e * d), dtype="<f8").reshape(n_e, d).astype(np.float64)
        R = np.frombuffer(fh.read(8 * n_r * d), dtype="<f8").reshape(n_r, d).astype(np.float64)
    entities, relations = [None] * n_e, [None] * n_r
    sidecar = path.with_suffix(".ids.tsv")
    if sidecar.exists():
        with open(sidecar, encoding="utf-8") as fh:
            for line in fh:
                what, i, name = line.rstrip("\n").split("\t")
                (entities if what == "entity" else relations)[int(i)] = name
    entities = [e if e is not None else str(i) for i, e in enumerate(entities)]
    relations = [r if r is not None else str(i) for i, r in enumerate(relations)]
    return KgeModel(kind.rstrip(b"\0").decode("ascii"), E, R, entities, relations)

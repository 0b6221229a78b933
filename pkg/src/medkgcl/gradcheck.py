"""Central finite-difference checks for every hand-written or composed gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .contrastive import ContrastiveBatch, MsParams, ms_loss_v1, ms_loss_v2, ms_loss_v3
from .encoder import DTYPE, Encoder, EncoderConfig, entity_linking_loss, joint_injection_loss, make_injection_batch
from .kge import KINDS, score_and_grad


def relative_error(analytic, numeric, atol: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)``; both sides below ``atol`` count as exact.

    The floor covers gradients that vanish identically (a key bias under
    softmax shift invariance), where round-off alone would give ratio 1.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale <= atol:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{self.instances}\t{self.max_rel_error:.3e}\t{self.tolerance:.0e}\t{status}"


def random_contrastive_batch(rng, with_kge=True, kink_gap=1e-3) -> ContrastiveBatch:
    """Random unit-norm batch whose mined pairs stay clear of the ``|.|`` kink."""
    while True:
        m = int(rng.integers(6, 13))
        d = int(rng.integers(4, 9))
        labels = [f"c{int(x)}" for x in rng.integers(0, 3, size=m)]
        X = rng.normal(size=(m, d))
        uniq = sorted(set(labels))
        table = rng.uniform(0.0, 1.0, size=(len(uniq), len(uniq)))
        table = (table + table.T) / 2
        np.fill_diagonal(table, 1.0)
        pos = {c: i for i, c in enumerate(uniq)}
        idx = [pos[c] for c in labels]
        S_kge = table[np.ix_(idx, idx)] if with_kge else None
        batch = ContrastiveBatch.from_embeddings(X, labels, S_kge).mine(0.1)
        if not (batch.positives.any() or batch.negatives.any()):
            continue
        if with_kge:
            used = batch.positives | batch.negatives
            if np.abs(batch.S - S_kge)[used].min() <= kink_gap:
                continue
        return batch


def _loss_at(loss_fn, batch, params):
    def f(X):
        b = ContrastiveBatch(X, batch.labels, X @ X.T, batch.S_kge, batch.positives, batch.negatives)
        return loss_fn(b, params)[0]
    return f


def check_ms_losses(instances=100, seed=0, h=1e-6, tol=1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    params = MsParams(margin=0.5, pos_margin=0.8, neg_margin=0.4)
    out = []
    for name, fn in (("ms_loss_v1", ms_loss_v1), ("ms_loss_v2", ms_loss_v2), ("ms_loss_v3", ms_loss_v3)):
        worst = 0.0
        for _ in range(instances):
            batch = random_contrastive_batch(rng, with_kge=True)
            _, grad = fn(batch, params)
            num = numeric_gradient(_loss_at(fn, batch, params), batch.embeddings, h)
            worst = max(worst, relative_error(grad, num))
        out.append(CheckResult(name, instances, worst, tol))
    return out


def check_entity_linking(instances=100, seed=1, h=1e-6, tol=1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n_ent, dk, M = int(rng.integers(3, 10)), int(rng.integers(2, 7)), int(rng.integers(1, 5))
        E = rng.normal(size=(n_ent, dk))
        P = rng.normal(size=(M, dk))
        gold = rng.integers(0, n_ent, size=M)
        _, grad, _ = entity_linking_loss(P, gold, E)
        num = numeric_gradient(lambda x: entity_linking_loss(x, gold, E)[0], P, h)
        worst = max(worst, relative_error(grad, num))
    return CheckResult("entity_linking_loss", instances, worst, tol)


def check_kge_scores(instances=100, seed=2, h=1e-6, tol=1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for kind in KINDS:
        worst = 0.0
        for _ in range(instances):
            d = 8
            x = rng.normal(size=3 * d)

            def f(v):
                return float(score_and_grad(kind, v[:d], v[d:2 * d], v[2 * d:], need_grad=False)[0])

            _, (gh, gr, gt) = score_and_grad(kind, x[:d], x[d:2 * d], x[2 * d:])
            num = numeric_gradient(f, x, h)
            worst = max(worst, relative_error(np.concatenate([gh, gr, gt]), num))
        out.append(CheckResult(f"kge_score[{kind}]", instances, worst, tol))
    return out


def toy_encoder(seed: int, num_layers=2, hidden=8, vocab_size=24, n_entities=6, kge_dim=4) -> Encoder:
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(vocab_size=vocab_size, num_layers=num_layers, hidden=hidden, heads=2, max_len=16,
                        injection_layer=1, candidates=3, init_std=0.3, seed=seed, num_special=7)
    model = Encoder(cfg, rng.normal(size=(n_entities, kge_dim)))
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # move layer-norm and bias parameters off their trivial init
        for name, p in model.named_parameters():
            if p.dim() == 1:
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=DTYPE))
    return model


def toy_injection_batch(model: Encoder, rng):
    cfg = model.cfg
    seqs = []
    for _ in range(2):
        T = int(rng.integers(6, 11))
        ids = rng.integers(cfg.num_special, cfg.vocab_size, size=T).tolist()
        s = int(rng.integers(0, T - 2))
        e = s + int(rng.integers(1, 3))
        gold = int(rng.integers(0, model.entity_table.shape[0]))
        seqs.append((ids, [(s, e, gold)]))
    return make_injection_batch(seqs, cfg, int(rng.integers(1 << 30)), rate=0.3)


def check_joint_head(instances=100, seed=3, h=1e-6, tol=1e-4) -> CheckResult:
    """Joint loss gradient with respect to the MLM logits' inputs and the projected mentions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        model = toy_encoder(seed * 1000 + i)
        batch = toy_injection_batch(model, rng)
        hidden, linker = model(batch.ids, batch.key_mask, batch.spans)
        H = hidden.detach().clone().requires_grad_(True)
        P = linker.projected.detach().clone().requires_grad_(True)
        rows = torch.as_tensor([p[0] for p in batch.mlm_positions])
        cols = torch.as_tensor([p[1] for p in batch.mlm_positions])
        labels = torch.as_tensor(batch.mlm_labels)

        def head(Hv, Pv):
            mlm = torch.nn.functional.cross_entropy(model.mlm_logits(Hv[rows, cols]), labels)
            el = entity_linking_loss(Pv.detach().numpy(), batch.gold, model.entity_table.numpy())[0]
            return mlm, el

        mlm, _ = head(H, P)
        mlm.backward()
        _, gP, _ = entity_linking_loss(P.detach().numpy(), batch.gold, model.entity_table.numpy())
        analytic = np.concatenate([H.grad.numpy().ravel(), gP.ravel()])
        nH = H.detach().numpy().size
        base = np.concatenate([H.detach().numpy().ravel(), P.detach().numpy().ravel()])

        def f(v):
            Hv = torch.tensor(v[:nH].reshape(H.shape))
            Pv = torch.tensor(v[nH:].reshape(P.shape))
            with torch.no_grad():
                a, b = head(Hv, Pv)
            return float(a) + b

        worst = max(worst, relative_error(analytic, numeric_gradient(f, base, h)))
    return CheckResult("joint_injection_loss", instances, worst, tol)


def check_encoder_end_to_end(instances=100, seed=4, h=1e-6, tol=1e-3, directions=2, atol=1e-7) -> CheckResult:
    """Directional derivatives of the joint loss along random directions, per parameter group.

    ``atol`` sits above the round-off of one difference quotient (about
    ``|L| * eps / h``), which matters only for groups with an identically
    zero gradient.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        model = toy_encoder(seed * 1000 + i)
        batch = toy_injection_batch(model, rng)
        model.zero_grad()
        joint_injection_loss(model, batch).total.backward()
        grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
        for name, p in model.named_parameters():
            for _ in range(directions):
                v = torch.as_tensor(rng.normal(size=tuple(p.shape)))
                analytic = float((grads[name] * v).sum())
                with torch.no_grad():
                    orig = p.detach().clone()
                    p.copy_(orig + h * v)
                    up = float(joint_injection_loss(model, batch).total)
                    p.copy_(orig - h * v)
                    down = float(joint_injection_loss(model, batch).total)
                    p.copy_(orig)
                numeric = (up - down) / (2 * h)
                worst = max(worst, relative_error([analytic], [numeric], atol))
    return CheckResult("encoder_end_to_end", instances, worst, tol)


def run_all(instances=100, seed=0) -> list[CheckResult]:
    results = check_ms_losses(instances, seed)
    results.append(check_entity_linking(instances, seed + 1))
    results.append(check_joint_head(instances, seed + 3))
    results.extend(check_kge_scores(instances, seed + 2))
    results.append(check_encoder_end_to_end(instances, seed + 4))
    return results

"""Transformer encoder, KGE injection, entity-linking loss, masking and checkpoints."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from medkgcl.corpus import build_corpus
from medkgcl.encoder import (DTYPE, Encoder, EncoderConfig, InjectionBatch, InjectionConfig, encode,
                             entity_linking_loss, inject_entities, joint_injection_loss, load_encoder,
                             make_injection_batch, mlm_masking, pool_mention, save_encoder, train_injected)
from medkgcl.gradcheck import check_encoder_end_to_end, check_joint_head, toy_encoder, toy_injection_batch
from medkgcl.kge import KgeConfig, train_kge
from medkgcl.pipeline import new_encoder
from medkgcl.synthetic import make_world


def perturbed(model, seed=0, scale=0.2):
    """Move every 1-d parameter (biases, layer norms) away from its trivial init."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.dim() == 1:
                p.add_(scale * torch.randn(p.shape, generator=g, dtype=DTYPE))
    return model


def np_layer_norm(x, w, b, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def oracle_forward(model, ids):
    """Step-by-step numpy forward pass of a single-head, no-injection encoder."""
    P = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    x = P["tok_emb"][ids] + P["pos_emb"][: len(ids)]
    x = np_layer_norm(x, P["emb_ln.weight"], P["emb_ln.bias"])
    for i in range(model.cfg.num_layers):
        def lin(name, z):
            return z @ P[f"blocks.{i}.{name}.weight"].T + P[f"blocks.{i}.{name}.bias"]

        q, k, v = lin("q", x), lin("k", x), lin("v", x)
        scores = q @ k.T / math.sqrt(x.shape[1])
        probs = np.exp(scores - scores.max(1, keepdims=True))
        probs /= probs.sum(1, keepdims=True)
        x = np_layer_norm(x + lin("o", probs @ v), P[f"blocks.{i}.ln1.weight"], P[f"blocks.{i}.ln1.bias"])
        pre = lin("ff1", x)
        gelu = 0.5 * pre * (1.0 + np.vectorize(math.erf)(pre / math.sqrt(2.0)))
        x = np_layer_norm(x + lin("ff2", gelu), P[f"blocks.{i}.ln2.weight"], P[f"blocks.{i}.ln2.bias"])
    return x


def small_model(**kw):
    cfg = dict(vocab_size=20, num_layers=2, hidden=8, heads=2, max_len=12, injection_layer=1, candidates=2,
               init_std=0.3)
    cfg.update(kw)
    table = np.random.default_rng(0).normal(size=(5, 4))
    return perturbed(Encoder(EncoderConfig(**cfg), table))


class TestEncode:
    def test_shape_and_determinism(self):
        model = small_model()
        ids = [2, 7, 8, 9, 10, 11]
        h1, cls1 = encode(model, ids)
        h2, _ = encode(model, ids)
        assert h1.shape == (6, 8)
        assert np.array_equal(h1, h2)
        assert np.array_equal(cls1, h1[0])

    def test_matches_numpy_oracle(self):
        cfg = EncoderConfig(vocab_size=12, num_layers=1, hidden=4, heads=1, max_len=8, injection_layer=0,
                            init_std=0.5, seed=3)
        model = perturbed(Encoder(cfg), seed=3)
        ids = [2, 5, 9, 11, 7, 6]
        hidden, _ = encode(model, ids)
        np.testing.assert_allclose(hidden, oracle_forward(model, ids), rtol=0, atol=1e-10)

    def test_unknown_token_id(self):
        with pytest.raises(ValueError, match="unknown token"):
            encode(small_model(), [2, 20])

    def test_too_long(self):
        with pytest.raises(ValueError, match="max_len"):
            encode(small_model(), list(range(5, 18)))

    def test_layer_norm_and_attention_statistics(self):
        model = small_model()
        outputs = []
        for block in model.blocks:
            for ln in (block.ln1, block.ln2):
                ln.register_forward_hook(lambda m, i, o: outputs.append((o - m.bias) / m.weight))
        ids = torch.tensor([[2, 7, 8, 9, 10]])
        with torch.no_grad():
            model(ids)
            x = model.emb_ln(model.tok_emb[ids] + model.pos_emb[:5][None])
            probs = model.blocks[0].attention_probs(x, torch.ones((1, 5), dtype=torch.bool)).numpy()
        assert len(outputs) == 4
        for y in outputs:
            y = y.numpy()[0]
            np.testing.assert_allclose(y.mean(1), 0.0, atol=1e-6)
            np.testing.assert_allclose(y.var(1), 1.0, atol=1e-6)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("bad", [dict(hidden=10, heads=4), dict(injection_layer=3), dict(candidates=0),
                                     dict(pooling="max")])
    def test_config_validated(self, bad):
        base = dict(vocab_size=10, num_layers=2, hidden=8, heads=2)
        base.update(bad)
        with pytest.raises(ValueError):
            EncoderConfig(**base)


class TestPoolMention:
    H = np.array([[9.0, 9.0], [2.0, 0.0], [0.0, 2.0], [5.0, -1.0]])

    def test_single_token_span(self):
        assert np.array_equal(pool_mention(self.H, (3, 4)), self.H[3])

    def test_hand_mean(self):
        assert np.array_equal(pool_mention(self.H, (1, 3)), [1.0, 1.0])

    def test_normalized(self):
        np.testing.assert_allclose(pool_mention(self.H, (1, 3), normalize=True), [2 ** -0.5] * 2)

    def test_cls_ignores_span(self):
        assert np.array_equal(pool_mention(self.H, (1, 2), "cls"), pool_mention(self.H, (2, 4), "cls"))
        assert np.array_equal(pool_mention(self.H, (1, 2), "cls"), self.H[0])

    def test_empty_span(self):
        with pytest.raises(ValueError):
            pool_mention(self.H, (2, 2))

    def test_span_outside(self):
        with pytest.raises(ValueError):
            pool_mention(self.H, (3, 6))

    def test_torch_input(self):
        assert torch.equal(pool_mention(torch.tensor(self.H), (1, 3)), torch.tensor([1.0, 1.0], dtype=DTYPE))


def _inject(hidden, spans, W, b, E, n):
    d = hidden.shape[-1]
    return inject_entities(hidden, spans, W, b, E, n, torch.ones(d, dtype=DTYPE), torch.zeros(d, dtype=DTYPE))


class TestInjectEntities:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.H = torch.randn((2, 6, 4), generator=g, dtype=DTYPE)
        self.W = torch.randn((4, 3), generator=g, dtype=DTYPE)
        self.b = torch.randn(3, generator=g, dtype=DTYPE)
        self.E = torch.randn((5, 3), generator=g, dtype=DTYPE)

    def test_single_candidate_is_nearest_entity(self):
        _, out = _inject(self.H, [(0, 1, 3)], self.W, self.b, self.E, 1)
        assert out.weights.tolist() == [[1.0]]
        sims = out.projected @ self.E.T
        assert int(out.candidates[0, 0]) == int(sims.argmax())

    def test_equal_similarity_gives_mean(self):
        H = torch.zeros((1, 3, 2), dtype=DTYPE)
        H[0, 1] = torch.tensor([1.0, 0.0], dtype=DTYPE)
        W = torch.eye(2, dtype=DTYPE)
        E = torch.tensor([[1.0, 1.0], [1.0, -1.0], [-5.0, 0.0]], dtype=DTYPE)
        out, link = _inject(H, [(0, 1, 2)], W, torch.zeros(2, dtype=DTYPE), E, 2)
        assert link.weights.tolist() == [[0.5, 0.5]]
        assert sorted(link.candidates[0].tolist()) == [0, 1]
        # e_m = (1, 0); added back through W^T and normalized: LN((2, 0)) = (1, -1)
        np.testing.assert_allclose(out[0, 1].numpy(), [1.0, -1.0], atol=1e-6)

    def test_no_mentions_pass_through(self):
        out, _ = _inject(self.H, [], self.W, self.b, self.E, 2)
        assert out is self.H or torch.equal(out, self.H)

    def test_non_mention_rows_unchanged(self):
        spans = [(0, 1, 3), (1, 4, 5)]
        out, link = _inject(self.H, spans, self.W, self.b, self.E, 3)
        assert out.shape == self.H.shape
        member = torch.zeros((2, 6), dtype=torch.bool)
        member[0, 1:3] = True
        member[1, 4] = True
        assert torch.equal(out[~member], self.H[~member])
        assert not torch.equal(out[member], self.H[member])
        np.testing.assert_allclose(link.weights.sum(1).numpy(), 1.0, atol=1e-12)

    def test_n_clamped(self):
        _, link = _inject(self.H, [(0, 0, 2)], self.W, self.b, self.E, 50)
        assert link.candidates.shape == (1, 5)

    def test_empty_span(self):
        with pytest.raises(ValueError):
            _inject(self.H, [(0, 2, 2)], self.W, self.b, self.E, 1)


def softmax_xent_oracle(P, gold, E):
    total = 0.0
    for p, g in zip(P, gold):
        logits = [sum(p[j] * e[j] for j in range(len(p))) for e in E]
        total += -logits[g] + math.log(sum(math.exp(z) for z in logits))
    return total


class TestEntityLinkingLoss:
    def test_identical_logits(self):
        E = np.array([[1.0, 2.0], [1.0, 2.0]])
        P = np.array([[0.3, -0.1], [2.0, 1.0], [0.0, 0.0]])
        loss, _, _ = entity_linking_loss(P, [0, 1, 0], E)
        assert loss == pytest.approx(3 * math.log(2), abs=1e-12)

    def test_limit(self):
        E = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert entity_linking_loss(np.array([[60.0, 0.0]]), [0], E)[0] < 1e-25

    def test_scalar_oracle(self):
        rng = np.random.default_rng(4)
        E, P = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        loss, _, _ = entity_linking_loss(P, [2, 0], E)
        assert abs(loss - softmax_xent_oracle(P, [2, 0], E)) < 1e-12

    def test_missing_gold_skipped(self):
        rng = np.random.default_rng(5)
        E, P = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        loss, grad, skipped = entity_linking_loss(P, [1, -1, -1], E)
        assert skipped == 2
        assert abs(loss - softmax_xent_oracle(P[:1], [1], E)) < 1e-12
        assert not grad[1:].any()

    def test_candidate_denominator(self):
        rng = np.random.default_rng(6)
        E, P = rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
        loss, _, _ = entity_linking_loss(P, [4], E, candidates=np.array([[0, 2]]))
        assert abs(loss - softmax_xent_oracle(P, [2], E[[0, 2, 4]])) < 1e-12

    def test_gradient_check(self):
        result = check_joint_head(instances=5)
        assert result.passed, result.line()


class TestMlmMasking:
    def test_plain_count(self):
        for n in (1, 7, 20, 33, 100):
            _, targets = mlm_masking(list(range(10, 10 + n)), [], seed=n, vocab_size=200, num_special=5)
            assert len(targets) == math.ceil(0.15 * n)

    def test_whole_mention(self):
        ids = list(range(10, 30))
        mention = (5, 8)
        hits = 0
        for seed in range(200):
            _, targets = mlm_masking(ids, [mention], seed=seed, vocab_size=40, num_special=5)
            inside = set(targets) & set(range(*mention))
            if inside:
                hits += 1
                assert inside == set(range(*mention))
        assert hits > 0

    def test_deterministic(self):
        ids = list(range(10, 50))
        a = mlm_masking(ids, [(3, 6)], seed=11, vocab_size=60, num_special=5)
        b = mlm_masking(ids, [(3, 6)], seed=11, vocab_size=60, num_special=5)
        assert a == b

    def test_protected_never_masked(self):
        ids = [2] + list(range(10, 30))
        for seed in range(50):
            _, targets = mlm_masking(ids, [], rate=0.5, seed=seed, vocab_size=40, protected={2})
            assert 0 not in targets

    def test_replacement_statistics(self):
        counts = np.zeros(3)
        ids = list(range(10, 110))
        for seed in range(300):
            out, targets = mlm_masking(ids, [], seed=seed, mask_id=4, vocab_size=200, num_special=5)
            for t in targets:
                counts[0 if out[t] == 4 else 2 if out[t] == ids[t] else 1] += 1
        frac = counts / counts.sum()
        # a random draw may coincide with the original token (1 in 195), which counts as "kept"
        np.testing.assert_allclose(frac, [0.8, 0.1, 0.1], atol=0.02)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            mlm_masking([1, 2, 3], [], rate=1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 10**6))
    def test_targets_sorted_unique_in_range(self, n, seed):
        _, targets = mlm_masking(list(range(5, 5 + n)), [(0, min(2, n))], seed=seed, vocab_size=80)
        assert targets == sorted(set(targets))
        assert all(0 <= t < n for t in targets)


class TestJointLoss:
    def _batch(self, model, seed=0):
        return toy_injection_batch(model, np.random.default_rng(seed))

    def test_sum_of_parts(self):
        model = toy_encoder(1)
        batch = self._batch(model)
        loss = joint_injection_loss(model, batch)
        hidden, linker = model(batch.ids, batch.key_mask, batch.spans)
        rows = [p[0] for p in batch.mlm_positions]
        cols = [p[1] for p in batch.mlm_positions]
        logits = model.mlm_logits(hidden[rows, cols]).detach().numpy()
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        mlm = -logp[np.arange(len(rows)), batch.mlm_labels].mean()
        el = softmax_xent_oracle(linker.projected.detach().numpy(), batch.gold, model.entity_table.numpy())
        assert abs(loss.mlm.item() - mlm) < 1e-12
        assert abs(loss.el.item() - el) < 1e-12
        assert abs(loss.total.item() - (mlm + el)) < 1e-12

    def test_no_mentions_is_mlm_only(self):
        model = toy_encoder(2)
        batch = make_injection_batch([([8, 9, 10, 11, 12, 13], [])], model.cfg, 0, rate=0.3)
        loss = joint_injection_loss(model, batch)
        assert loss.el.item() == 0.0
        assert loss.total.item() == loss.mlm.item()

    def test_no_targets_is_el_only(self):
        model = toy_encoder(3)
        batch = self._batch(model)
        empty = InjectionBatch(batch.ids, batch.key_mask, batch.spans, batch.gold, [], [])
        loss = joint_injection_loss(model, empty)
        assert loss.mlm.item() == 0.0
        assert loss.total.item() == loss.el.item() > 0.0

    def test_end_to_end_gradient(self):
        result = check_encoder_end_to_end(instances=3)
        assert result.passed, result.line()


@pytest.fixture(scope="module")
def tiny_world():
    world = make_world(n_types=2, concepts_per_type=3, synonyms=2, n_docs=30, seed=2)
    vocab, _, _, docs = build_corpus(world.documents, world.dictionary(), world.base_vocabulary())
    kge, _ = train_kge(world.triples, "ComplEx", KgeConfig(dim=8, epochs=5))
    return vocab, docs, kge


class TestTraining:
    def test_entity_table_frozen_and_loss_logged(self, tiny_world):
        vocab, docs, kge = tiny_world
        model = new_encoder(vocab, kge, num_layers=2, hidden=16, heads=2, max_len=32, injection_layer=1)
        before = model.entity_table.numpy().tobytes()
        rows = train_injected(model, docs, kge.entities, InjectionConfig(steps=15, batch_size=4, warmup=2))
        assert model.entity_table.numpy().tobytes() == before
        assert not model.entity_table.requires_grad
        assert len(rows) == 15
        assert all(r[1] == pytest.approx(r[2] + r[3], abs=1e-12) for r in rows)
        assert np.mean([r[1] for r in rows[-5:]]) < np.mean([r[1] for r in rows[:5]])

    def test_deterministic(self, tiny_world):
        vocab, docs, kge = tiny_world
        outs = []
        for _ in range(2):
            model = new_encoder(vocab, kge, num_layers=1, hidden=8, heads=2, max_len=32, injection_layer=1)
            train_injected(model, docs, kge.entities, InjectionConfig(steps=3, batch_size=2, warmup=1))
            outs.append(model.tok_emb.detach().numpy().tobytes())
        assert outs[0] == outs[1]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = small_model(pooling="cls", el_candidates_only=True)
        digest = save_encoder(model, tmp_path / "enc.bin")
        back = load_encoder(tmp_path / "enc.bin")
        assert len(digest) == 64
        assert (tmp_path / "enc.bin").read_bytes()[:4] == b"MENC"
        assert back.cfg == model.cfg
        for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert k == k2 and a.numpy().tobytes() == b.numpy().tobytes()
        ids = [2, 7, 8, 9]
        assert np.array_equal(encode(model, ids)[0], encode(back, ids)[0])

    def test_bad_magic(self, tmp_path):
        model = small_model()
        save_encoder(model, tmp_path / "enc.bin")
        raw = bytearray((tmp_path / "enc.bin").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "enc.bin").write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_encoder(tmp_path / "enc.bin")

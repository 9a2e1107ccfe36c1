import math

import numpy as np
import pytest
import torch

from mmda.core_types import (
    EmbeddingBatch,
    ModalityKind,
    ShapeError,
    ValidationError,
)
from mmda.md2a import (
    MD2ABlock,
    MD2AConfig,
    PairedBatch,
    batch_reorganize,
    fuse_modalities,
    md2a_block,
    md2a_head,
)

from oracles import (
    diff_attention_ref,
    gradcheck_against_fd,
    md2a_head_ref,
    mhsa_block_ref,
)

RGB, DEPTH, IR = ModalityKind.RGB, ModalityKind.DEPTH, ModalityKind.IR


def rand_emb(seed, b=4, n=3, d=4, domains=None):
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randn(b, n, d, generator=gen, dtype=torch.float64)
    labels = torch.tensor([i % 2 for i in range(b)])
    domains = tuple(domains or ["dom"] * b)
    return EmbeddingBatch.from_tokens(tokens, labels, domains)


def rand_head_weights(seed, n_d, d_k, d_v):
    gen = torch.Generator().manual_seed(seed)
    w = lambda r, c: torch.randn(r, c, generator=gen, dtype=torch.float64)
    return w(2 * n_d, 2 * d_k), w(2 * n_d, 2 * d_k), w(2 * n_d, d_v)


class TestBatchReorganize:
    def test_singleton_domains_self_pair(self):
        emb = rand_emb(0, b=3, domains=["a", "b", "c"])
        paired = batch_reorganize(emb, rng_seed=5)
        assert paired.pair_index.tolist() == [0, 1, 2]

    def test_same_domain_constraint(self):
        emb = rand_emb(1, b=4, domains=["A", "A", "B", "B"])
        paired = batch_reorganize(emb, rng_seed=9)
        assert paired.pair_index[0].item() in (0, 1)
        assert paired.pair_index[1].item() in (0, 1)
        assert paired.pair_index[2].item() in (2, 3)
        assert paired.pair_index[3].item() in (2, 3)

    def test_joint_is_feature_concat(self):
        emb = rand_emb(2, b=4, domains=["A", "A", "B", "B"])
        paired = batch_reorganize(emb, rng_seed=3)
        j = paired.pair_index
        assert torch.equal(paired.joint_tokens[..., :4], emb.tokens)
        assert torch.equal(paired.joint_tokens[..., 4:], emb.tokens[j])

    def test_deterministic_given_seed(self):
        emb = rand_emb(3, b=8, domains=["A", "B"] * 4)
        a = batch_reorganize(emb, rng_seed=7)
        b = batch_reorganize(emb, rng_seed=7)
        assert torch.equal(a.pair_index, b.pair_index)

    def test_self_pair_frequency_matches_uniform_choice(self):
        # two samples in one domain: uniform choice self-pairs half the time
        emb = rand_emb(4, b=2, domains=["A", "A"])
        hits = sum(
            batch_reorganize(emb, rng_seed=s).pair_index[0].item() == 0
            for s in range(1000)
        )
        assert 0.45 <= hits / 1000 <= 0.55

    def test_self_only_and_distinct_only_modes(self):
        emb = rand_emb(5, b=4, domains=["A", "A", "A", "A"])
        assert batch_reorganize(emb, 1, "self_only").pair_index.tolist() == [0, 1, 2, 3]
        for s in range(20):
            pi = batch_reorganize(emb, s, "distinct_only").pair_index
            assert all(pi[i].item() != i for i in range(4))

    def test_distinct_only_singleton_still_self_pairs(self):
        emb = rand_emb(6, b=1, domains=["A"])
        assert batch_reorganize(emb, 0, "distinct_only").pair_index.tolist() == [0]


class TestMD2AHead:
    def test_single_token_output_is_one_minus_lambda_v(self):
        # softmax over a single key is 1, so output = (1 - lam) * V exactly
        emb = rand_emb(7, b=2, n=1, d=4)
        paired = batch_reorganize(emb, 0)
        w_q, w_k, w_v = rand_head_weights(8, n_d=4, d_k=2, d_v=2)
        lam = 0.3
        out = md2a_head(paired, w_q, w_k, w_v, lam)
        v = paired.joint_tokens @ w_v
        assert (out - (1.0 - lam) * v).abs().max().item() < 1e-12

    def test_lambda_zero_is_vanilla_attention(self):
        emb = rand_emb(9, b=2, n=3, d=4, domains=["A", "A"])
        paired = batch_reorganize(emb, 1)
        w_q, w_k, w_v = rand_head_weights(10, n_d=4, d_k=2, d_v=3)
        out = md2a_head(paired, w_q, w_k, w_v, 0.0).numpy()
        joint = paired.joint_tokens.numpy()
        s = 1.0 / math.sqrt(4)
        for bi in range(2):
            q = (joint[bi] @ w_q.numpy())[:, :2]
            k = (joint[bi] @ w_k.numpy())[:, :2]
            v = joint[bi] @ w_v.numpy()
            from oracles import vanilla_attention_ref
            ref = vanilla_attention_ref(q, k, v, s)
            assert np.abs(out[bi] - ref).max() < 1e-12

    def test_matches_scalar_loop_oracle(self):
        emb = rand_emb(11, b=2, n=3, d=4, domains=["A", "A"])
        paired = batch_reorganize(emb, 2)
        w_q, w_k, w_v = rand_head_weights(12, n_d=4, d_k=2, d_v=2)
        lam = 0.45
        out = md2a_head(paired, w_q, w_k, w_v, lam).numpy()
        ref = md2a_head_ref(
            paired.joint_tokens.numpy(), w_q.numpy(), w_k.numpy(), w_v.numpy(), lam
        )
        assert np.abs(out - ref).max() < 1e-12

    def test_self_pairing_reduces_to_differential_attention(self):
        emb = rand_emb(13, b=3, n=4, d=6)
        paired = batch_reorganize(emb, 0, pairing="self_only")
        w_q, w_k, w_v = rand_head_weights(14, n_d=6, d_k=3, d_v=3)
        lam = 0.8
        out = md2a_head(paired, w_q, w_k, w_v, lam).numpy()
        # with [x || x] the effective single-sample projection is the sum of
        # the top and bottom halves of each weight matrix
        wq_eff = (w_q[:6] + w_q[6:]).numpy()
        wk_eff = (w_k[:6] + w_k[6:]).numpy()
        wv_eff = (w_v[:6] + w_v[6:]).numpy()
        for bi in range(3):
            ref = diff_attention_ref(emb.tokens[bi].numpy(), wq_eff, wk_eff, wv_eff, lam, 6)
            assert np.abs(out[bi] - ref).max() < 1e-6

    def test_rows_sum_to_one_minus_lambda(self):
        tokens = torch.randn(3, 5, 4, dtype=torch.float64)
        tokens[..., 0] = 1.0
        emb = EmbeddingBatch.from_tokens(tokens, torch.zeros(3, dtype=torch.int64), "ddd")
        paired = batch_reorganize(emb, 4)
        w_q, w_k, _ = rand_head_weights(15, n_d=4, d_k=2, d_v=1)
        w_v = torch.zeros(8, 1, dtype=torch.float64)
        w_v[0, 0] = 1.0   # V is the constant-one column: outputs = row sums
        for lam in (0.0, 0.25, 0.5, 1.0):
            out = md2a_head(paired, w_q, w_k, w_v, lam)
            assert (out - (1.0 - lam)).abs().max().item() < 1e-10

    def test_nonfinite_input_rejected(self):
        bad = torch.full((1, 2, 8), torch.nan, dtype=torch.float64)
        paired = PairedBatch(joint_tokens=bad, pair_index=torch.zeros(1, dtype=torch.int64))
        w_q, w_k, w_v = rand_head_weights(16, n_d=4, d_k=2, d_v=2)
        from mmda.core_types import NumericError
        with pytest.raises(NumericError):
            md2a_head(paired, w_q, w_k, w_v, 0.5)

    def test_gradcheck_wq_wk_wv_lambda(self):
        emb = rand_emb(17, b=2, n=3, d=4, domains=["A", "A"])
        paired = batch_reorganize(emb, 5)
        w_q, w_k, w_v = rand_head_weights(18, n_d=4, d_k=2, d_v=2)
        lam = torch.tensor(0.5, dtype=torch.float64)
        probe = torch.randn(2, 3, 2, generator=torch.Generator().manual_seed(19),
                            dtype=torch.float64)

        def f():
            return (md2a_head(paired, w_q, w_k, w_v, lam) * probe).sum()

        err = gradcheck_against_fd(f, [w_q, w_k, w_v, lam])
        assert err < 1e-3


class TestMD2ABlock:
    def test_degenerates_to_vanilla_mhsa_block(self):
        cfg = MD2AConfig(n_d=8, n_heads=2, lam=0.0, pairing="self_only")
        block = MD2ABlock(cfg, seed=21)
        block.eval()
        emb = rand_emb(22, b=3, n=4, d=8)
        out = block(emb, rng_seed=0)
        heads = []
        for h in block.heads:
            wq_eff = (h.w_q[:8] + h.w_q[8:])[:, :4].detach().numpy()
            wk_eff = (h.w_k[:8] + h.w_k[8:])[:, :4].detach().numpy()
            wv_eff = (h.w_v[:8] + h.w_v[8:]).detach().numpy()
            heads.append((wq_eff, wk_eff, wv_eff))
        ref = mhsa_block_ref(
            emb.tokens.numpy(),
            heads,
            block.bn.running_mean.numpy(),
            block.bn.running_var.numpy(),
            block.bn.eps,
        )
        assert np.abs(out.tokens.detach().numpy() - ref).max() < 1e-6

    def test_eval_mode_deterministic(self):
        block = MD2ABlock(MD2AConfig(n_d=8, n_heads=2), seed=23)
        block.eval()
        emb = rand_emb(24, b=4, n=3, d=8, domains=["A", "A", "B", "B"])
        o1 = block(emb, rng_seed=11)
        o2 = block(emb, rng_seed=11)
        assert torch.equal(o1.tokens, o2.tokens)

    def test_output_shape_matches_input(self):
        block = MD2ABlock(MD2AConfig(n_d=8, n_heads=4), seed=25)
        emb = rand_emb(26, b=5, n=7, d=8)
        out = block(emb, rng_seed=1)
        assert out.tokens.shape == emb.tokens.shape
        assert torch.equal(out.labels, emb.labels)
        assert out.domains == emb.domains

    def test_block_and_fuse_outputs_keep_pooled_consistent(self):
        block = MD2ABlock(MD2AConfig(n_d=8, n_heads=2), seed=33)
        block.eval()
        with torch.no_grad():
            out = block(rand_emb(34, b=3, n=4, d=8), rng_seed=2)
        out.validate()
        per = {RGB: rand_emb(35, b=2, n=5, d=8, domains=["a", "b"]),
               IR: rand_emb(36, b=2, n=5, d=8, domains=["a", "b"])}
        fuse_modalities(per).validate()

    def test_train_mode_updates_running_stats(self):
        block = MD2ABlock(MD2AConfig(n_d=8, n_heads=2), seed=27)
        before = block.bn.running_mean.clone()
        block.train()
        block(rand_emb(28, b=4, n=3, d=8), rng_seed=2)
        assert not torch.equal(before, block.bn.running_mean)

    def test_batch_of_one_in_train_mode_uses_running_stats(self):
        block = MD2ABlock(MD2AConfig(n_d=8, n_heads=2), seed=29)
        block.train()
        before = block.bn.running_mean.clone()
        out = block(rand_emb(30, b=1, n=3, d=8), rng_seed=3)
        assert torch.isfinite(out.tokens).all()
        assert torch.equal(before, block.bn.running_mean)

    def test_width_mismatch_rejected(self):
        block = MD2ABlock(MD2AConfig(n_d=8, n_heads=2), seed=31)
        with pytest.raises(ShapeError):
            block(rand_emb(32, b=2, n=3, d=4), rng_seed=0)


class TestFuseModalities:
    def make_per_modality(self, b=2, n=17, d=8, mods=(RGB, DEPTH, IR)):
        per = {}
        for i, m in enumerate(mods):
            gen = torch.Generator().manual_seed(100 + i)
            tokens = torch.randn(b, n, d, generator=gen, dtype=torch.float64)
            per[m] = EmbeddingBatch.from_tokens(
                tokens, torch.tensor([0, 1]), ("a", "b")
            )
        return per

    def test_three_modalities_concatenate(self):
        per = self.make_per_modality()
        fused = fuse_modalities(per)
        assert fused.tokens.shape == (2, 51, 8)

    def test_absent_modality_shortens_sequence(self):
        per = self.make_per_modality(mods=(RGB, IR))
        present = {RGB: [True, True], DEPTH: [False, False], IR: [True, True]}
        fused = fuse_modalities(per, present)
        assert fused.tokens.shape == (2, 34, 8)
        assert torch.equal(fused.tokens[:, :17], per[RGB].tokens)
        assert torch.equal(fused.tokens[:, 17:], per[IR].tokens)

    def test_insertion_order_irrelevant(self):
        per = self.make_per_modality()
        reordered = {IR: per[IR], RGB: per[RGB], DEPTH: per[DEPTH]}
        assert torch.equal(fuse_modalities(per).tokens, fuse_modalities(reordered).tokens)

    def test_all_absent_rejected(self):
        present = {m: [False, False] for m in (RGB, DEPTH, IR)}
        with pytest.raises(ValidationError):
            fuse_modalities({}, present)

    def test_partial_presence_rejected(self):
        per = self.make_per_modality(mods=(RGB,))
        present = {RGB: [True, False]}
        with pytest.raises(ValidationError):
            fuse_modalities(per, present)

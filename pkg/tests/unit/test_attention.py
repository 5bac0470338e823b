import math

import pytest
import torch

from src.app.models.attention import AttentionBlock, FeedForward, MultiHeadAttention, attention


def loop_attention(q, k, v):
    out = torch.zeros(q.shape[0], v.shape[1], dtype=q.dtype)
    for i in range(q.shape[0]):
        scores = [float(q[i] @ k[j]) / math.sqrt(q.shape[1]) for j in range(k.shape[0])]
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        total = sum(exps)
        for j in range(k.shape[0]):
            out[i] += exps[j] / total * v[j]
    return out


class TestAttention:
    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(20):
            n, m, d, dv = (int(x) for x in torch.randint(1, 6, (4,), generator=gen))
            q = torch.randn(n, d, dtype=torch.float64, generator=gen)
            k = torch.randn(m, d, dtype=torch.float64, generator=gen)
            v = torch.randn(m, dv, dtype=torch.float64, generator=gen)
            assert torch.allclose(attention(q, k, v), loop_attention(q, k, v), atol=1e-12)

    def test_rows_sum_to_one(self):
        q, k, v = torch.randn(2, 5, 4), torch.randn(2, 7, 4), torch.randn(2, 7, 3)
        _, weights = attention(q, k, v, return_weights=True)
        assert torch.allclose(weights.sum(-1), torch.ones(2, 5), atol=1e-6)

    def test_single_key(self):
        v = torch.tensor([[1.0, -2.0, 3.0]])
        out = attention(torch.randn(4, 2), torch.randn(1, 2), v)
        assert torch.allclose(out, v.expand(4, -1))

    def test_identical_keys_average_values(self):
        k = torch.ones(3, 2)
        v = torch.tensor([[1.0], [2.0], [6.0]])
        assert torch.allclose(attention(torch.randn(2, 2), k, v), torch.full((2, 1), 3.0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            attention(torch.randn(2, 3), torch.randn(2, 4), torch.randn(2, 4))
        with pytest.raises(ValueError):
            attention(torch.randn(2, 3), torch.randn(2, 3), torch.randn(5, 3))


class TestMultiHeadAttention:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4)

    def test_single_head_equals_projected_attention(self):
        torch.manual_seed(0)
        mha = MultiHeadAttention(4, 1).double()
        x, mem = torch.randn(1, 3, 4, dtype=torch.float64), torch.randn(1, 5, 4, dtype=torch.float64)
        expected = mha.out_proj(attention(mha.q_proj(x), mha.k_proj(mem), mha.v_proj(mem)))
        assert torch.allclose(mha(x, mem, mem), expected, atol=1e-12)

    def test_two_heads_are_independent(self):
        mha = MultiHeadAttention(4, 2, bias=False).double()
        with torch.no_grad():
            for proj in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
                proj.weight.copy_(torch.eye(4, dtype=torch.float64))
            mha.out_proj.bias.zero_()
        x, mem = torch.randn(1, 3, 4, dtype=torch.float64), torch.randn(1, 6, 4, dtype=torch.float64)
        left = attention(x[..., :2], mem[..., :2], mem[..., :2])
        right = attention(x[..., 2:], mem[..., 2:], mem[..., 2:])
        assert torch.allclose(mha(x, mem, mem), torch.cat([left, right], -1), atol=1e-12)

    def test_gradient(self, gradient_error):
        torch.manual_seed(2)
        mha = MultiHeadAttention(8, 2).double()
        x = torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True)
        mem = torch.randn(2, 6, 8, dtype=torch.float64, requires_grad=True)
        weight = torch.randn(2, 4, 8, dtype=torch.float64)

        def loss():
            return (mha(x, mem, mem) * weight).sum()

        assert gradient_error(loss, [x, mem, *mha.parameters()]) < 1e-3


class TestFeedForward:
    def test_zero_weights(self):
        ffn = FeedForward(4, 8)
        for p in ffn.parameters():
            torch.nn.init.zeros_(p)
        assert torch.count_nonzero(ffn(torch.randn(3, 4))) == 0

    def test_negative_preactivation_gives_output_bias(self):
        ffn = FeedForward(4, 8)
        with torch.no_grad():
            ffn.fc1.weight.zero_()
            ffn.fc1.bias.fill_(-1.0)
            ffn.fc2.bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
        out = ffn(torch.randn(5, 4))
        assert torch.allclose(out, torch.tensor([1.0, 2.0, 3.0, 4.0]).expand(5, -1))

    def test_matches_loop_oracle(self):
        torch.manual_seed(3)
        ffn = FeedForward(3, 5).double()
        x = torch.randn(4, 3, dtype=torch.float64)
        w1, b1, w2, b2 = ffn.fc1.weight, ffn.fc1.bias, ffn.fc2.weight, ffn.fc2.bias
        expected = torch.zeros(4, 3, dtype=torch.float64)
        for r in range(4):
            hidden = [max(0.0, float(sum(w1[h, i] * x[r, i] for i in range(3)) + b1[h])) for h in range(5)]
            for o in range(3):
                expected[r, o] = sum(w2[o, h] * hidden[h] for h in range(5)) + b2[o]
        assert torch.allclose(ffn(x), expected, atol=1e-12)


class TestAttentionBlock:
    def test_self_attention_shape(self):
        block = AttentionBlock(8, 2, 16)
        assert block(torch.randn(2, 5, 8)).shape == (2, 5, 8)

    def test_cross_attention_keeps_query_length(self):
        block = AttentionBlock(8, 2, 16)
        assert block(torch.randn(2, 5, 8), torch.randn(2, 9, 8)).shape == (2, 5, 8)

    def test_gradient(self, gradient_error):
        torch.manual_seed(4)
        block = AttentionBlock(8, 2, 16).double()
        x = torch.randn(1, 5, 8, dtype=torch.float64, requires_grad=True)
        pos = torch.randn(5, 8, dtype=torch.float64)
        weight = torch.randn(1, 5, 8, dtype=torch.float64)

        def loss():
            return (block(x, query_pos=pos) * weight).sum()

        assert gradient_error(loss, [x, *block.parameters()]) < 1e-3

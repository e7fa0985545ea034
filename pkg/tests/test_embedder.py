import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from embdiff.embedder import (
    MASK_TOKEN,
    ClampSpec,
    EmbeddingTable,
    Vocabulary,
    WhitespaceTokenizer,
)


def make_table(rows: list[list[float]]) -> EmbeddingTable:
    """Table with explicit weights; row 0 is the mask token."""
    vocab = Vocabulary([MASK_TOKEN] + [f"t{i}" for i in range(len(rows) - 1)])
    table = EmbeddingTable(vocab, dim=len(rows[0]))
    with torch.no_grad():
        table.weight.copy_(torch.tensor(rows, dtype=torch.float32))
    return table


class TestVocabulary:
    def test_mask_prepended(self):
        v = Vocabulary(["a", "b"])
        assert v.token_of(0) == MASK_TOKEN
        assert v.mask_id == 0
        assert len(v) == 3

    def test_build_sorted_unique(self):
        v = Vocabulary.build(["b", "a", "b"])
        assert v.decode([0, 1, 2]) == [MASK_TOKEN, "a", "b"]

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "a"])

    def test_save_load_round_trip(self, tmp_path):
        v = Vocabulary.build(f"tok{i}" for i in range(30))
        v.save(tmp_path / "vocab.txt")
        w = Vocabulary.load(tmp_path / "vocab.txt")
        assert w.encode(["tok3", MASK_TOKEN]) == v.encode(["tok3", MASK_TOKEN])
        assert len(w) == len(v)

    def test_whitespace_token_not_serializable(self, tmp_path):
        v = Vocabulary(["a b"])
        with pytest.raises(ValueError):
            v.save(tmp_path / "vocab.txt")

    def test_tokenizer_round_trip(self):
        tok = WhitespaceTokenizer()
        assert tok.detokenize(tok.tokenize("x  y z")) == "x y z"


class TestEmbed:
    def test_empty_sequence(self):
        table = make_table([[0.0, 0.0], [1.0, 2.0]])
        out = table.embed(torch.empty(0, dtype=torch.long))
        assert out.shape == (0, 2)

    def test_repeated_token_identical_rows(self):
        table = EmbeddingTable(Vocabulary.build(["a", "b", "c"]), 8)
        out = table.embed(torch.tensor([2, 2]))
        assert torch.equal(out[0], out[1])

    def test_out_of_range(self):
        table = EmbeddingTable(Vocabulary.build(["a"]), 4)
        with pytest.raises(ValueError):
            table.embed(torch.tensor([5]))

    def test_embed_then_hard_clamp_is_identity(self):
        table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(50)), 16, seed=3)
        ids = torch.arange(table.vocab_size)
        clamped, emb = table.hard_clamp(table.embed(ids))
        assert torch.equal(clamped, ids)
        assert torch.equal(emb, table.weight)
        # brute-force oracle: every row's nearest neighbour is itself
        d = torch.cdist(table.weight.double(), table.weight.double())
        d.fill_diagonal_(float("inf"))
        assert float(d.min()) > 0


class TestDistanceLogits:
    def test_self_distance_is_zero_and_max(self):
        table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(20)), 8, seed=1)
        logits = table.distance_logits(table.weight[7])
        assert logits[7] == 0.0
        assert logits.argmax() == 7

    def test_three_four_five_triangle(self):
        table = make_table([[100.0, 100.0], [0.0, 0.0], [3.0, 4.0]])
        logits = table.distance_logits(torch.tensor([0.0, 0.0])).detach()
        assert float(logits[1]) == 0.0
        assert float(logits[2]) == pytest.approx(-5.0)

    def test_homogeneity_under_scaling(self):
        table = make_table([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
        latent = torch.tensor([0.25, 0.75])
        base = table.distance_logits(latent)
        c = 3.5
        scaled = make_table([[c * 1.0, c * 2.0], [c * 0.5, c * -1.0], [c * 3.0, 0.0]])
        out = scaled.distance_logits(c * latent)
        assert torch.allclose(out, c * base, atol=1e-5)

    def test_dimension_mismatch(self):
        table = make_table([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ValueError):
            table.distance_logits(torch.zeros(3))

    def test_batched_shapes(self):
        table = EmbeddingTable(Vocabulary.build(["a", "b"]), 4)
        out = table.distance_logits(torch.randn(2, 5, 4))
        assert out.shape == (2, 5, table.vocab_size)


class TestHardClamp:
    def test_nearest_of_two(self):
        table = make_table([[50.0, 50.0], [0.0, 0.0], [1.0, 0.0]])
        ids, emb = table.hard_clamp(torch.tensor([[0.9, 0.1]]))
        assert ids.tolist() == [2]
        assert torch.equal(emb[0], table.weight[2])

    def test_tie_breaks_to_lowest_id(self):
        table = make_table([[50.0, 50.0], [1.0, 0.0], [-1.0, 0.0]])
        ids, _ = table.hard_clamp(torch.tensor([[0.0, 0.7]]))
        assert ids.tolist() == [1]

    def test_idempotent(self):
        table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(30)), 8, seed=2)
        latents = torch.randn(6, 8)
        ids1, emb1 = table.hard_clamp(latents)
        ids2, emb2 = table.hard_clamp(emb1)
        assert torch.equal(ids1, ids2)
        assert torch.equal(emb1, emb2)


class TestStochasticClamp:
    def test_tau_zero_is_bit_identical_to_hard(self):
        table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(40)), 8, seed=4)
        latents = torch.randn(32, 8, generator=torch.Generator().manual_seed(1))
        h_ids, h_emb = table.hard_clamp(latents)
        s_ids, s_emb = table.stochastic_clamp(latents, 0.0, torch.Generator())
        assert torch.equal(h_ids, s_ids)
        assert torch.equal(h_emb, s_emb)

    def test_two_token_frequencies(self):
        # distances 1 and 2 at tau=1: probabilities (e^-1, e^-2)/Z
        table = make_table([[90.0, 90.0], [1.0, 0.0], [2.0, 0.0]])
        latent = torch.zeros(100_000, 2)
        gen = torch.Generator().manual_seed(0)
        ids, _ = table.stochastic_clamp(latent, 1.0, gen)
        p1 = math.exp(-1) / (math.exp(-1) + math.exp(-2))  # mask term ~ e^-127
        freq = (ids == 1).float().mean().item()
        se = math.sqrt(p1 * (1 - p1) / 100_000)
        assert abs(freq - p1) < 4 * se
        assert p1 == pytest.approx(0.7311, abs=1e-4)

    def test_high_tau_approaches_uniform(self):
        table = EmbeddingTable(Vocabulary.build(["a", "b", "c", "d"]), 6, seed=5)
        gen = torch.Generator().manual_seed(1)
        ids, _ = table.stochastic_clamp(torch.zeros(100_000, 6), 1e6, gen)
        counts = torch.bincount(ids, minlength=5).double()
        expected = 100_000 / 5
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 24  # df=4; ~99.99th percentile is 23.5

    def test_probabilities_shift_invariant(self):
        table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(10)), 4, seed=6)
        logits = table.distance_logits(torch.randn(3, 4))
        tau = 0.7
        p = torch.softmax(logits / tau, dim=-1)
        p_shift = torch.softmax((logits + 5.0) / tau, dim=-1)
        assert torch.allclose(p, p_shift, atol=1e-6)

    def test_relabeling_permutes_probabilities(self):
        rows = [[9.0, 9.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 2.0]]
        table = make_table(rows)
        perm = [0, 3, 1, 2]
        permuted = make_table([rows[i] for i in perm])
        latent = torch.tensor([0.2, 0.4])
        p = torch.softmax(table.distance_logits(latent) / 0.5, dim=-1)
        q = torch.softmax(permuted.distance_logits(latent) / 0.5, dim=-1)
        assert torch.allclose(q, p[perm], atol=1e-7)

    def test_negative_tau_rejected(self):
        table = make_table([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            table.stochastic_clamp(torch.zeros(1, 2), -0.1, torch.Generator())


class TestNormalization:
    def test_rows_normalized(self):
        table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(64)), 32, seed=7)
        with torch.no_grad():
            table.weight.mul_(3.7).add_(0.9)
        table.renormalize_()
        w = table.weight.detach().double()
        assert w.mean(dim=1).abs().max() < 1e-5
        assert (w.std(dim=1, unbiased=False) - 1).abs().max() < 1e-4

    def test_constant_row_rejected(self):
        table = make_table([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            table.renormalize_()

    def test_rows_distinct_assertion(self):
        table = make_table([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            table.assert_rows_distinct()


class TestClampSpec:
    def test_defaults(self):
        spec = ClampSpec()
        assert spec.mode == "final_only" and spec.temperature == 0.0

    @pytest.mark.parametrize("kwargs", [{"mode": "sometimes"}, {"temperature": -1.0}])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ClampSpec(**kwargs)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8).map(tuple))
def test_hard_clamp_fixed_point_property(row):
    dim = len(row)
    table = EmbeddingTable(Vocabulary.build(f"w{i}" for i in range(12)), dim, seed=8)
    with torch.no_grad():
        table.weight[3] = torch.tensor(row, dtype=torch.float32)
    if torch.unique(table.weight, dim=0).shape[0] < table.vocab_size:
        return  # duplicate row injected; clamping undefined there
    ids, _ = table.hard_clamp(table.weight[3])
    assert int(ids) == 3

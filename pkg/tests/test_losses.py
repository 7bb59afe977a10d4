import math

import numpy as np
import pytest
import torch

from relamix.losses import (
    LossComponents,
    LossWeights,
    PrototypeBank,
    aux_loss,
    cdia_loss,
    compute_prototypes,
    cosine_similarity,
    cross_entropy,
    sample_negative_indices,
    total_loss,
)


def bank(vectors):
    vectors = torch.as_tensor(vectors, dtype=torch.float64)
    return PrototypeBank(vectors=vectors, present=torch.ones(len(vectors), dtype=torch.bool))


class TestCosine:
    def test_zero_vector_similarity_is_zero(self):
        a = torch.zeros(3)
        b = torch.tensor([1.0, 0.0, 0.0])
        assert cosine_similarity(a, b) == 0.0

    def test_matches_manual(self):
        rng = torch.Generator().manual_seed(0)
        a = torch.randn(10, 4, generator=rng)
        b = torch.randn(10, 4, generator=rng)
        manual = torch.nn.functional.cosine_similarity(a, b, dim=-1)
        torch.testing.assert_close(cosine_similarity(a, b), manual, rtol=1e-5, atol=1e-6)


class TestCdiaLoss:
    def test_aligned_positive_orthogonal_negative_gives_minus_one(self):
        anchors = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        prototypes = bank([[1.0, 0.0]])
        negatives = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
        loss = cdia_loss(anchors, torch.tensor([0]), prototypes, negatives, torch.tensor([[1]]))
        assert abs(float(loss) - (-1.0)) < 1e-9

    def test_equal_positive_and_negative_similarity_cancels(self):
        anchors = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        prototypes = bank([[1.0, 0.0], [1.0, 0.0]])
        negatives = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        loss = cdia_loss(anchors, torch.tensor([0]), prototypes, negatives, torch.tensor([[1]]))
        assert abs(float(loss)) < 1e-9

    def test_two_flat_negatives_give_ln_two(self):
        anchors = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        prototypes = bank([[0.0, 1.0, 0.0]])  # cos(pos) = 0
        negatives = torch.tensor([[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]], dtype=torch.float64)
        loss = cdia_loss(
            anchors, torch.tensor([0]), prototypes, negatives, torch.tensor([[1, 1]])
        )
        assert abs(float(loss) - math.log(2)) < 1e-9

    def test_rejects_negative_with_anchor_label(self):
        anchors = torch.randn(2, 3)
        prototypes = bank(torch.randn(2, 3))
        negatives = torch.randn(2, 2, 3)
        labels = torch.tensor([0, 1])
        bad = torch.tensor([[1, 0], [0, 1]])
        with pytest.raises(ValueError, match="shares"):
            cdia_loss(anchors, labels, prototypes, negatives, bad)

    def test_rejects_missing_prototype(self):
        prototypes = PrototypeBank(
            vectors=torch.zeros(2, 3), present=torch.tensor([True, False])
        )
        with pytest.raises(ValueError, match="no prototype"):
            cdia_loss(
                torch.randn(1, 3),
                torch.tensor([1]),
                prototypes,
                torch.randn(1, 1, 3),
                torch.tensor([[0]]),
            )

    def test_rejects_empty_negatives(self):
        with pytest.raises(ValueError, match="at least one negative"):
            cdia_loss(
                torch.randn(1, 3),
                torch.tensor([0]),
                bank(torch.randn(1, 3)),
                torch.empty(1, 0, 3),
                torch.empty(1, 0, dtype=torch.long),
            )

    def test_scale_invariance(self):
        rng = torch.Generator().manual_seed(1)
        anchors = torch.randn(4, 6, generator=rng, dtype=torch.float64)
        prototypes = bank(torch.randn(3, 6, generator=rng))
        negatives = torch.randn(4, 5, 6, generator=rng, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 0])
        neg_labels = (labels + 1).remainder(3).unsqueeze(1).expand(-1, 5)
        base = cdia_loss(anchors, labels, prototypes, negatives, neg_labels)
        scaled = cdia_loss(anchors * 37.5, labels, prototypes, negatives * 0.01, neg_labels)
        assert abs(float(base) - float(scaled)) < 1e-6

    def test_adding_weaker_negatives_never_decreases_loss(self):
        anchors = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        prototypes = bank([[1.0, 0.0]])
        strong = torch.tensor([[[0.8, 0.6]]], dtype=torch.float64)
        base = cdia_loss(anchors, torch.tensor([0]), prototypes, strong, torch.tensor([[1]]))
        # extra negative with cosine below the current maximum
        extra = torch.tensor([[[0.8, 0.6], [0.0, 1.0]]], dtype=torch.float64)
        grown = cdia_loss(
            anchors, torch.tensor([0]), prototypes, extra, torch.tensor([[1, 1]])
        )
        assert float(grown) >= float(base)


class TestPrototypes:
    def test_mean_of_two(self):
        emb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        out = compute_prototypes(emb, torch.tensor([0, 0]), class_count=1)
        torch.testing.assert_close(out.vectors[0], torch.tensor([0.5, 0.5]))

    def test_single_embedding_is_its_own_prototype(self):
        emb = torch.tensor([[3.0, -1.0]])
        out = compute_prototypes(emb, torch.tensor([0]), class_count=1)
        torch.testing.assert_close(out.vectors[0], emb[0])

    def test_matches_group_by_mean(self):
        rng = torch.Generator().manual_seed(2)
        emb = torch.randn(40, 5, generator=rng)
        labels = torch.randint(0, 4, (40,), generator=rng)
        while len(labels.unique()) < 4:
            labels = torch.randint(0, 4, (40,), generator=rng)
        out = compute_prototypes(emb, labels, class_count=4)
        for c in range(4):
            expected = emb[labels == c].mean(dim=0)
            torch.testing.assert_close(out.vectors[c], expected, rtol=1e-7, atol=1e-7)

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError, match="class 1"):
            compute_prototypes(torch.randn(3, 2), torch.tensor([0, 0, 0]), class_count=2)

    def test_prototypes_are_detached(self):
        emb = torch.randn(4, 3, requires_grad=True)
        out = compute_prototypes(emb, torch.tensor([0, 0, 1, 1]), class_count=2)
        assert not out.vectors.requires_grad


class TestAuxLoss:
    def test_identity_permutation_reduces_to_analytic_case(self):
        anchors = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        positives = anchors.clone()  # permutation happened to be identity
        negatives = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
        loss = aux_loss(anchors, torch.tensor([0]), positives, negatives, torch.tensor([[1]]))
        assert abs(float(loss) - (-1.0)) < 1e-9

    def test_all_same_direction_cancels(self):
        v = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
        loss = aux_loss(v, torch.tensor([0]), v * 2.0, v.unsqueeze(0) * 3.0, torch.tensor([[1]]))
        assert abs(float(loss)) < 1e-9

    def test_monotone_in_positive_similarity(self):
        negatives = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
        anchors = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        losses = []
        for cos_pos in (0.0, 0.5, 1.0):
            pos = torch.tensor([[cos_pos, math.sqrt(1 - cos_pos**2)]], dtype=torch.float64)
            losses.append(
                float(aux_loss(anchors, torch.tensor([0]), pos, negatives, torch.tensor([[1]])))
            )
        assert losses[0] > losses[1] > losses[2]

    def test_rejects_empty_pool(self):
        with pytest.raises(ValueError, match="empty negative pool"):
            aux_loss(
                torch.randn(1, 2),
                torch.tensor([0]),
                torch.randn(1, 2),
                torch.empty(1, 0, 2),
                torch.empty(1, 0, dtype=torch.long),
            )


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = torch.zeros(3, 4)
        loss = cross_entropy(logits, torch.tensor([0, 1, 3]))
        assert abs(float(loss) - math.log(4)) < 1e-6

    def test_dominant_true_logit(self):
        logits = torch.zeros(1, 5)
        logits[0, 2] = 20.0
        assert float(cross_entropy(logits, torch.tensor([2]))) < 1e-6

    def test_matches_brute_force(self):
        rng = torch.Generator().manual_seed(3)
        logits = torch.randn(16, 6, generator=rng, dtype=torch.float64)
        labels = torch.randint(0, 6, (16,), generator=rng)
        expected = 0.0
        for i in range(16):
            probs = torch.exp(logits[i]) / torch.exp(logits[i]).sum()
            expected -= math.log(float(probs[labels[i]]))
        expected /= 16
        assert abs(float(cross_entropy(logits, labels)) - expected) < 1e-7

    def test_rejects_out_of_range_label(self):
        with pytest.raises(ValueError, match="label"):
            cross_entropy(torch.zeros(1, 3), torch.tensor([3]))


class TestTotalLoss:
    def test_default_weights(self):
        weights = LossWeights()
        assert (weights.cdia, weights.ce_source, weights.ce_target, weights.ce_synth, weights.aux) == (
            1e-4,
            1.0,
            1.0,
            1e-2,
            1e-4,
        )

    def test_source_term_alone(self):
        components = LossComponents(ce_source=torch.tensor(2.0))
        assert float(total_loss(components, LossWeights())) == 2.0

    def test_cdia_down_weighted(self):
        components = LossComponents(
            cdia=torch.tensor(10.0, dtype=torch.float64), ce_source=torch.tensor(0.0)
        )
        assert abs(float(total_loss(components, LossWeights())) - 0.001) < 1e-12

    def test_all_zero(self):
        components = LossComponents(
            cdia=torch.tensor(0.0),
            ce_source=torch.tensor(0.0),
            ce_target=torch.tensor(0.0),
            ce_synth=torch.tensor(0.0),
            aux=torch.tensor(0.0),
        )
        assert float(total_loss(components, LossWeights())) == 0.0

    def test_non_finite_names_term(self):
        components = LossComponents(
            ce_source=torch.tensor(1.0), ce_target=torch.tensor(float("nan"))
        )
        with pytest.raises(FloatingPointError, match="ce_target"):
            total_loss(components, LossWeights())

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(cdia=-1.0)

    def test_gradient_flows_through_every_term(self):
        emb = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 1, 0, 1])
        prototypes = bank(torch.randn(2, 3))
        neg_idx = torch.tensor([[1], [0], [3], [2]])
        components = LossComponents(
            cdia=cdia_loss(emb, labels, prototypes, emb[neg_idx], labels[neg_idx]),
            ce_source=cross_entropy(emb, torch.tensor([0, 1, 2, 0])),
            ce_target=cross_entropy(emb, torch.tensor([1, 1, 0, 2])),
            ce_synth=cross_entropy(emb, torch.tensor([2, 0, 1, 1])),
            aux=aux_loss(emb, labels, emb.roll(1, dims=-1), emb[neg_idx], labels[neg_idx]),
        )
        total = total_loss(components, LossWeights(cdia=1.0, aux=1.0))
        total.backward()
        assert torch.isfinite(emb.grad).all()
        assert emb.grad.abs().sum() > 0


class TestNegativeSampling:
    def test_labels_always_differ(self):
        rng = np.random.default_rng(0)
        anchors = np.array([0, 1, 2, 0])
        pool = np.array([0, 0, 1, 1, 2, 2])
        idx = sample_negative_indices(anchors, pool, per_anchor=4, rng=rng)
        for i, label in enumerate(anchors):
            assert np.all(pool[idx[i]] != label)

    def test_small_pool_draws_with_replacement(self):
        rng = np.random.default_rng(1)
        idx = sample_negative_indices(np.array([0]), np.array([0, 1]), per_anchor=5, rng=rng)
        assert idx.shape == (1, 5)
        assert np.all(idx == 1)

    def test_no_eligible_negative_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError, match="no eligible"):
            sample_negative_indices(np.array([0]), np.array([0, 0]), per_anchor=2, rng=rng)

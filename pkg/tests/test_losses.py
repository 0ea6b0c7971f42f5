import math

import numpy as np
import pytest
import torch

from regionssl.losses import (ViewEmbeddings, consistency_terms,
                              cosine_similarity, flatten_assignments,
                              mean_assignment_entropy, memax_regularizer,
                              relation_ce, semantic_consistency_loss,
                              semantic_relation_loss, sinkhorn_normalize,
                              total_loss, unflatten_assignments)

LOG8 = 2.0794415416798357  # ln 8
LOG2 = 0.6931471805599453  # ln 2


def ipf_oracle(logits: np.ndarray, n_iters: int, epsilon: float) -> np.ndarray:
    """Iterative proportional fitting with explicit scaling vectors.

    Independent of the tensor implementation: keeps the kernel fixed and
    tracks row/column scalings u, v, applying the same region-then-pixel
    order per iteration and ending on the pixel constraint.
    """
    p, n = logits.shape
    z = logits.astype(np.float64) / epsilon
    k = np.exp(z - z.max())
    k = k / k.sum()
    u = np.ones(p)
    v = np.ones(n)
    for _ in range(n_iters):
        col = (u[:, None] * k * v[None, :]).sum(axis=0)
        v = v / (col * n)
        row = (u[:, None] * k * v[None, :]).sum(axis=1)
        u = u / (row * p)
    return u[:, None] * k * v[None, :] * p


class TestSinkhorn:
    def test_rows_sum_to_one(self):
        g = torch.Generator().manual_seed(0)
        q = sinkhorn_normalize(torch.randn(1024, 8, generator=g))
        assert torch.allclose(q.sum(dim=1), torch.ones(1024, dtype=torch.float64),
                              atol=1e-5)

    def test_matches_ipf_oracle(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(256, 8, generator=g)
        ours = sinkhorn_normalize(logits, n_iters=3, epsilon=0.05).numpy()
        ref = ipf_oracle(logits.numpy(), n_iters=3, epsilon=0.05)
        assert np.abs(ours - ref).max() < 1e-4

    def test_matches_ipf_oracle_when_converged(self):
        g = torch.Generator().manual_seed(2)
        logits = torch.randn(128, 8, generator=g)
        ours = sinkhorn_normalize(logits, n_iters=64, epsilon=0.05).numpy()
        ref = ipf_oracle(logits.numpy(), n_iters=64, epsilon=0.05)
        assert np.abs(ours - ref).max() < 1e-4

    def test_column_balance_improves_with_iterations(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(512, 8, generator=g)
        def col_dev(iters):
            q = sinkhorn_normalize(logits, n_iters=iters)
            return float((q.sum(dim=0) / 512 - 1 / 8).abs().max())
        assert col_dev(64) < col_dev(8) < col_dev(1)

    def test_uniform_logits_stay_uniform(self):
        q = sinkhorn_normalize(torch.zeros(16, 4))
        assert torch.allclose(q, torch.full((16, 4), 0.25, dtype=torch.float64),
                              atol=1e-9)

    def test_extreme_logits_no_overflow(self):
        # +-10 covers cosine similarities over the sharpest usable temperature
        logits = torch.tensor([[10.0, -10.0], [-10.0, 10.0]])
        q = sinkhorn_normalize(logits, n_iters=3, epsilon=0.05)
        assert torch.isfinite(q).all()
        assert (q > 0).all()
        # absurd inputs may underflow to zero but must never overflow or NaN
        wild = sinkhorn_normalize(torch.tensor([[4000.0, -4000.0]]))
        assert torch.isfinite(wild).all()

    def test_result_is_detached_float64(self):
        logits = torch.randn(8, 4, requires_grad=True)
        q = sinkhorn_normalize(logits)
        assert q.dtype == torch.float64
        assert not q.requires_grad

    def test_validation(self):
        with pytest.raises(ValueError):
            sinkhorn_normalize(torch.randn(2, 3, 4))
        with pytest.raises(ValueError):
            sinkhorn_normalize(torch.randn(4, 4), n_iters=0)
        with pytest.raises(ValueError):
            sinkhorn_normalize(torch.randn(4, 4), epsilon=-1.0)
        with pytest.raises(ValueError):
            sinkhorn_normalize(torch.tensor([[float("nan"), 1.0]]))


class TestRelation:
    def test_cross_entropy_closed_form(self):
        # one-hot target against a fifty-fifty prediction: -ln 0.5
        s = torch.tensor([[0.5, 0.5]])
        target = torch.tensor([[1.0, 0.0]])
        assert relation_ce(s, target)[0] == pytest.approx(LOG2, abs=1e-6)

    def test_perfect_match_gives_target_entropy(self):
        t = torch.tensor([[0.25, 0.25, 0.25, 0.25]])
        assert relation_ce(t, t)[0] == pytest.approx(math.log(4), abs=1e-6)

    def test_view_exchange_invariance(self):
        g = torch.Generator().manual_seed(4)
        s1 = torch.softmax(torch.randn(2, 8, 3, 3, generator=g), dim=1)
        s2 = torch.softmax(torch.randn(2, 8, 3, 3, generator=g), dim=1)
        t1 = torch.softmax(torch.randn(2, 8, 3, 3, generator=g), dim=1)
        t2 = torch.softmax(torch.randn(2, 8, 3, 3, generator=g), dim=1)
        forward = semantic_relation_loss(s1, t1, s2, t2)
        swapped = semantic_relation_loss(s2, t2, s1, t1)
        assert abs(float(forward - swapped)) < 1e-6

    def test_matches_explicit_mean(self):
        g = torch.Generator().manual_seed(5)
        s = torch.softmax(torch.randn(2, 4, 2, 2, generator=g), dim=1)
        t = torch.softmax(torch.randn(2, 4, 2, 2, generator=g), dim=1)
        loss = semantic_relation_loss(s, t, s, t)
        manual = 2 * (-(t * torch.log(s)).sum(dim=1)).mean()
        assert float(loss) == pytest.approx(float(manual), abs=1e-6)

    def test_shape_mismatch_rejected(self):
        a = torch.rand(2, 4, 3, 3)
        b = torch.rand(2, 4, 2, 2)
        with pytest.raises(ValueError):
            semantic_relation_loss(a, a, a, b)

    def test_zero_probability_is_safe(self):
        s = torch.tensor([[1.0, 0.0]])
        t = torch.tensor([[0.5, 0.5]])
        assert torch.isfinite(relation_ce(s, t)).all()


class TestMemax:
    def test_uniform_usage_is_the_minimum(self):
        uniform = torch.full((64, 8), 1 / 8)
        assert float(memax_regularizer(uniform)) == pytest.approx(-LOG8, abs=1e-6)

    def test_collapsed_usage_is_zero(self):
        one_hot = torch.zeros(64, 8)
        one_hot[:, 2] = 1.0
        assert float(memax_regularizer(one_hot)) == pytest.approx(0.0, abs=1e-6)

    def test_lower_bounded_by_negative_log_n(self):
        g = torch.Generator().manual_seed(6)
        for _ in range(20):
            s = torch.softmax(torch.randn(32, 8, generator=g), dim=1)
            assert float(memax_regularizer(s)) >= -LOG8 - 1e-6

    def test_entropy_metric_uniform(self):
        uniform = torch.full((100, 8), 1 / 8)
        assert float(mean_assignment_entropy(uniform)) == pytest.approx(LOG8, abs=1e-6)

    def test_entropy_accepts_assignment_fields(self):
        field = torch.softmax(torch.randn(2, 8, 3, 3), dim=1)
        flat = flatten_assignments(field)
        assert float(mean_assignment_entropy(field)) == \
            pytest.approx(float(mean_assignment_entropy(flat)), abs=1e-6)


class TestFlatten:
    def test_round_trip(self):
        field = torch.randn(2, 8, 3, 4)
        assert torch.equal(unflatten_assignments(flatten_assignments(field), field),
                           field)

    def test_flat_input_passes_through(self):
        flat = torch.randn(12, 8)
        assert flatten_assignments(flat) is flat

    def test_pixel_order_is_row_major_per_image(self):
        field = torch.arange(2 * 2 * 2 * 2, dtype=torch.float32).reshape(2, 2, 2, 2)
        flat = flatten_assignments(field)
        assert torch.equal(flat[0], field[0, :, 0, 0])
        assert torch.equal(flat[1], field[0, :, 0, 1])
        assert torch.equal(flat[4], field[1, :, 0, 0])

    def test_bad_rank_rejected(self):
        with pytest.raises(ValueError):
            flatten_assignments(torch.randn(2, 3, 4))


class TestCosine:
    def test_hand_value(self):
        u = torch.tensor([1.0, 0.0])
        v = torch.tensor([1.0, 1.0])
        assert float(cosine_similarity(u, v)) == pytest.approx(1 / math.sqrt(2),
                                                               abs=1e-6)

    def test_parallel_orthogonal_opposite(self):
        a = torch.tensor([2.0, 0.0])
        assert float(cosine_similarity(a, a)) == pytest.approx(1.0, abs=1e-5)
        assert float(cosine_similarity(a, torch.tensor([0.0, 3.0]))) == \
            pytest.approx(0.0, abs=1e-6)
        assert float(cosine_similarity(a, -a)) == pytest.approx(-1.0, abs=1e-5)

    def test_zero_vector_is_zero_not_nan(self):
        z = torch.zeros(4)
        assert float(cosine_similarity(z, torch.ones(4))) == 0.0

    def test_batched_last_axis(self):
        u = torch.randn(3, 5, 4)
        v = torch.randn(3, 5, 4)
        assert cosine_similarity(u, v).shape == (3, 5)


def identity(x):
    return x


class TestConsistency:
    def hand_embeddings(self):
        online = ViewEmbeddings(
            global_embedding=torch.tensor([[1.0, 0.0]]),
            local_embeddings=torch.tensor([[[1.0, 0.0]]]))
        target = ViewEmbeddings(
            global_embedding=torch.tensor([[1.0, 0.0]]),
            local_embeddings=torch.tensor([[[0.0, 1.0]]]))
        return online, target

    def test_terms_shapes(self):
        online = ViewEmbeddings(torch.randn(4, 8), torch.randn(4, 3, 8))
        target = ViewEmbeddings(torch.randn(4, 8), torch.randn(4, 3, 8))
        g, l = consistency_terms(online, target, identity, identity)
        assert g.shape == (4,)
        assert l.shape == (4, 3)

    def test_hand_value_both_directions(self):
        """global cos 1, local cos 0, lambda 0.5 -> -0.5 per direction."""
        online, target = self.hand_embeddings()
        loss = semantic_consistency_loss(online, target, online, target,
                                         identity, identity, lambda_c=0.5)
        assert float(loss) == pytest.approx(-1.0, abs=1e-4)

    def test_lambda_extremes(self):
        online, target = self.hand_embeddings()
        only_global = semantic_consistency_loss(online, target, online, target,
                                                identity, identity, lambda_c=1.0)
        only_local = semantic_consistency_loss(online, target, online, target,
                                               identity, identity, lambda_c=0.0)
        assert float(only_global) == pytest.approx(-2.0, abs=1e-4)
        assert float(only_local) == pytest.approx(0.0, abs=1e-4)

    def test_view_exchange_invariance(self):
        g = torch.Generator().manual_seed(7)
        v1 = ViewEmbeddings(torch.randn(2, 8, generator=g),
                            torch.randn(2, 4, 8, generator=g))
        v2 = ViewEmbeddings(torch.randn(2, 8, generator=g),
                            torch.randn(2, 4, 8, generator=g))
        t1 = ViewEmbeddings(torch.randn(2, 8, generator=g),
                            torch.randn(2, 4, 8, generator=g))
        t2 = ViewEmbeddings(torch.randn(2, 8, generator=g),
                            torch.randn(2, 4, 8, generator=g))
        forward = semantic_consistency_loss(v1, t2, v2, t1, identity, identity, 0.5)
        swapped = semantic_consistency_loss(v2, t1, v1, t2, identity, identity, 0.5)
        assert abs(float(forward - swapped)) < 1e-6

    def test_loss_bounded(self):
        online = ViewEmbeddings(torch.randn(8, 16), torch.randn(8, 4, 16))
        target = ViewEmbeddings(torch.randn(8, 16), torch.randn(8, 4, 16))
        loss = semantic_consistency_loss(online, target, online, target,
                                         identity, identity, 0.5)
        assert -2.0 - 1e-5 <= float(loss) <= 2.0 + 1e-5


def test_total_loss_arithmetic():
    c = torch.tensor(-1.5)
    r = torch.tensor(4.0)
    assert float(total_loss(c, r, lambda_r=0.1)) == pytest.approx(-1.1, abs=1e-7)
    assert float(total_loss(c, r, lambda_r=0.0)) == pytest.approx(-1.5, abs=1e-7)

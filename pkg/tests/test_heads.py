import numpy as np
import pytest
import torch

from fewshot_sed.backbones import BackboneConfig, PerceiverConfig
from fewshot_sed.heads import (
    ProtoHead,
    ProtoHeadConfig,
    RoiPerceiver,
    SecondStageHead,
    compute_prototypes,
    roi_pool,
)
from fewshot_sed.models import ModelConfig, ProposalModel
from fewshot_sed.proposals import RpnConfig, refine

SMALL_PERCEIVER = PerceiverConfig(num_latents=4, latent_dim=16, cross_blocks=1, self_blocks_per_cross=1, num_heads=2)


class TestRoiPool:
    def test_single_row(self):
        fm = torch.randn(10, 6)
        out = roi_pool(fm, (3.0, 4.0))
        assert torch.equal(out, fm[3])

    def test_whole_map(self):
        fm = torch.randn(10, 6)
        out = roi_pool(fm, (0.0, 10.0))
        assert torch.equal(out, fm.max(dim=0).values)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        fm = torch.randn(40, 5)
        for _ in range(100):
            start = rng.uniform(0, 38)
            end = start + rng.uniform(1.0, 40 - start)
            got = roi_pool(fm, (start, end))
            lo, hi = int(np.floor(start)), int(np.ceil(min(end, 40)))
            want = fm[lo].clone()
            for r in range(lo + 1, hi):
                want = torch.maximum(want, fm[r])
            assert torch.equal(got, want)

    def test_monotone_under_enlargement(self):
        fm = torch.randn(30, 4)
        inner = roi_pool(fm, (5.0, 10.0))
        outer = roi_pool(fm, (3.0, 14.0))
        assert torch.all(outer >= inner)

    def test_degenerate_region(self):
        fm = torch.randn(10, 4)
        with pytest.raises(ValueError, match="degenerate"):
            roi_pool(fm[:0], (0.0, 1.0))


class TestRoiPerceiver:
    def setup_method(self):
        torch.manual_seed(0)
        self.net = RoiPerceiver(8, SMALL_PERCEIVER).eval()

    def test_fixed_output_length(self):
        fm = torch.randn(80, 8)
        a = self.net(fm, (0.0, 1.0))
        b = self.net(fm, (10.0, 70.0))
        assert a.shape == b.shape == (16,)

    def test_identical_regions_identical_embeddings(self):
        fm = torch.randn(30, 8)
        assert torch.equal(self.net(fm, (4.0, 9.0)), self.net(fm, (4.0, 9.0)))

    def test_gradient_localized_to_region(self):
        fm = torch.randn(30, 8, requires_grad=True)
        self.net(fm, (10.0, 15.0)).sum().backward()
        grad = fm.grad
        assert torch.all(grad[:10] == 0)
        assert torch.all(grad[15:] == 0)
        assert grad[10:15].abs().sum() > 0


class TestSecondStage:
    def setup_method(self):
        torch.manual_seed(0)
        self.head = SecondStageHead(12, hidden=16)

    def test_batch_shapes(self):
        logits, offsets = self.head(torch.randn(7, 12))
        assert logits.shape == (7,)
        assert offsets.shape == (7, 2)

    def test_zero_offsets_leave_interval_unchanged(self):
        assert refine((3.0, 9.0), 0.0, 0.0) == (3.0, 9.0)

    def test_round_trip_with_oracle_targets(self):
        # same absolute-offset algebra as stage I
        rng = np.random.default_rng(1)
        for _ in range(100):
            s, e = sorted(rng.uniform(0, 100, 2))
            if e - s < 0.5:
                continue
            gs, ge = sorted(rng.uniform(0, 100, 2))
            lo = (ge - gs) - (e - s)
            co = (gs + ge) / 2 - (s + e) / 2
            out = refine((s, e), lo, co)
            if out is None:
                continue
            assert out[0] == pytest.approx(gs, abs=1e-9)
            assert out[1] == pytest.approx(ge, abs=1e-9)


class TestComputePrototypes:
    def test_mean_of_two(self):
        out = compute_prototypes([torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0])])
        assert torch.equal(out, torch.tensor([2.0, 3.0]))

    def test_single_support(self):
        v = torch.tensor([5.0, -1.0])
        assert torch.equal(compute_prototypes([v]), v)

    def test_matches_summation_oracle(self):
        torch.manual_seed(0)
        embs = [torch.randn(256) for _ in range(5)]
        got = compute_prototypes(embs)
        want = sum(e.numpy() for e in embs) / 5
        np.testing.assert_allclose(got.numpy(), want, atol=1e-7)

    def test_permutation_bit_identical(self):
        torch.manual_seed(1)
        embs = [torch.randn(32) for _ in range(6)]
        a = compute_prototypes(embs)
        b = compute_prototypes(embs[::-1])
        c = compute_prototypes([embs[i] for i in [3, 0, 5, 1, 4, 2]])
        assert torch.equal(a, b) and torch.equal(a, c)

    def test_empty_class_errors(self):
        with pytest.raises(ValueError, match="empty"):
            compute_prototypes([])


class TestProtoHead:
    def setup_method(self):
        self.head = ProtoHead(ProtoHeadConfig())

    def test_zero_distance_dominates(self):
        protos = torch.tensor([[0.0, 0.0], [50.0, 50.0]])
        q = torch.tensor([[0.0, 0.0]])
        with torch.no_grad():
            self.head.no_event_logit.fill_(-100.0)
        dist = self.head(q, protos)
        assert dist[0, 0] > 0.999

    def test_equal_logits_uniform(self):
        # both prototypes at squared distance d0 and no-event logit == -d0
        protos = torch.tensor([[2.0, 0.0], [0.0, 2.0]])
        q = torch.tensor([[0.0, 0.0]])
        with torch.no_grad():
            self.head.no_event_logit.fill_(-4.0)
        dist = self.head(q, protos)
        assert torch.allclose(dist, torch.full((1, 3), 1 / 3), atol=1e-6)

    def test_sums_to_one(self):
        torch.manual_seed(0)
        protos = torch.randn(5, 8)
        q = torch.randn(1000, 8)
        dist = self.head(q, protos)
        assert torch.allclose(dist.sum(dim=1), torch.ones(1000), atol=1e-6)

    def test_logit_shift_invariance(self):
        torch.manual_seed(1)
        protos = torch.randn(4, 6)
        q = torch.randn(10, 6)
        z = self.head.logits(q, protos)
        a = torch.softmax(z, dim=-1)
        b = torch.softmax(z + 3.7, dim=-1)
        assert torch.allclose(a, b, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            self.head(torch.randn(2, 4), torch.randn(3, 5))


class TestEmbedSupport:
    def test_pool_path_matches_manual_composition(self):
        torch.manual_seed(0)
        cfg = ModelConfig(
            variant="proto-rcrnn",
            backbone=BackboneConfig(conv_channels=(4, 4, 8, 8, 8, 8, 8), hidden_size=8),
            rpn=RpnConfig(hidden_dim=16),
            second_stage_hidden=16,
        )
        model = ProposalModel(cfg).eval()
        spec = torch.randn(96, 64)
        with torch.no_grad():
            emb = model.embed_support(spec)
            fm = model.backbone(spec)
            want = roi_pool(fm, (0.0, float(fm.shape[0])))
        assert torch.equal(emb, want)

    def test_support_lengths_give_equal_dims(self):
        torch.manual_seed(0)
        cfg = ModelConfig(
            variant="proto-rcrnn",
            backbone=BackboneConfig(conv_channels=(4, 4, 8, 8, 8, 8, 8), hidden_size=8),
            rpn=RpnConfig(hidden_dim=16),
            second_stage_hidden=16,
        )
        model = ProposalModel(cfg).eval()
        with torch.no_grad():
            a = model.embed_support(torch.randn(98, 64))  # ~1 s
            b = model.embed_support(torch.randn(498, 64))  # ~5 s
        assert a.shape == b.shape

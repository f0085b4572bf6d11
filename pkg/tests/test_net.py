"""Network tests: attention oracle equivalence, shape contracts, head
normalization, and positional sensitivity."""

import numpy as np
import pytest
import torch

from motionreid.errors import ConfigurationError
from motionreid.net import (
    MotionAwareNet,
    NetConfig,
    multihead_attention,
    self_attention,
    sinusoidal_positions,
)


def tiny_config(**kw) -> NetConfig:
    base = dict(image_size=(32, 16), backbone_channels=(8, 8, 8), embed_dim=16,
                num_heads=2, ffn_dim=32, encoder_layers=1, decoder_layers=1,
                num_keypoints=3, pos_dim=8)
    base.update(kw)
    return NetConfig(**base)


def tiny_model(seed=0, **kw) -> MotionAwareNet:
    torch.manual_seed(seed)
    return MotionAwareNet(tiny_config(**kw)).double()


def attention_oracle(tokens: np.ndarray) -> np.ndarray:
    """Direct dense computation: softmax(F F^T / sqrt(D')) F."""
    n, d = tokens.shape
    out = np.zeros_like(tokens)
    for i in range(n):
        logits = np.array([tokens[i] @ tokens[j] / np.sqrt(d) for j in range(n)])
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        for j in range(n):
            out[i] += w[j] * tokens[j]
    return out


class TestSelfAttention:
    def test_single_token_is_identity(self):
        x = torch.randn(1, 1, 6, dtype=torch.float64)
        np.testing.assert_allclose(self_attention(x).numpy(), x.numpy(), atol=1e-12)

    def test_identical_tokens_map_to_themselves(self):
        t = torch.randn(1, 5, dtype=torch.float64).repeat(2, 1)
        out = self_attention(t)
        np.testing.assert_allclose(out.numpy(), t.numpy(), atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for n in (2, 3, 4):
            tokens = rng.normal(size=(n, 8))
            got = self_attention(torch.as_tensor(tokens)).numpy()
            np.testing.assert_allclose(got, attention_oracle(tokens), atol=1e-6)

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(1)
        x = torch.as_tensor(rng.normal(size=(7, 5)))
        d = x.shape[-1]
        w = torch.softmax(x @ x.T / np.sqrt(d), dim=-1)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(dim=-1).numpy(), np.ones(7), atol=1e-6)

    def test_multihead_reduces_to_single_head(self):
        x = torch.randn(2, 6, 8, dtype=torch.float64)
        np.testing.assert_allclose(multihead_attention(x, x, 1).numpy(),
                                   self_attention(x).numpy(), atol=1e-12)


class TestBackbone:
    def test_grid_shape_from_stride(self):
        m = tiny_model()
        fm = m.extract_features(torch.zeros(2, 3, 32, 16, dtype=torch.float64))
        assert fm.shape == (2, 16, 4, 2)

    def test_zero_image_yields_finite_features(self):
        m = tiny_model()
        fm = m.extract_features(torch.zeros(1, 3, 32, 16, dtype=torch.float64))
        assert torch.isfinite(fm).all()

    def test_undersized_image_raises(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            m.extract_features(torch.zeros(1, 3, 4, 4, dtype=torch.float64))

    def test_deterministic_forward(self):
        m = tiny_model()
        m.eval()
        x = torch.randn(1, 3, 32, 16, dtype=torch.float64)
        with torch.no_grad():
            a = m(x)
            b = m(x)
        assert torch.equal(a.f_g, b.f_g)
        assert torch.equal(a.heatmaps, b.heatmaps)


class TestEncodeDecode:
    def test_zero_encoder_layers_returns_projected_input(self):
        m = tiny_model(encoder_layers=0)
        fm = m.extract_features(torch.randn(1, 3, 32, 16, dtype=torch.float64))
        tokens = m.attach_positions(fm)
        f_g = m.encode(tokens)
        expected = m.input_proj(tokens).transpose(1, 2).reshape(1, 16, 4, 2)
        np.testing.assert_allclose(f_g.detach().numpy(), expected.detach().numpy(),
                                   atol=1e-12)

    def test_output_shape_contract(self):
        m = tiny_model()
        out = m(torch.randn(3, 3, 32, 16, dtype=torch.float64))
        assert out.f_g.shape == (3, 16, 4, 2)
        assert out.heatmaps.shape == (3, 3, 4, 2)
        assert out.segmap_logits.shape == (3, 4, 4, 2)
        assert out.coords.shape == (3, 3, 2)
        assert out.jacobians.shape == (3, 3, 2, 2)

    def test_permuting_positions_changes_output(self):
        m = tiny_model()
        fm = m.extract_features(torch.randn(1, 3, 32, 16, dtype=torch.float64))
        tokens = m.attach_positions(fm)
        flat = fm.flatten(2).transpose(1, 2)
        pos = m.pos_table.to(flat.dtype)
        perm = torch.randperm(pos.shape[0], generator=torch.Generator().manual_seed(3))
        shuffled = torch.cat([flat, pos[perm].expand(1, -1, -1)], dim=-1)
        a = m.encode(tokens)
        b = m.encode(shuffled)
        assert (a - b).abs().max() > 1e-8

    def test_query_counts(self):
        m10 = tiny_model(num_keypoints=10)
        kp, seg = m10.decode_queries(torch.randn(2, 16, 4, 2, dtype=torch.float64))
        assert kp.shape[1] == 10 and seg.shape[1] == 11
        m1 = tiny_model(num_keypoints=1)
        kp, seg = m1.decode_queries(torch.randn(2, 16, 4, 2, dtype=torch.float64))
        assert kp.shape[1] == 1 and seg.shape[1] == 2

    def test_embeddings_finite(self):
        m = tiny_model()
        kp, seg = m.decode_queries(torch.randn(4, 16, 4, 2, dtype=torch.float64))
        assert torch.isfinite(kp).all() and torch.isfinite(seg).all()


class TestProjectMaps:
    def test_constant_feature_map_gives_uniform_heatmaps(self):
        m = tiny_model()
        f_g = torch.ones(1, 16, 4, 2, dtype=torch.float64)
        kp_emb = torch.randn(1, 3, 16, dtype=torch.float64)
        seg_emb = torch.randn(1, 4, 16, dtype=torch.float64)
        heads = m.project_maps(kp_emb, seg_emb, f_g)
        np.testing.assert_allclose(heads.heatmaps.detach().numpy(),
                                   np.full((1, 3, 4, 2), 1 / 8), atol=1e-9)

    def test_heatmaps_sum_to_one(self):
        m = tiny_model()
        out = m(torch.randn(5, 3, 32, 16, dtype=torch.float64))
        sums = out.heatmaps.sum(dim=(-2, -1))
        np.testing.assert_allclose(sums.detach().numpy(), np.ones((5, 3)), atol=1e-6)

    def test_two_cell_toy_grid_matches_hand_computation(self):
        # Orthogonal embeddings against a hand-built 2-cell feature map:
        # the sigmoid dot products and their normalization are recomputed
        # by hand with the same 1/sqrt(d) scaling.
        m = tiny_model(num_keypoints=2)
        d = 16
        f_g = torch.zeros(1, d, 1, 2, dtype=torch.float64)
        f_g[0, 0, 0, 0] = 2.0
        f_g[0, 1, 0, 1] = 3.0
        emb = torch.zeros(1, 2, d, dtype=torch.float64)
        emb[0, 0, 0] = 1.0
        emb[0, 1, 1] = 1.0

        class Identity(torch.nn.Module):
            def forward(self, x):
                return x

        m.keypoint_head = Identity()
        m.segment_head = Identity()
        heads = m.project_maps(emb, torch.zeros(1, 3, d, dtype=torch.float64), f_g)
        s = 1 / np.sqrt(d)

        def sig(v):
            return 1 / (1 + np.exp(-v))

        row0 = np.array([sig(2.0 * s), sig(0.0)])
        row1 = np.array([sig(0.0), sig(3.0 * s)])
        expect = np.stack([row0 / row0.sum(), row1 / row1.sum()])
        np.testing.assert_allclose(heads.heatmaps[0, :, 0, :].detach().numpy(),
                                   expect, atol=1e-9)

    def test_head_outputs_finite_for_many_random_inputs(self):
        m = tiny_model()
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = torch.as_tensor(rng.normal(size=(100, 3, 32, 16)))
            out = m(x)
            assert torch.isfinite(out.heatmaps).all()
            assert torch.isfinite(out.segmap_logits).all()
            assert torch.isfinite(out.f_g).all()


class TestParts:
    def test_parts_form_simplex(self):
        m = tiny_model()
        out = m(torch.randn(2, 3, 32, 16, dtype=torch.float64))
        sums = out.parts.sum(dim=1)
        np.testing.assert_allclose(sums.detach().numpy(),
                                   np.ones_like(sums.detach().numpy()), atol=1e-6)
        assert (out.parts >= 0).all() and (out.parts <= 1).all()


class TestConfigValidation:
    def test_bad_pos_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            NetConfig(pos_mode="bogus")

    def test_position_table_shape(self):
        t = sinusoidal_positions(4, 2, 8)
        assert t.shape == (8, 8)
        with pytest.raises(ConfigurationError):
            sinusoidal_positions(4, 2, 6)

    def test_add_mode_supported(self):
        m = tiny_model(pos_mode="add")
        out = m(torch.randn(1, 3, 32, 16, dtype=torch.float64))
        assert out.f_g.shape == (1, 16, 4, 2)

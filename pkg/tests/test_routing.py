"""Routing tests: exact STE contracts, gate conditioning, purity of the
hard mixtures, and the ablation gate variants."""

import numpy as np
import pytest

from uniroute import tensor as T
from uniroute.routing import (
    Ar2Moe, DomainCodebook, GateNetwork, MdrMoe, RoutingDecision,
    StaticFusion, UnknownDomainError, binary_no_ste, gumbel_binary,
    gumbel_top1, soft_mix, ste_binary, ste_top1, top1_no_ste,
)
from uniroute.tensor import ContractViolation, Tape, Tensor


class TestSteBinary:
    def test_threshold_forward(self):
        g = Tensor(np.array([0.7, 0.3, 0.5]).reshape(1, 1, 1, 3),
                   requires_grad=True)
        m = ste_binary(g)
        np.testing.assert_array_equal(m.data.reshape(-1), [1.0, 0.0, 0.0])

    def test_identity_gradient_exact(self):
        rng = np.random.default_rng(0)
        g = Tensor(rng.uniform(size=(2, 1, 3, 3)), requires_grad=True)
        c = rng.standard_normal((2, 1, 3, 3))
        with Tape() as tape:
            loss = T.tsum(T.mul(ste_binary(g), Tensor(c)))
            tape.backward(loss)
        np.testing.assert_array_equal(g.grad, c)  # bit-exact identity


class TestSteTop1:
    def test_argmax_forward(self):
        pi = Tensor(np.array([0.2, 0.5, 0.3]).reshape(1, 3, 1, 1))
        np.testing.assert_array_equal(ste_top1(pi).data.reshape(-1), [0, 1, 0])

    def test_tie_routes_to_lowest_index(self):
        pi = Tensor(np.array([0.4, 0.4, 0.2]).reshape(1, 3, 1, 1))
        np.testing.assert_array_equal(ste_top1(pi).data.reshape(-1), [1, 0, 0])

    def test_identity_gradient_all_channels(self):
        rng = np.random.default_rng(1)
        pi = Tensor(rng.uniform(size=(1, 3, 2, 2)), requires_grad=True)
        c = rng.standard_normal((1, 3, 2, 2))
        with Tape() as tape:
            loss = T.tsum(T.mul(ste_top1(pi), Tensor(c)))
            tape.backward(loss)
        np.testing.assert_array_equal(pi.grad, c)

    def test_rowsum_one(self):
        rng = np.random.default_rng(2)
        pi = Tensor(rng.uniform(size=(2, 3, 4, 4)))
        z = ste_top1(pi)
        np.testing.assert_array_equal(z.data.sum(axis=1), np.ones((2, 4, 4)))

    def test_needs_two_channels(self):
        with pytest.raises(ContractViolation):
            ste_top1(Tensor(np.zeros((1, 1, 2, 2))))

    def test_monotone_invariance_of_argmax(self):
        # scaling pre-sigmoid logits by a positive constant keeps the routing
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((1, 3, 5, 5))
        a = ste_top1(T.sigmoid(Tensor(logits))).data
        b = ste_top1(T.sigmoid(Tensor(3.7 * logits))).data
        np.testing.assert_array_equal(a, b)


class TestVariants:
    def test_top1_no_ste_blocks_gradient(self):
        rng = np.random.default_rng(4)
        pi = Tensor(rng.uniform(size=(1, 3, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.mul(top1_no_ste(pi), Tensor(np.ones((1, 3, 2, 2)))))
            tape.backward(loss)
        assert pi.grad is None

    def test_soft_mix_mean_at_half(self):
        rng = np.random.default_rng(5)
        e1 = Tensor(rng.standard_normal((1, 2, 3, 3)))
        e2 = Tensor(rng.standard_normal((1, 2, 3, 3)))
        probs = Tensor(np.full((1, 1, 3, 3), 0.5))
        out = soft_mix(probs, [e1, e2])
        np.testing.assert_allclose(out.data, 0.5 * (e1.data + e2.data),
                                   rtol=1e-15)
        probs3 = Tensor(np.full((1, 3, 3, 3), 0.5))
        e3 = Tensor(rng.standard_normal((1, 2, 3, 3)))
        out3 = soft_mix(probs3, [e1, e2, e3])
        np.testing.assert_allclose(
            out3.data, (e1.data + e2.data + e3.data) / 3.0, rtol=1e-12)

    def test_gumbel_limit_matches_ste(self):
        rng = np.random.default_rng(6)
        logits = Tensor(rng.standard_normal((1, 3, 4, 4)))
        hard = gumbel_top1(logits, tau=1e-6, noise=False)
        ref = ste_top1(T.sigmoid(logits))
        np.testing.assert_array_equal(hard.data, ref.data)

        logit = Tensor(rng.standard_normal((1, 1, 4, 4)))
        hardb = gumbel_binary(logit, tau=1e-6, noise=False)
        refb = ste_binary(T.sigmoid(logit))
        np.testing.assert_array_equal(hardb.data, refb.data)

    def test_gumbel_rejects_bad_tau(self):
        with pytest.raises(ContractViolation):
            gumbel_top1(Tensor(np.zeros((1, 3, 2, 2))), tau=0.0, noise=False)
        with pytest.raises(ContractViolation):
            gumbel_binary(Tensor(np.zeros((1, 1, 2, 2))), tau=-1.0, noise=False)


class TestGateNetwork:
    def test_zero_wg_gives_half(self):
        rng = np.random.default_rng(7)
        gate = GateNetwork(8, 1, rng)
        gate.wg.data[:] = 0.0
        gate.wg_b.data[:] = 0.0
        code = DomainCodebook(2, rng)
        x = Tensor(rng.standard_normal((2, 8, 4, 4)))
        p = gate.probs(x, code.embed(0))
        np.testing.assert_array_equal(p.data, np.full((2, 1, 4, 4), 0.5))

    def test_zero_modulation_kills_feature_dependence(self):
        rng = np.random.default_rng(8)
        gate = GateNetwork(8, 1, rng)
        gate.gamma_w.data[:] = 0.0
        gate.gamma_b.data[:] = 0.0
        gate.beta_w.data[:] = 0.0
        gate.beta_b.data[:] = 0.0
        code = DomainCodebook(2, rng)
        x1 = Tensor(rng.standard_normal((1, 8, 4, 4)))
        x2 = Tensor(rng.standard_normal((1, 8, 4, 4)))
        p1 = gate.probs(x1, code.embed(0)).data
        p2 = gate.probs(x2, code.embed(0)).data
        np.testing.assert_array_equal(p1, p2)

    def test_distinct_domains_give_distinct_maps(self):
        rng = np.random.default_rng(9)
        gate = GateNetwork(8, 1, rng)
        code = DomainCodebook(3, rng)
        x = Tensor(rng.standard_normal((1, 8, 4, 4)))
        pa = gate.probs(x, code.embed(0)).data
        pb = gate.probs(x, code.embed(1)).data
        assert np.abs(pa - pb).max() > 0

    def test_unknown_domain(self):
        rng = np.random.default_rng(10)
        code = DomainCodebook(3, rng)
        with pytest.raises(UnknownDomainError):
            code.embed(3)
        with pytest.raises(UnknownDomainError):
            code.embed(-1)

    def test_grid_pool_coarsens(self):
        rng = np.random.default_rng(11)
        gate = GateNetwork(8, 1, rng, grid_pool=2)
        code = DomainCodebook(1, rng)
        x = Tensor(rng.standard_normal((1, 8, 8, 8)))
        p = gate.probs(x, code.embed(0)).data
        assert p.shape == (1, 1, 8, 8)
        blocks = p.reshape(1, 1, 4, 2, 4, 2)
        assert np.ptp(blocks, axis=(3, 5)).max() == 0.0  # constant per cell


class TestAr2Moe:
    def _block(self, seed=0, mode="ste_hard"):
        rng = np.random.default_rng(seed)
        block = Ar2Moe(4, rng, mode=mode)
        code = DomainCodebook(2, rng)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)))
        return block, code, x

    def test_forced_masks_collapse(self):
        block, code, x = self._block()
        block.gate.wg.data[:] = 0.0
        block.gate.wg_b.data[:] = -50.0  # g ~ 0 -> local everywhere
        y, dec = block.forward(x, code.embed(0))
        expected = T.add(block.local.forward(x), x)
        np.testing.assert_allclose(y.data, expected.data, atol=1e-12)
        assert dec.selection_rate[0] == 1.0

        block.gate.wg_b.data[:] = 50.0  # g ~ 1 -> global everywhere
        y, dec = block.forward(x, code.embed(0))
        expected = T.add(block.global_.forward(x), x)
        np.testing.assert_allclose(y.data, expected.data, atol=1e-12)
        assert dec.selection_rate[1] == 1.0

    def test_mixed_mask_purity(self):
        # y equals exactly (selected expert + x) at every pixel, never a blend
        block, code, x = self._block(seed=1)
        y, dec = block.forward(x, code.embed(0))
        local = block.local.forward(x).data
        glob = block.global_.forward(x).data
        m = dec.hard_mask.data.astype(bool)
        assert 0.0 < m.mean() < 1.0  # genuinely mixed routing
        mb = np.broadcast_to(m, local.shape)
        expected = np.where(mb, glob, local) + x.data
        np.testing.assert_array_equal(y.data, expected)

    def test_selection_rates_in_unit_interval(self):
        block, code, x = self._block(seed=2)
        _, dec = block.forward(x, code.embed(0))
        assert 0.0 <= dec.selection_rate[1] <= 1.0
        assert abs(dec.selection_rate.sum() - 1.0) < 1e-12

    def test_entropy_distribution_binary(self):
        block, code, x = self._block(seed=3)
        _, dec = block.forward(x, code.embed(0))
        dist = dec.entropy_distribution().data
        np.testing.assert_allclose(dist.sum(axis=1), 1.0, atol=1e-12)


class TestMdrMoe:
    def _block(self, seed=0, mode="ste_hard", channels=4):
        rng = np.random.default_rng(seed)
        block = MdrMoe(channels, rng, mode=mode)
        code = DomainCodebook(2, rng)
        f1 = Tensor(rng.standard_normal((2, channels, 5, 5)))
        f2 = Tensor(rng.standard_normal((2, channels, 5, 5)))
        return block, code, f1, f2

    def _force(self, block, k):
        block.gate.wg.data[:] = 0.0
        block.gate.wg_b.data[:] = -10.0
        block.gate.wg_b.data[k] = 10.0

    def test_sub_annihilates_equal_inputs(self):
        block, code, f1, _ = self._block()
        self._force(block, 0)
        block.bias_sub.data[:] = 0.0
        out, dec = block.forward(f1, f1, code.embed(0))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
        assert dec.selection_rate[0] == 1.0

    def test_mul_identity_passthrough(self):
        block, code, f1, _ = self._block()
        self._force(block, 2)
        c = block.channels
        block.proj_mul.data[:] = np.eye(c).reshape(c, c, 1, 1)
        block.bias_mul.data[:] = 0.0
        ones = Tensor(np.ones_like(f1.data))
        out, _ = block.forward(f1, ones, code.embed(0))
        np.testing.assert_allclose(out.data, f1.data, atol=1e-12)

    def test_brute_force_equivalence(self):
        # assembled output == independently evaluated argmax primitive,
        # exactly, at every pixel
        for seed in range(5):
            block, code, f1, f2 = self._block(seed=seed)
            out, dec = block.forward(f1, f2, code.embed(0))
            prims = [p.data for p in block.primitives(f1, f2)]
            choice = dec.probs.data.argmax(axis=1)  # [B,H,W]
            stacked = np.stack(prims, axis=1)  # [B,K,C,H,W]
            picked = np.take_along_axis(
                stacked, choice[:, None, None], axis=1)[:, 0]
            np.testing.assert_array_equal(out.data, picked)

    def test_mask_rowsum_and_rates(self):
        block, code, f1, f2 = self._block(seed=3)
        _, dec = block.forward(f1, f2, code.embed(0))
        np.testing.assert_array_equal(dec.hard_mask.data.sum(axis=1),
                                      np.ones((2, 5, 5)))
        assert abs(dec.selection_rate.sum() - 1.0) < 1e-12

    def test_shape_mismatch(self):
        block, code, f1, _ = self._block()
        with pytest.raises(ContractViolation):
            block.forward(f1, Tensor(np.zeros((2, 4, 6, 6))), code.embed(0))

    def test_gate_params_get_zero_grad_without_ste(self):
        block, code, f1, f2 = self._block(seed=4, mode="top1_no_ste")
        with Tape() as tape:
            out, _ = block.forward(f1, f2, code.embed(0))
            loss = T.tmean(T.mul(out, out))
            tape.backward(loss)
        for name, p, _ in block.gate.parameters():
            assert p.grad is None, f"gate param {name} received gradient"
        # primitive projections still train
        assert block.proj_cat.grad is not None or block.proj_sub.grad is not None

    def test_entropy_distribution_normalized_switch(self):
        block, code, f1, f2 = self._block(seed=5)
        _, dec = block.forward(f1, f2, code.embed(0))
        norm = dec.entropy_distribution(normalized=True).data
        raw = dec.entropy_distribution(normalized=False).data
        np.testing.assert_allclose(norm.sum(axis=1), 1.0, atol=1e-12)
        assert not np.allclose(raw.sum(axis=1), 1.0)


class TestStaticFusion:
    def test_modes(self):
        rng = np.random.default_rng(12)
        f1 = Tensor(rng.standard_normal((1, 4, 3, 3)))
        f2 = Tensor(rng.standard_normal((1, 4, 3, 3)))
        for kind in ("concat", "sub", "cat", "mul"):
            block = StaticFusion(4, rng, kind)
            out, dec = block.forward(f1, f2)
            assert out.shape == (1, 4, 3, 3)
            assert dec is None
        with pytest.raises(ContractViolation):
            StaticFusion(4, rng, "nope")

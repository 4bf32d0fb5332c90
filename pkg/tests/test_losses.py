import math

import numpy as np
import pytest
import torch

from textsmith.attention import AttentionMap, LatentMask, TokenLayout
from textsmith.losses import (
    GuidanceWeights,
    StyleTarget,
    content_loss,
    focal_term,
    style_loss,
    style_target,
    total_guidance,
)

import oracles
from conftest import as_map, random_attention_probs


def tmask(values):
    return LatentMask(values=torch.tensor(values, dtype=torch.float64))


class TestFocalTerm:
    def test_frozen_value(self):
        v = focal_term(torch.tensor(0.5, dtype=torch.float64),
                       torch.tensor(1.0, dtype=torch.float64), gamma=2.0)
        assert float(v) == pytest.approx(0.17328679513998632, abs=1e-12)

    def test_gamma_zero_is_bce(self, rng):
        p = torch.from_numpy(rng.uniform(0.01, 0.99, size=500))
        l = torch.from_numpy(rng.integers(0, 2, size=500).astype(np.float64))
        got = focal_term(p, l, gamma=0.0)
        bce = -(l * torch.log(p) + (1 - l) * torch.log(1 - p))
        assert float((got - bce).abs().max()) < 1e-9

    def test_saturated_probabilities_stay_finite(self):
        p = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        l = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        v = focal_term(p, l, gamma=2.0)
        assert bool(torch.isfinite(v).all())

    def test_negative_label_discount_is_one(self, rng):
        # for label 0 the modulating factor is exactly 1 regardless of gamma
        p = torch.from_numpy(rng.uniform(0.01, 0.99, size=100))
        zero = torch.zeros_like(p)
        assert torch.allclose(focal_term(p, zero, 2.0), focal_term(p, zero, 0.0))


class TestContentLoss:
    def layout(self, n_chars, n_tokens=8):
        return TokenLayout(n_tokens=n_tokens, char_indices=tuple(range(3, 3 + n_chars)))

    def test_uniform_map_frozen(self):
        probs = torch.full((4, 5), 0.2, dtype=torch.float64)
        amap = AttentionMap(probs=probs, kind="cross", spatial=(2, 2))
        layout = TokenLayout(n_tokens=5, char_indices=(3,))
        cm = tmask([[1.0, 0.0], [0.0, 0.0]])
        got = float(content_loss([amap], layout, [cm], gamma=2.0))
        expected = oracles.focal_value(0.2, 1, 2.0) + 3 * oracles.focal_value(0.2, 0, 2.0)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(5):
            maps, labels = [], []
            cms = []
            strip = np.zeros((2, 4, 4))
            strip[0, :, 0:2] = 1.0
            strip[1, :, 2:4] = 1.0
            for s in strip:
                cms.append(LatentMask(values=torch.from_numpy(s)))
                labels.append(s.reshape(-1).tolist())
            for _ in range(3):
                maps.append(as_map(random_attention_probs(rng, 16, 8), "cross", (4, 4)))
            layout = self.layout(2)
            got = float(content_loss(maps, layout, cms, gamma=2.0))
            expected = oracles.content_loss_value(
                [m.probs.tolist() for m in maps], [3, 4], labels, 2.0)
            assert got == pytest.approx(expected, rel=1e-9)

    def test_layer_averaging(self, rng):
        cm = tmask([[1.0, 0.0], [0.0, 0.0]])
        layout = TokenLayout(n_tokens=5, char_indices=(3,))
        m1 = as_map(random_attention_probs(rng, 4, 5), "cross", (2, 2))
        m2 = as_map(random_attention_probs(rng, 4, 5), "cross", (2, 2))
        l1 = float(content_loss([m1], layout, [cm]))
        l2 = float(content_loss([m2], layout, [cm]))
        both = float(content_loss([m1, m2], layout, [cm]))
        assert both == pytest.approx((l1 + l2) / 2, rel=1e-12)

    def test_errors(self, rng):
        layout = self.layout(1, n_tokens=5)
        cm = tmask([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            content_loss([], layout, [cm])
        self_map = as_map(random_attention_probs(rng, 4, 4), "self", (2, 2))
        with pytest.raises(ValueError):
            content_loss([self_map], layout, [cm])
        cross = as_map(random_attention_probs(rng, 4, 5), "cross", (2, 2))
        with pytest.raises(ValueError):
            content_loss([cross], layout, [cm, cm])
        small = tmask([[1.0]])
        with pytest.raises(ValueError):
            content_loss([cross], layout, [small])


class TestStyleLoss:
    def test_frozen_kl(self):
        probs = torch.tensor([[0.9, 0.1], [0.5, 0.5]], dtype=torch.float64)
        amap = AttentionMap(probs=probs, kind="self", spatial=(1, 2))
        target = style_target(tmask([[1.0, 1.0]]))
        rows = tmask([[1.0, 0.0]])
        got = float(style_loss([amap], rows, target))
        assert got == pytest.approx(0.51082562376599072, abs=1e-12)

    def test_zero_at_target(self):
        # rows already equal to the reference distribution give zero loss
        gt = tmask([[0.25, 0.75]])
        target = style_target(gt)
        dist = target.distribution
        probs = torch.stack([dist, dist])
        amap = AttentionMap(probs=probs, kind="self", spatial=(1, 2))
        got = float(style_loss([amap], tmask([[1.0, 1.0]]), target))
        assert abs(got) < 1e-9

    def test_non_negative(self, rng):
        for _ in range(25):
            probs = random_attention_probs(rng, 9, 9)
            amap = as_map(probs, "self", (3, 3))
            ref = rng.random((3, 3))
            target = style_target(LatentMask(values=torch.from_numpy(ref)))
            rows = LatentMask(values=torch.from_numpy(
                (rng.random((3, 3)) > 0.4).astype(np.float64)))
            if rows.is_empty():
                continue
            assert float(style_loss([amap], rows, target)) >= -1e-12

    def test_matches_scalar_oracle(self, rng):
        for _ in range(5):
            maps = [as_map(random_attention_probs(rng, 16, 16), "self", (4, 4))
                    for _ in range(2)]
            sel = (rng.random((4, 4)) > 0.5).astype(np.float64)
            sel.flat[0] = 1.0
            ref = rng.random((4, 4))
            target = style_target(LatentMask(values=torch.from_numpy(ref)))
            rows = LatentMask(values=torch.from_numpy(sel))
            got = float(style_loss(maps, rows, target))
            expected = oracles.style_loss_value(
                [m.probs.tolist() for m in maps],
                sel.reshape(-1).tolist(),
                target.distribution.tolist())
            assert got == pytest.approx(expected, rel=1e-9)

    def test_errors(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 4), "self", (2, 2))
        target = style_target(tmask([[1.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            style_loss([], tmask([[1.0, 0.0], [0.0, 0.0]]), target)
        with pytest.raises(ValueError):
            style_loss([amap], tmask([[0.0, 0.0], [0.0, 0.0]]), target)
        cross = as_map(random_attention_probs(rng, 4, 6), "cross", (2, 2))
        with pytest.raises(ValueError):
            style_loss([cross], tmask([[1.0, 0.0], [0.0, 0.0]]), target)

    def test_style_target_validation(self):
        with pytest.raises(ValueError):
            style_target(tmask([[0.0, 0.0]]))
        with pytest.raises(ValueError):
            StyleTarget(distribution=torch.tensor([0.9, 0.2]), spatial=(1, 2))


class TestTotalGuidance:
    def test_weighted_sum(self):
        w = GuidanceWeights(content=5.0, style=10.0)
        total = total_guidance(torch.tensor(2.0), torch.tensor(3.0), w)
        assert float(total) == pytest.approx(5 * 2 + 10 * 3)

    def test_single_terms(self):
        w = GuidanceWeights()
        assert float(total_guidance(torch.tensor(1.0), None, w)) == pytest.approx(5.0)
        assert float(total_guidance(None, torch.tensor(1.0), w)) == pytest.approx(10.0)
        with pytest.raises(ValueError):
            total_guidance(None, None, w)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            GuidanceWeights(content=-1.0)
        with pytest.raises(ValueError):
            GuidanceWeights(focal_gamma=-0.1)


class TestGradients:
    def _build(self, rng, rows=16, tokens=8, spatial=(4, 4)):
        content_probs = torch.from_numpy(
            random_attention_probs(rng, rows, tokens, floor=0.1))
        style_probs = torch.from_numpy(
            random_attention_probs(rng, rows, rows, floor=0.1))
        content_probs.requires_grad_(True)
        style_probs.requires_grad_(True)
        cmap = AttentionMap(probs=content_probs, kind="cross", spatial=spatial)
        smap = AttentionMap(probs=style_probs, kind="self", spatial=spatial)
        strip = np.zeros(spatial)
        strip[:, :2] = 1.0
        cm = LatentMask(values=torch.from_numpy(strip))
        layout = TokenLayout(n_tokens=tokens, char_indices=(3,))
        ref = rng.random(spatial)
        target = style_target(LatentMask(values=torch.from_numpy(ref)))
        rows_mask = LatentMask(values=torch.from_numpy(strip))
        return content_probs, style_probs, cmap, smap, layout, cm, target, rows_mask

    def test_directional_derivative_matches(self, rng):
        cp, sp, cmap, smap, layout, cm, target, rows_mask = self._build(rng)
        w = GuidanceWeights()

        def value(c_probs, s_probs):
            cm_ = AttentionMap(probs=c_probs, kind="cross", spatial=(4, 4), validate=False)
            sm_ = AttentionMap(probs=s_probs, kind="self", spatial=(4, 4), validate=False)
            lc = content_loss([cm_], layout, [cm], gamma=w.focal_gamma)
            ls = style_loss([sm_], rows_mask, target)
            return total_guidance(lc, ls, w)

        loss = value(cp, sp)
        loss.backward()
        h = 1e-6
        for probs, grad in ((cp, cp.grad), (sp, sp.grad)):
            direction = torch.from_numpy(
                np.random.default_rng(7).normal(size=tuple(probs.shape)))
            with torch.no_grad():
                plus = (probs + h * direction).detach()
                minus = (probs - h * direction).detach()
            if probs is cp:
                fd = (value(plus, sp.detach()) - value(minus, sp.detach())) / (2 * h)
            else:
                fd = (value(cp.detach(), plus) - value(cp.detach(), minus)) / (2 * h)
            analytic = (grad * direction).sum()
            assert float(abs(fd - analytic) / (abs(fd) + 1e-12)) < 1e-4

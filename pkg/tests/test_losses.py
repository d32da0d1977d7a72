import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ToyModel, fd_check
from introvac import losses as L
from introvac.distributions import kl_to_standard_normal, reparameterize
from introvac.errors import InvalidInputError

PAPER = L.LossWeights()


class TestReconstruction:
    def test_identical(self):
        x = torch.rand(2, 3, 4, 4)
        assert L.reconstruction_loss(x, x).item() == 0.0

    def test_unit_gap(self):
        assert L.reconstruction_loss(torch.zeros(2, 3, 4, 4), torch.ones(2, 3, 4, 4)).item() == 1.0

    def test_half_pixels_shifted(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64) * 0.5
        mask = torch.zeros(x.numel(), dtype=torch.bool)
        mask[torch.randperm(x.numel(), generator=g)[: x.numel() // 2]] = True
        mask = mask.view_as(x)
        shifted = torch.where(mask, (x + 0.5).clamp(0, 1), x)
        assert L.reconstruction_loss(x, shifted).item() == pytest.approx(0.25, abs=1e-12)
        assert L.reconstruction_loss(x, shifted, "mse").item() == pytest.approx(0.125, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            L.reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            L.reconstruction_loss(torch.zeros(1), torch.zeros(1), "huber")


class TestClassification:
    def test_confident_correct(self):
        assert L.classification_loss(torch.tensor([1.0]), torch.tensor([30.0])).item() < 1e-12

    def test_uninformative(self):
        assert L.classification_loss(torch.tensor([1.0]), torch.tensor([0.0])).item() == pytest.approx(math.log(2))

    def test_additive_over_attributes(self):
        loss = L.classification_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0]))
        assert loss.item() == pytest.approx(2 * math.log(2))

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_matches_factorized_likelihood(self, k):
        rng = np.random.default_rng(k)
        logits = rng.normal(0, 3, k)
        p = 1 / (1 + np.exp(-logits))
        for pattern in itertools.product([0, 1], repeat=k):
            lik = np.prod([p[i] if y == 1 else 1 - p[i] for i, y in enumerate(pattern)])
            loss = L.classification_loss(torch.tensor(pattern, dtype=torch.float64), torch.tensor(logits))
            assert loss.item() == pytest.approx(-math.log(lik), rel=1e-10)

    def test_batch_mean(self):
        y = torch.tensor([[1.0], [0.0]])
        logits = torch.tensor([[0.0], [0.0]])
        assert L.classification_loss(y, logits).item() == pytest.approx(math.log(2))

    def test_rejects_soft_labels(self):
        with pytest.raises(InvalidInputError):
            L.classification_loss(torch.tensor([0.5]), torch.tensor([0.0]))

    def test_extreme_logits_stay_finite(self):
        loss = L.classification_loss(torch.tensor([1.0, 0.0]), torch.tensor([-1e4, 1e4]))
        assert math.isfinite(loss.item()) and loss.item() == pytest.approx(2e4)


class TestSoftplusForms:
    @given(st.floats(-50, 50))
    def test_match_naive(self, v):
        t = torch.tensor(v, dtype=torch.float64)
        s = 1 / (1 + math.exp(-v))
        one_minus_s = 1 / (1 + math.exp(v))
        assert L.neg_log_sigmoid(t).item() == pytest.approx(-math.log(s), rel=1e-9, abs=1e-12)
        assert L.neg_log_one_minus_sigmoid(t).item() == pytest.approx(-math.log(one_minus_s), rel=1e-9, abs=1e-12)
        assert L.neg_log_sigmoid(t).item() >= 0


def toy_with_fake_logit(fake_bias, attr_bias=0.0):
    return ToyModel(w=(0.0, 0.0), b=(attr_bias, fake_bias))


class TestAdversarial:
    def test_crossover_point_reconstruction(self):
        model = toy_with_fake_logit(0.0)
        x_rr = torch.rand(5, 1, 1, 2, dtype=torch.float64)
        l_ec, _ = L.adversarial_losses_reconstruction(x_rr, torch.ones(5, 1), model)
        assert l_ec.item() == pytest.approx(math.log(2))

    def test_crossover_point_generated(self):
        model = toy_with_fake_logit(0.0)
        x_g = torch.rand(5, 1, 1, 2, dtype=torch.float64)
        l_ec, l_g = L.adversarial_losses_generated(x_g, model)
        assert l_ec.item() == pytest.approx(math.log(2))
        assert l_g.item() == pytest.approx(math.log(2))

    def test_decoder_fully_fools(self):
        # attribute logit +30 for label 1, fake probability e^-30
        model = toy_with_fake_logit(-30.0, attr_bias=30.0)
        x_rr = torch.rand(3, 1, 1, 2, dtype=torch.float64)
        _, l_g = L.adversarial_losses_reconstruction(x_rr, torch.ones(3, 1), model)
        assert l_g.item() < 1e-12

    def test_no_class_term_for_generated(self):
        model = toy_with_fake_logit(-30.0, attr_bias=-30.0)
        _, l_g = L.adversarial_losses_generated(torch.rand(3, 1, 1, 2, dtype=torch.float64), model)
        assert l_g.item() < 1e-12

    def _grads(self, loss, params):
        grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
        return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    @pytest.mark.parametrize("kind", ["reconstruction", "generated"])
    def test_stop_gradient_contracts_autograd(self, tiny_model, kind):
        model = tiny_model.train()
        z = torch.randn(4, 3, dtype=torch.float64)
        x = model.decode(z)
        y = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        if kind == "reconstruction":
            l_ec, l_g = L.adversarial_losses_reconstruction(x, y, model)
        else:
            l_ec, l_g = L.adversarial_losses_generated(x, model)
        dec, ec = model.decoder_parameters(), model.encoder_classifier_parameters()
        assert all(torch.count_nonzero(g) == 0 for g in self._grads(l_ec, dec))
        assert any(torch.count_nonzero(g) > 0 for g in self._grads(l_ec, ec))
        assert all(torch.count_nonzero(g) == 0 for g in self._grads(l_g, ec))
        assert any(torch.count_nonzero(g) > 0 for g in self._grads(l_g, dec))

    def test_parameters_unfrozen_afterwards(self, tiny_model):
        x = tiny_model.decode(torch.randn(2, 3, dtype=torch.float64))
        L.adversarial_losses_generated(x, tiny_model)
        assert all(p.requires_grad for p in tiny_model.parameters())

    def test_stop_gradient_finite_difference_probe(self):
        """Two-pixel toy: l_ec sees x_rr as a constant; l_g's decoder gradient matches FD."""
        model = ToyModel()
        z_r = torch.tensor([[0.8], [-0.5], [1.4]], dtype=torch.float64)
        y = torch.tensor([[1.0], [0.0], [1.0]], dtype=torch.float64)
        x_rr_const = model.decode(z_r).detach()

        def l_ec_surrogate():
            return L.encoder_classifier_fake_loss(x_rr_const, model)

        def l_ec_live():
            return L.encoder_classifier_fake_loss(model.decode(z_r), model)

        # autograd through the detach is exactly zero, and so is FD of the surrogate
        pairs = fd_check(l_ec_surrogate, model.theta, [0, 1])
        assert all(g == 0.0 and abs(fd) < 1e-9 for g, fd in pairs)
        (g_live,) = torch.autograd.grad(l_ec_live(), model.theta, allow_unused=True)
        assert g_live is None or torch.count_nonzero(g_live) == 0
        # encoder/classifier gradients of l_ec are real and match FD
        fd_check(l_ec_surrogate, model.a, [0, 1])
        fd_check(l_ec_surrogate, model.head.weight, [0, 1])

        def l_g():
            return L.decoder_reconstruction_loss(model.decode(z_r), y, model)

        fd_check(l_g, model.theta, [0, 1])
        (g_a,) = torch.autograd.grad(l_g(), model.a, allow_unused=True)
        assert g_a is None


class TestTotals:
    def test_paper_weight_arithmetic(self):
        assert L.phase1_total(1, 1, 1, 1, 1, PAPER) == pytest.approx(113.02)
        assert L.phase2_total(1, 1, PAPER) == pytest.approx(10.0)

    def test_zero_weights(self):
        zero = L.LossWeights(0, 0, 0, 0, 0)
        assert L.phase1_total(3, 4, 5, 6, 7, zero) == 0
        assert L.phase2_total(3, 4, zero) == 0

    @given(
        parts=st.lists(st.floats(0, 100), min_size=7, max_size=7),
        betas=st.lists(st.floats(0, 100), min_size=5, max_size=5),
        field=st.sampled_from(["beta_ae", "beta_cl", "beta_reg", "beta_g", "beta_ec"]),
        scale=st.floats(0, 10),
    )
    @settings(max_examples=100)
    def test_linear_in_each_beta(self, parts, betas, field, scale):
        w = L.LossWeights(*betas)
        w2 = L.LossWeights(**{**w.to_dict(), field: getattr(w, field) * scale})
        w0 = L.LossWeights(**{**w.to_dict(), field: 0.0})
        for total in (lambda ww: L.phase1_total(*parts[:5], ww), lambda ww: L.phase2_total(*parts[5:], ww)):
            base = total(w0)
            assert total(w2) - base == pytest.approx(scale * (total(w) - base), rel=1e-9, abs=1e-6)

    def test_weights_validation(self):
        with pytest.raises(InvalidInputError):
            L.LossWeights(beta_ae=-1)
        with pytest.raises(InvalidInputError):
            L.LossWeights(beta_g=float("nan"))

    def test_report_omits_adversarial_fields(self):
        r = L.LossReport(*range(9))
        assert set(r.to_dict(adversarial=False)) == {"l_ae", "l_cl", "l_reg", "total_phase1"}


class TestFiniteDifferences:
    """Every loss term against central differences on the tiny model (float64)."""

    @pytest.fixture
    def batch(self, tiny_model):
        g = torch.Generator().manual_seed(3)
        x = torch.rand(4, 1, 8, 8, generator=g, dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        noise = torch.randn(4, 3, generator=g, dtype=torch.float64)
        return x, y, noise

    def test_vac_terms(self, tiny_model, batch):
        model = tiny_model.train()
        x, y, noise = batch

        def terms():
            q = model.encode(x)
            z = reparameterize(q, noise)
            return q, z

        def l_ae():
            _, z = terms()
            return L.reconstruction_loss(x, model.decode(z))

        def l_cl():
            _, z = terms()
            return L.classification_loss(y, model.classify(z)[:, :2])

        def l_reg():
            q, _ = terms()
            return kl_to_standard_normal(q)

        fd_check(l_ae, model.decoder.fc.weight, [0, 5, 11])
        fd_check(l_ae, model.encoder.fc.weight, [0, 7])
        fd_check(l_cl, model.head.weight, [0, 1, 4])
        fd_check(l_cl, model.encoder.fc.bias, [0, 2])
        fd_check(l_reg, model.encoder.fc.weight, [1, 9, 20])

    def test_adversarial_terms(self, tiny_model, batch):
        model = tiny_model.train()
        x, y, _ = batch
        z = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(9))

        def l_ec():
            return L.encoder_classifier_fake_loss(model.decode(z), model)

        def l_g_rec():
            return L.decoder_reconstruction_loss(model.decode(z), y, model)

        def l_g_gen():
            return L.decoder_generated_loss(model.decode(z), model)

        fd_check(l_ec, model.encoder.fc.weight, [0, 3])
        fd_check(l_ec, model.head.weight, [6, 7, 8])
        fd_check(l_g_rec, model.decoder.fc.weight, [0, 4, 10])
        fd_check(l_g_gen, model.decoder.out.weight, [0, 3])


def test_vac_objective_components():
    model = ToyModel()
    x = torch.tensor([[[[0.2, 0.7]]], [[[0.9, 0.1]]]], dtype=torch.float64)
    y = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    q = model.encode(x)
    z = q.mean
    total, l_ae, l_cl, l_reg = L.vac_objective(x, y, model.decode(z), q, model.classify(z)[:, :1], PAPER)
    assert total.item() == pytest.approx(100 * l_ae.item() + 10 * l_cl.item() + 3 * l_reg.item())

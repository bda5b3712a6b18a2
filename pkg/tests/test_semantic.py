import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from ltad.semantic import (
    LearnedFreeClassifier,
    ProjectionHeads,
    TextDerivedClassifier,
    classifier_source,
    pool_layers,
    project_patch,
    sem_logit,
    sem_loss,
    sem_loss_from_logits,
    sem_score,
)
from ltad.text import ToyTextEncoder, init_prompt_bank


def _logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestPooling:
    def test_max_and_mean(self):
        v = torch.tensor([[1.0, -2.0], [0.5, 3.0]])
        assert pool_layers(v, "max").tolist() == [1.0, 3.0]
        assert pool_layers(v, "mean").tolist() == [0.75, 0.5]

    def test_single_layer_is_plain_projection(self):
        heads = ProjectionHeads([5], 3, "max")
        p = torch.randn(7, 5)
        torch.testing.assert_close(project_patch(p, heads), heads.phi[0](p))

    def test_layer_slices_routed(self):
        heads = ProjectionHeads([2, 3], 4, "mean")
        p = torch.randn(2, 5)
        expected = (heads.phi[0](p[:, :2]) + heads.phi[1](p[:, 2:])) / 2
        torch.testing.assert_close(heads(p), expected)

    def test_direct(self):
        heads = ProjectionHeads([2, 3], 4, "direct")
        p = torch.randn(2, 5)
        torch.testing.assert_close(heads(p), heads.direct_map(p))

    def test_no_bias(self):
        heads = ProjectionHeads([2, 3], 4)
        assert all(lin.bias is None for lin in heads.phi)

    def test_input_scale_is_a_reparameterisation(self):
        heads = ProjectionHeads([2, 3], 4, "max")
        p = torch.randn(6, 5, dtype=torch.float64)
        heads = heads.double()
        ref = heads(p)
        scale = torch.tensor([2.0, 0.5, 4.0, 1.0, 3.0], dtype=torch.float64)
        heads.set_input_scale(scale)
        with torch.no_grad():
            heads.phi[0].weight.mul_(scale[:2])
            heads.phi[1].weight.mul_(scale[2:])
        torch.testing.assert_close(heads(p), ref)

    @pytest.mark.parametrize("kw", [{"pooling": "sum"}, {"tau": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ProjectionHeads([2], 2, **kw)

    def test_layout_mismatch(self):
        with pytest.raises(ValueError):
            ProjectionHeads([2, 3], 4)(torch.randn(4))


class TestSemScore:
    def test_symmetric_logits(self):
        t = torch.tensor([0.6, 0.8])
        assert sem_score(torch.tensor([1.0, 2.0]), t, t).item() == 0.5

    def test_log3_examples(self):
        t_n = torch.zeros(1, dtype=torch.float64)
        t_a = torch.ones(1, dtype=torch.float64)
        p = torch.tensor([math.log(3)], dtype=torch.float64)
        assert sem_score(p, t_n, t_a, 1.0).item() == pytest.approx(0.75, abs=1e-12)
        assert sem_score(p, t_n, t_a, 0.5).item() == pytest.approx(0.9, abs=1e-12)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(-3, 3), min_size=3, max_size=3),
        st.lists(st.floats(-1, 1), min_size=3, max_size=3),
        st.lists(st.floats(-1, 1), min_size=3, max_size=3),
        st.floats(0.05, 5),
    )
    def test_matches_logistic(self, p, tn, ta, tau):
        gap = sum((a - n) * x for a, n, x in zip(ta, tn, p)) / tau
        got = sem_score(*(torch.tensor(v, dtype=torch.float64) for v in (p, tn, ta)), tau).item()
        assert abs(got - _logistic(gap)) <= 1e-9

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            sem_logit(torch.ones(2), torch.ones(2), torch.ones(2), 0.0)


class TestSemLoss:
    def test_examples(self):
        y = torch.tensor([1.0, 0.0])
        assert sem_loss(torch.tensor([0.5, 0.5], dtype=torch.float64), y).item() == pytest.approx(math.log(2), abs=1e-12)
        assert sem_loss(torch.tensor([0.75, 0.25], dtype=torch.float64), y).item() == pytest.approx(-math.log(0.75), abs=1e-12)
        eps = 1e-9
        assert sem_loss(torch.tensor([1 - eps, eps], dtype=torch.float64), y).item() < 1e-6

    def test_literal_drops_normal_term(self):
        y = torch.tensor([1.0, 0.0])
        s = torch.tensor([0.75, 0.9], dtype=torch.float64)
        assert sem_loss(s, y, literal=True).item() == pytest.approx(-math.log(0.75) / 2, abs=1e-12)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            sem_loss(torch.tensor([0.5]), torch.tensor([0.3]))
        with pytest.raises(ValueError):
            sem_loss_from_logits(torch.tensor([0.5]), torch.tensor([2.0]))

    @given(st.lists(st.tuples(st.floats(-12, 12), st.booleans()), min_size=1, max_size=10), st.booleans())
    def test_logit_form_agrees(self, items, literal):
        z = torch.tensor([i[0] for i in items], dtype=torch.float64)
        y = torch.tensor([float(i[1]) for i in items], dtype=torch.float64)
        a = sem_loss(torch.sigmoid(z), y, literal=literal).item()
        b = sem_loss_from_logits(z, y, literal=literal).item()
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    def test_gradient_survives_confident_mistakes(self):
        z = torch.tensor([-40.0], dtype=torch.float64, requires_grad=True)
        sem_loss_from_logits(z, torch.ones(1)).backward()
        assert z.grad.item() < -0.5

    def test_gradient_finite_differences(self):
        # 3 tokens, two layers of 2 channels, d = 4
        torch.manual_seed(1)
        heads = ProjectionHeads([2, 2], 4, "max").double()
        tokens = torch.randn(3, 4, dtype=torch.float64)
        t_n = torch.randn(4, dtype=torch.float64)
        t_a = torch.randn(4, dtype=torch.float64)
        y = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)

        def loss():
            return sem_loss(sem_score(heads(tokens), t_n, t_a), y)

        params = list(heads.parameters())
        grads = torch.autograd.grad(loss(), params)
        h = 1e-6
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                lp = loss().item()
                flat[i] = old - h
                lm = loss().item()
                flat[i] = old
                fd, an = (lp - lm) / (2 * h), g.view(-1)[i].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-7)


class TestClassifierSource:
    def test_learned_free_shapes(self):
        clf = classifier_source("learned_free", num_classes=15, d=64)
        t_n, t_a = clf()
        assert t_n.shape == (15, 64) and t_a.shape == (15, 64)
        assert sum(p.numel() for p in clf.parameters() if p.requires_grad) == 15 * 2 * 64

    def test_text_derived_constant_when_bank_frozen(self):
        T = ToyTextEncoder()
        bank = init_prompt_bank(["a", "b"], T)
        bank.requires_grad_(False)
        clf = classifier_source("text_derived", bank=bank, text_encoder=T)
        a, b = clf(), clf()
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert isinstance(clf, TextDerivedClassifier)

    def test_errors(self):
        with pytest.raises(ValueError):
            classifier_source("text_derived")
        with pytest.raises(ValueError):
            classifier_source("oracle")

    def test_seeded(self):
        a, b = LearnedFreeClassifier(3, 4, seed=2), LearnedFreeClassifier(3, 4, seed=2)
        assert torch.equal(a.t_n, b.t_n)

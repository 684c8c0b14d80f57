import numpy as np
import pytest

from _gradcheck import check_gradients
from budgetseg import autodiff as ad
from budgetseg.autodiff import Tensor
from budgetseg.losses import LossBreakdown, rsis_loss, semantic_loss, wrsis_loss
from budgetseg.models import ConditionedInstanceNet, DecodeBatch, ModelConfig, RecurrentInstanceNet

TINY = ModelConfig(num_classes=2, encoder_channels=3, mask_channels=3, hidden_size=4, token_dim=3)


def _tiny_scene(rng, h=7, w=7, n_instances=2):
    image = rng.random((h, w, 3))
    gts = []
    for k in range(n_instances):
        mask = np.zeros((h, w))
        r, c = int(rng.integers(0, h - 2)), int(rng.integers(0, w - 2))
        mask[r : r + 2, c : c + 2] = 1.0
        gts.append((int(rng.integers(1, 3)), mask))
    return image, gts


class TestSemanticLoss:
    def test_confident_correct_logits_near_zero(self):
        labels = np.array([[0, 1], [2, 0]])
        logits = Tensor(np.eye(3)[labels] * 50.0)
        assert float(semantic_loss(logits, labels).value) < 1e-9

    def test_uniform_logits_log_c(self):
        labels = np.zeros((4, 4), dtype=int)
        logits = Tensor(np.zeros((4, 4, 5)))
        assert float(semantic_loss(logits, labels).value) == pytest.approx(np.log(5.0))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            semantic_loss(Tensor(np.zeros((2, 2, 3))), np.array([[0, 3], [0, 0]]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((4, 4, 3)), requires_grad=True)
        labels = rng.integers(0, 3, (4, 4))
        check_gradients(lambda: semantic_loss(logits, labels), {"logits": logits})


def _manual_batch(mask_logit_rows, token_classes=None, n_classes=2):
    """One-image DecodeBatch with hand-set mask logits on a flat 4-pixel grid."""
    t = len(mask_logit_rows)
    mask_logits = [Tensor(np.array([row], dtype=float), requires_grad=True) for row in mask_logit_rows]
    class_logits = [Tensor(np.zeros((1, n_classes))) for _ in range(t)]
    stop_logits = [Tensor(np.zeros(1)) for _ in range(t)]
    tokens = None if token_classes is None else np.array([token_classes])
    return DecodeBatch(
        mask_logits=mask_logits,
        class_logits=None if token_classes is not None else class_logits,
        stop_logits=None if token_classes is not None else stop_logits,
        token_classes=tokens,
        step_mask=np.ones((1, t)),
        height=2,
        width=2,
    )


class TestRsisLoss:
    def test_perfect_prediction_near_zero(self):
        rng = np.random.default_rng(1)
        net = RecurrentInstanceNet(TINY, rng)
        image, gts = _tiny_scene(rng)
        batch = net.decode_batch(image[None], max_steps=3)
        # overwrite decoder outputs with ideal ones
        big = 60.0
        for t in range(3):
            if t < len(gts):
                batch.mask_logits[t] = Tensor((gts[t][1].reshape(1, -1) * 2 - 1) * big)
                batch.class_logits[t] = Tensor(np.eye(2)[[gts[t][0] - 1]] * big)
                batch.stop_logits[t] = Tensor(np.full(1, big))
            else:
                batch.stop_logits[t] = Tensor(np.full(1, -big))
        out = rsis_loss(batch, [gts])
        assert out.value < 1e-6

    def test_assignment_prefers_matching_step(self):
        # step 0 reproduces the target, step 1 is anti-correlated
        gt = np.array([[1.0, 1.0], [0.0, 0.0]])
        batch = _manual_batch([[9.0, 9.0, -9.0, -9.0], [-9.0, -9.0, 9.0, 9.0]])
        out = rsis_loss(batch, [[(1, gt)]])
        assert out.assignments[0].pairs == ((0, 0),)
        assert out.mask_term < 1e-3

    def test_requires_enough_steps(self):
        gt = np.ones((2, 2))
        batch = _manual_batch([[0.0, 0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            rsis_loss(batch, [[(1, gt), (1, gt)]])

    def test_invariant_to_gt_permutation(self):
        rng = np.random.default_rng(2)
        net = RecurrentInstanceNet(TINY, rng)
        image, gts = _tiny_scene(rng, n_instances=3)
        batch = net.decode_batch(image[None], max_steps=4)
        a = rsis_loss(batch, [gts])
        b = rsis_loss(net.decode_batch(image[None], max_steps=4), [gts[::-1]])
        assert a.value == pytest.approx(b.value, rel=1e-12)

    def test_terms_nonnegative_and_sum(self):
        rng = np.random.default_rng(3)
        net = RecurrentInstanceNet(TINY, rng)
        image, gts = _tiny_scene(rng)
        out = rsis_loss(net.decode_batch(image[None], 3), [gts], lambda_cls=0.7, lambda_stop=1.3)
        assert out.mask_term >= 0 and out.class_term >= 0 and out.stop_term >= 0
        assert out.value == pytest.approx(
            out.mask_term + 0.7 * out.class_term + 1.3 * out.stop_term, rel=1e-12
        )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        net = RecurrentInstanceNet(TINY, rng)
        image, gts = _tiny_scene(rng)

        def loss():
            return rsis_loss(net.decode_batch(image[None], 3), [gts]).total

        check_gradients(loss, net.params)


class TestWrsisLoss:
    def test_single_instance_direct_loss(self):
        gt = np.array([[1.0, 0.0], [0.0, 0.0]])
        batch = _manual_batch([[2.0, -2.0, -2.0, -2.0]], token_classes=[1])
        out = wrsis_loss(batch, [[(1, gt)]])
        p = 1 / (1 + np.exp(-np.array([2.0, -2.0, -2.0, -2.0])))
        expected = 1 - p[0] / (p.sum() + 1 - p[0])
        assert out.value == pytest.approx(expected)

    def test_cross_class_pairing_forced_by_classes(self):
        g1 = np.array([[1.0, 1.0], [0.0, 0.0]])
        g2 = np.array([[0.0, 0.0], [1.0, 1.0]])
        # step 0 overlaps class-2 target, step 1 overlaps class-1 target,
        # but tokens are [1, 2]: the masked matching must pair 0->1 and 1->2
        batch = _manual_batch([[-9.0, -9.0, 9.0, 9.0], [9.0, 9.0, -9.0, -9.0]], token_classes=[1, 2])
        out = wrsis_loss(batch, [[(1, g1), (2, g2)]])
        assert out.assignments[0].pairs == ((0, 0), (1, 1))
        assert out.mask_term > 0.9

    def test_unmasked_ablation_lowers_mask_term_but_misaligns(self):
        g1 = np.array([[1.0, 1.0], [0.0, 0.0]])
        g2 = np.array([[0.0, 0.0], [1.0, 1.0]])
        batch_masked = _manual_batch([[-9.0, -9.0, 9.0, 9.0], [9.0, 9.0, -9.0, -9.0]], token_classes=[1, 2])
        batch_unmasked = _manual_batch([[-9.0, -9.0, 9.0, 9.0], [9.0, 9.0, -9.0, -9.0]], token_classes=[1, 2])
        gts = [[(1, g1), (2, g2)]]
        masked = wrsis_loss(batch_masked, gts)
        unmasked = wrsis_loss(batch_unmasked, gts, masked=False)
        assert unmasked.mask_term < masked.mask_term
        assert unmasked.assignments[0].pairs == ((0, 1), (1, 0))  # class-misaligned

    def test_multiset_mismatch_raises(self):
        gt = np.ones((2, 2))
        batch = _manual_batch([[0.0] * 4], token_classes=[2])
        with pytest.raises(ValueError, match="multiset"):
            wrsis_loss(batch, [[(1, gt)]])

    def test_invariant_to_gt_and_same_class_token_permutation(self):
        rng = np.random.default_rng(5)
        net = ConditionedInstanceNet(TINY, rng)
        image, _ = _tiny_scene(rng)
        gts = [(1, np.eye(7)), (1, np.flipud(np.eye(7))), (2, np.ones((7, 7)))]
        tokens = np.array([[1, 1, 2]])
        ones = np.ones((1, 3))
        a = wrsis_loss(net.decode_batch(image[None], tokens, ones), [gts])
        b = wrsis_loss(net.decode_batch(image[None], tokens, ones), [gts[::-1]])
        assert a.value == pytest.approx(b.value, rel=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        net = ConditionedInstanceNet(TINY, rng)
        image, gts = _tiny_scene(rng)
        tokens = np.array([sorted(g[0] for g in gts)])

        def loss():
            batch = net.decode_batch(image[None], tokens, np.ones_like(tokens, dtype=float))
            return wrsis_loss(batch, [gts]).total

        check_gradients(loss, net.params)

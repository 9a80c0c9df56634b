import math

import numpy as np
import pytest
import torch

from crowdcount.annotations import HeadAnnotation, Weather
from crowdcount.densitygen import pyramid_targets
from crowdcount.losses import (
    LossConfig,
    RESNET_LEVEL_WEIGHTS,
    confidence_loss,
    density_loss,
    inverse_frequency_weights,
    total_loss,
    weather_loss,
)
from crowdcount.network import BackboneConfig, PredictionPyramid, build_model


def make_pyramid(y6, y5, y4, y3, cm=None, weather_logits=None):
    def ones_like(t):
        return torch.ones_like(t)

    cm5 = cm[5] if cm else ones_like(y5)
    cm4 = cm[4] if cm else ones_like(y4)
    cm3 = cm[3] if cm else ones_like(y3)
    return PredictionPyramid(
        y6=y6, y5=y5, y4=y4, y3=y3,
        r5=torch.zeros_like(y5), r4=torch.zeros_like(y4), r3=torch.zeros_like(y3),
        cm5=cm5, cm4=cm4, cm3=cm3, weather_logits=weather_logits,
    )


def grids(batch=1, base=2, fill=0.0):
    return {
        6: torch.full((batch, 1, base, base), fill),
        5: torch.full((batch, 1, 2 * base, 2 * base), fill),
        4: torch.full((batch, 1, 4 * base, 4 * base), fill),
        3: torch.full((batch, 1, 8 * base, 8 * base), fill),
    }


def test_density_loss_zero_on_identity():
    t = grids(fill=0.7)
    pyramid = make_pyramid(t[6], t[5], t[4], t[3])
    assert density_loss(pyramid, t).item() == 0.0


def test_density_loss_hand_value():
    # Single level with 4 pixels of constant error 3: ||.||_2 = sqrt(4*9) = 6.
    targets = grids(fill=0.0)
    preds = {lv: torch.zeros_like(t) for lv, t in targets.items()}
    preds[6] = torch.full((1, 1, 2, 2), 3.0)
    pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3])
    assert density_loss(pyramid, targets).item() == pytest.approx(6.0, abs=1e-6)


def test_density_loss_annihilated_by_zero_confidence():
    targets = grids(fill=1.0)
    preds = grids(fill=5.0)
    cm = {lv: torch.zeros_like(targets[lv]) for lv in (3, 4, 5)}
    pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3], cm=cm)
    # Levels 3-5 are gated to zero; level 6 has the implicit all-ones gate.
    expected = math.sqrt(4 * 16.0)
    assert density_loss(pyramid, targets).item() == pytest.approx(expected, abs=1e-6)


def test_density_loss_level_weights():
    targets = grids(fill=0.0)
    preds = {lv: torch.zeros_like(t) for lv, t in targets.items()}
    preds[3] = torch.full((1, 1, 16, 16), 1.0)
    pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3])
    unweighted = density_loss(pyramid, targets).item()
    weighted = density_loss(pyramid, targets, RESNET_LEVEL_WEIGHTS).item()
    assert weighted == pytest.approx(0.1 * unweighted, rel=1e-6)


def test_density_loss_shape_mismatch():
    targets = grids()
    preds = grids()
    preds[4] = torch.zeros(1, 1, 3, 3)
    pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3])
    with pytest.raises(ValueError, match="level 4"):
        density_loss(pyramid, targets)


def test_confidence_loss_hand_value():
    t = {lv: g.double() for lv, g in grids().items()}
    cm = {lv: torch.ones_like(t[lv]) for lv in (3, 4, 5)}
    cm[5] = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    # Put the 2x2 half-confidence map at level 5 alone; others log 1 = 0.
    pyramid = make_pyramid(t[6], torch.zeros(1, 1, 2, 2, dtype=torch.float64),
                           t[4], t[3], cm={5: cm[5], 4: cm[4], 3: cm[3]})
    assert confidence_loss(pyramid).item() == pytest.approx(4 * math.log(0.5), abs=1e-9)


def test_confidence_loss_additive_and_nonpositive(rng):
    t = grids()
    cm = {lv: torch.rand_like(t[lv]) * 0.98 + 0.01 for lv in (3, 4, 5)}
    pyramid = make_pyramid(t[6], t[5], t[4], t[3], cm=cm)
    expected = sum(float(c.log().sum()) for c in cm.values())
    value = confidence_loss(pyramid).item()
    assert value == pytest.approx(expected, rel=1e-5)
    assert value <= 0.0


def test_confidence_loss_approaches_zero():
    t = grids()
    cm = {lv: torch.full_like(t[lv], 1.0 - 1e-9) for lv in (3, 4, 5)}
    pyramid = make_pyramid(t[6], t[5], t[4], t[3], cm=cm)
    assert -1e-5 < confidence_loss(pyramid).item() <= 0.0


def test_confidence_loss_rejects_nonpositive():
    t = grids()
    cm = {lv: torch.ones_like(t[lv]) for lv in (3, 4, 5)}
    cm[3][0, 0, 0, 0] = 0.0
    pyramid = make_pyramid(t[6], t[5], t[4], t[3], cm=cm)
    with pytest.raises(ValueError, match="positive"):
        confidence_loss(pyramid)


def test_weather_loss_uniform_logits():
    logits = torch.zeros(1, 4)
    label = torch.tensor([2])
    assert weather_loss(logits, label).item() == pytest.approx(math.log(4), abs=1e-6)


def test_weather_loss_confident_correct():
    logits = torch.tensor([[0.0, 50.0, 0.0, 0.0]])
    assert weather_loss(logits, torch.tensor([1])).item() == pytest.approx(0.0, abs=1e-6)


def test_weather_loss_weight_linearity():
    logits = torch.tensor([[1.0, 0.2, -0.3, 0.5]])
    label = torch.tensor([3])
    base = weather_loss(logits, label, torch.tensor([1.0, 1.0, 1.0, 1.0])).item()
    doubled = weather_loss(logits, label, torch.tensor([1.0, 1.0, 1.0, 2.0])).item()
    assert doubled == pytest.approx(2 * base, rel=1e-6)


def test_weather_loss_invalid_label():
    with pytest.raises(ValueError, match="out of range"):
        weather_loss(torch.zeros(1, 4), torch.tensor([7]))


def test_inverse_frequency_weights():
    weathers = [Weather.NORMAL] * 6 + [Weather.RAIN] * 2
    w = inverse_frequency_weights(weathers)
    assert w[Weather.NORMAL.value].item() == pytest.approx(8 / (4 * 6))
    assert w[Weather.RAIN.value].item() == pytest.approx(8 / (4 * 2))
    assert w[Weather.SNOW.value].item() == 0.0


def test_total_loss_reduces_to_density_when_unregularized():
    t = grids(fill=0.2)
    preds = grids(fill=0.6)
    cm = {lv: torch.full_like(t[lv], 0.5) for lv in (3, 4, 5)}
    pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3], cm=cm)
    cfg = LossConfig(lambda_c=0.0, lambda_w=0.0)
    total, parts = total_loss(pyramid, t, None, cfg)
    assert total.item() == pytest.approx(parts["L_d"], rel=1e-9)
    assert total.item() == pytest.approx(density_loss(pyramid, t).item(), rel=1e-9)


def test_total_loss_vanishes_on_perfect_confident_prediction():
    t = grids(fill=0.3)
    cm = {lv: torch.full_like(t[lv], 1.0 - 1e-12) for lv in (3, 4, 5)}
    pyramid = make_pyramid(t[6], t[5], t[4], t[3], cm=cm)
    total, _ = total_loss(pyramid, t, None, LossConfig())
    assert total.item() == pytest.approx(0.0, abs=1e-6)


def test_total_loss_matches_scalar_recomputation(rng):
    torch.manual_seed(3)
    t = {lv: torch.rand_like(g) for lv, g in grids(batch=2).items()}
    preds = {lv: torch.rand_like(g) for lv, g in grids(batch=2).items()}
    cm = {lv: torch.rand_like(t[lv]) * 0.9 + 0.05 for lv in (3, 4, 5)}
    pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3], cm=cm)
    cfg = LossConfig(lambda_c=0.7, lambda_w=0.0)
    total, parts = total_loss(pyramid, t, None, cfg)
    # independent scalar recomputation from the dumped grids
    l_d = 0.0
    for lv in (3, 4, 5, 6):
        gate = cm.get(lv)
        g = gate.numpy() if gate is not None else np.ones_like(t[lv].numpy())
        diff = g * t[lv].numpy() - g * preds[lv].numpy()
        l_d += np.mean([np.sqrt((diff[b] ** 2).sum()) for b in range(diff.shape[0])])
    l_c = sum(np.log(c.numpy()).reshape(2, -1).sum(axis=1).mean() for c in cm.values())
    assert parts["L_d"] == pytest.approx(l_d, rel=1e-5)
    assert parts["L_c"] == pytest.approx(float(l_c), rel=1e-5)
    assert total.item() == pytest.approx(l_d - 0.7 * l_c, rel=1e-5)


def test_total_loss_label_contract():
    t = grids()
    pyramid = make_pyramid(t[6], t[5], t[4], t[3])
    with pytest.raises(ValueError, match="unconditioned"):
        total_loss(pyramid, t, torch.tensor([0]), LossConfig())
    conditioned = make_pyramid(t[6], t[5], t[4], t[3],
                               weather_logits=torch.zeros(1, 4))
    with pytest.raises(ValueError, match="requires weather labels"):
        total_loss(conditioned, t, None, LossConfig())


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        LossConfig(lambda_c=-1.0)
    with pytest.raises(ValueError):
        LossConfig(reduction="bogus")


def _model_loss_fn(model, images, targets, labels, cfg):
    def fn():
        pyramid = model(images)
        return total_loss(pyramid, targets, labels, cfg)[0]

    return fn


def _gradient_check(model, images, targets, labels, cfg, n_samples=200,
                    step=1e-5, rtol=1e-3, seed=0):
    """Central finite differences vs autograd over randomly sampled params."""
    loss_fn = _model_loss_fn(model, images, targets, labels, cfg)
    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    checked = 0
    for _ in range(n_samples):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + step
            plus = float(loss_fn())
            p[idx] = orig - step
            minus = float(loss_fn())
            p[idx] = orig
        numeric = (plus - minus) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom <= rtol, (
            f"grad mismatch at {idx}: analytic {analytic} vs numeric {numeric}"
        )
        checked += 1
    assert checked == n_samples


@pytest.mark.parametrize("conditioned", [False, True])
def test_gradients_match_finite_differences(conditioned):
    torch.manual_seed(0)
    model = build_model(BackboneConfig("tiny"), class_conditioned=conditioned).double()
    heads = [HeadAnnotation(10, 12, 4, 4), HeadAnnotation(22, 20, 4, 4)]
    targets = {
        lv: torch.from_numpy(dm.values).unsqueeze(0).unsqueeze(0)
        for lv, dm in pyramid_targets(heads, (32, 32), sigma=4.0).items()
    }
    images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    labels = torch.tensor([Weather.RAIN.value]) if conditioned else None
    cfg = LossConfig(lambda_c=1.0, lambda_w=0.01)
    _gradient_check(model, images, targets, labels, cfg)


def test_cm_gradient_sign_structure():
    # With lambda_c > 0 and zero prediction error, increasing any CM value
    # strictly decreases the total loss; with a large error the density
    # pressure dominates and the CM gradient points the other way.
    t = grids(fill=0.5)
    for error, expected_sign in ((0.0, -1.0), (100.0, 1.0)):
        cm_vals = {
            lv: torch.full_like(t[lv], 0.5, requires_grad=True) for lv in (3, 4, 5)
        }
        preds = {lv: t[lv] + error for lv in (3, 4, 5, 6)}
        pyramid = make_pyramid(preds[6], preds[5], preds[4], preds[3], cm=cm_vals)
        total, _ = total_loss(pyramid, t, None, LossConfig(lambda_c=1.0))
        total.backward()
        grad = cm_vals[3].grad[0, 0, 0, 0].item()
        assert math.copysign(1.0, grad) == expected_sign

import math

import numpy as np
import pytest

from cellctx.attention import GramConfig, RramConfig
from cellctx.boxes import DegenerateBoxError
from cellctx.detector import (Detector, DetectorConfig, assign_levels, gt_jitter_proposals, head_loss,
                              label_proposals)
from cellctx.synth import generate_scene
from cellctx.tensor import Tensor, grad_check
from cellctx.train import image_label, infer, propose

from _oracles import bilinear_point

SMALL = dict(channels=4, head_hidden=8, rram=RramConfig(c_prime=2), gram=GramConfig(c_double_prime=2))


def small(strategy="none", **kw):
    return Detector(DetectorConfig(strategy=strategy, **{**SMALL, **kw}))


def image(seed=0, size=64):
    return np.random.default_rng(seed).uniform(0, 1, size=(size, size, 3))


# -- backbone ------------------------------------------------------------------

def test_pyramid_shapes():
    levels = small().backbone_forward(image())
    assert [lv.shape for lv in levels] == [(1, 16, 16, 4), (1, 8, 8, 4), (1, 4, 4, 4), (1, 2, 2, 4)]


def test_zero_image_zero_features():
    levels = small().backbone_forward(np.zeros((64, 64, 3)))
    assert all(np.all(lv.data == 0) for lv in levels)


def test_backbone_deterministic():
    a = small().backbone_forward(image())
    b = small().backbone_forward(image())
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


def test_backbone_rejects_bad_size():
    with pytest.raises(ValueError):
        small().backbone_forward(np.zeros((60, 64, 3)))


def test_top_down_spreads_context_to_finest_level():
    img = image()
    far = img.copy()
    far[56:, 56:] += 0.5
    for top_down in (False, True):
        det = small(fpn_top_down=top_down)
        a = det.backbone_forward(img)[0].data[0, 0, 0]
        b = det.backbone_forward(far)[0].data[0, 0, 0]
        # the bottom-up receptive field of the top-left cell stops well short of the far corner
        assert (not np.array_equal(a, b)) == top_down
    extra = set(small().state_dict()) - set(small(fpn_top_down=False).state_dict())
    assert len(extra) == 16 and all(k.startswith(("lateral.", "smooth.")) for k in extra)


# -- proposals -------------------------------------------------------------------

def test_gt_jitter_zero_noise_returns_gt():
    gt = np.array([[4.0, 5.0, 20.0, 22.0], [30.0, 30.0, 50.0, 48.0]])
    p = gt_jitter_proposals(gt, 64, 64, np.random.default_rng(0), noise=0.0, n_background=0)
    assert np.array_equal(p, gt)


def test_gt_jitter_bounded_noise():
    gt = np.array([[10.0, 10.0, 30.0, 40.0]])
    p = gt_jitter_proposals(gt, 64, 64, np.random.default_rng(1), noise=0.2, n_background=0, copies=50)
    size = np.array([20.0, 30.0, 20.0, 30.0])
    assert np.all(np.abs(p - gt) <= 0.2 * size + 1e-12)


def test_gt_jitter_without_gt_gives_background_only():
    p = gt_jitter_proposals(np.zeros((0, 4)), 64, 64, np.random.default_rng(0), n_background=3)
    assert p.shape == (3, 4)


def test_learned_proposals_contract():
    det = small(rpn_top_k=100)
    (props,) = propose(det, image(size=128), mode="learned_rpn_lite")
    assert 0 < len(props) <= 100
    scores = [p.objectness for p in props]
    assert scores == sorted(scores, reverse=True) and all(0 <= s <= 1 for s in scores)
    for p in props:
        x1, y1, x2, y2 = p.box
        assert 0 <= x1 < x2 <= 128 and 0 <= y1 < y2 <= 128


def test_propose_gt_jitter_mode():
    (props,) = propose(small(), image(), mode="gt_jitter", gt_boxes=[np.zeros((0, 4))], n_background=2)
    assert len(props) == 2
    with pytest.raises(ValueError):
        propose(small(), image(), mode="gt_jitter")


# -- RoI pooling -------------------------------------------------------------------

def test_level_assignment():
    boxes = np.array([[0, 0, 20, 20], [0, 0, 112, 112], [0, 0, 224, 224], [0, 0, 1000, 1000]], dtype=float)
    assert assign_levels(boxes, 56.0).tolist() == [1, 3, 4, 4]


def test_constant_map_gives_constant_roi():
    det = small()
    levels = [Tensor(np.full((1, 16 // 2 ** r, 16 // 2 ** r, 4), 1.5 + r)) for r in range(4)]
    (rois,) = det.roi_pool(levels, [np.array([[3.0, 7.0, 21.0, 30.0]])])
    assert rois.features.shape == (1, 7, 7, 4) and np.allclose(rois.features.data, 1.5, rtol=0, atol=1e-14)


def test_point_box_replicates_cell_value():
    det = small()
    rng = np.random.default_rng(0)
    levels = [Tensor(rng.normal(size=(1, 16 // 2 ** r, 16 // 2 ** r, 4))) for r in range(4)]
    stride, (i, j) = 4, (5, 9)
    cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
    eps = 1e-9
    (rois,) = det.roi_pool(levels, [np.array([[cx - eps, cy - eps, cx + eps, cy + eps]])])
    want = levels[0].data[0, i, j]
    assert np.max(np.abs(rois.features.data[0] - want)) < 1e-8


def test_linear_ramp_matches_closed_form():
    det = small()
    h = 16
    yy, xx = np.mgrid[0:h, 0:h].astype(float)
    ramp = np.stack([yy, xx, 2 * yy - xx, np.ones_like(yy)], axis=-1)
    levels = [Tensor(ramp[None])] + [Tensor(np.zeros((1, h // 2 ** r, h // 2 ** r, 4))) for r in range(1, 4)]
    box = np.array([5.3, 9.1, 33.7, 41.2])
    (rois,) = det.roi_pool(levels, [box[None]])
    s, stride = 7, 4
    for a in range(s):
        for b in range(s):
            y = (box[1] + (a + 0.5) / s * (box[3] - box[1])) / stride - 0.5
            x = (box[0] + (b + 0.5) / s * (box[2] - box[0])) / stride - 0.5
            assert np.max(np.abs(rois.features.data[0, a, b] - bilinear_point(ramp, y, x))) < 1e-9
            assert abs(rois.features.data[0, a, b, 0] - y) < 1e-9


def test_degenerate_proposal_rejected():
    det = small()
    levels = det.backbone_forward(image())
    with pytest.raises(DegenerateBoxError):
        det.roi_pool(levels, [np.array([[5.0, 5.0, 5.0, 9.0]])])


# -- heads -----------------------------------------------------------------------

def test_double_head_empty():
    logits, deltas = small().double_head_forward(Tensor(np.zeros((0, 7, 7, 4))))
    assert logits.shape == (0, 4) and deltas.shape == (0, 12)


def test_double_head_zero_weights():
    det = small()
    det.cls_fc2.weight.data = np.zeros_like(det.cls_fc2.weight.data)
    logits, _ = det.double_head_forward(Tensor(np.random.default_rng(0).normal(size=(3, 7, 7, 4))))
    assert np.all(logits.data == 0)


def test_double_head_gradients():
    det = small()
    x = Tensor(np.random.default_rng(1).normal(size=(2, 7, 7, 4)), requires_grad=True)
    wl = Tensor(np.random.default_rng(2).normal(size=(2, 4)))
    wd = Tensor(np.random.default_rng(3).normal(size=(2, 12)))

    def f():
        logits, deltas = det.double_head_forward(x)
        return (logits * wl).sum() + (deltas * wd).sum()
    assert grad_check(f, [x] + det.parameters()[-10:]) < 1e-4


def test_head_loss_hand_cases():
    props = np.array([[0.0, 0.0, 10.0, 10.0]])
    cls, reg = head_loss(Tensor([[0.0, 0.0]]), Tensor(np.zeros((1, 4))), props, np.array([1]), props)
    assert math.isclose(cls.item(), math.log(2), rel_tol=1e-14) and reg.item() == 0.0
    big = Tensor([[-50.0, 50.0]])
    cls, _ = head_loss(big, Tensor(np.zeros((1, 4))), props, np.array([1]), props)
    assert cls.item() < 1e-30
    cls, reg = head_loss(Tensor([[1.0, 0.0]]), Tensor(np.ones((1, 4))), props, np.array([0]), props)
    assert reg.item() == 0.0 and np.isfinite(cls.item())


def test_head_loss_perfect_deltas():
    from cellctx.boxes import encode
    props = np.array([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 25.0, 15.0]])
    gt = np.array([[1.0, 0.5, 11.0, 9.0], [6.0, 4.0, 24.0, 17.0]])
    labels = np.array([2, 1])
    d = encode(props, gt) / np.array([0.1, 0.1, 0.2, 0.2])
    deltas = np.zeros((2, 8))
    deltas[0, 4:8] = d[0]
    deltas[1, 0:4] = d[1]
    _, reg = head_loss(Tensor(np.zeros((2, 3))), Tensor(deltas), props, labels, gt)
    assert abs(reg.item()) < 1e-12


def test_proposal_labels_use_half_iou():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    props = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0], [0.0, 0.0, 10.0, 4.9]])
    labels, match = label_proposals(props, gt, np.array([3]), 0.5)
    assert labels.tolist() == [3, 3, 0] and match.tolist() == [0, 0, -1]


def test_image_head_zero_weights_and_linearity():
    det = small(image_head=True)
    det.img_fc.weight.data[:] = 0
    levels = det.backbone_forward(image())
    assert np.all(det.image_cls_head(levels).data == 0)

    det = small(image_head=True)
    c = 4
    w = np.zeros((3, 3, c, c))
    w[1, 1] = np.eye(c)
    det.img_conv.weight.data = w
    det.img_fc.bias.data = np.array([0.3, -0.2])

    def logit(val):
        return det.image_cls_head([Tensor(np.full((1, 8, 8, c), val))] * 4).data[0]
    base, one, two = logit(0.0), logit(1.0), logit(2.0)
    assert np.allclose(two - base, 2 * (one - base), atol=1e-12)


def test_image_label_rule():
    for seed in range(20):
        s = generate_scene(seed)
        assert image_label(s) == int(any(b.class_label != "normal" for b in s.blobs))


def test_image_head_required():
    with pytest.raises(RuntimeError):
        small().image_cls_head(small().backbone_forward(image()))


# -- losses and graph --------------------------------------------------------------------

GT = [np.array([[8.0, 8.0, 28.0, 30.0], [36.0, 30.0, 56.0, 52.0]])]
LAB = [np.array([2, 3])]
PROPS = [np.array([[9.0, 7.0, 27.0, 31.0], [35.0, 31.0, 57.0, 50.0], [2.0, 40.0, 20.0, 60.0]])]


def test_loss_decomposition_exact():
    det = small("cascade_rram_gram", image_head=True)
    parts = det.losses(image()[None], PROPS, GT, LAB, np.random.default_rng(0), image_labels=np.array([1]))
    f = {k: v.item() for k, v in parts.items()}
    want = 1.0 * (f["rpn_cls"] + f["rpn_reg"]) + 2.0 * (f["head_cls"] + f["head_reg"]) + 0.15 * f["imgcls"]
    assert f["total"] == want


def test_no_positive_proposals_gives_zero_regression():
    det = small()
    parts = det.losses(image()[None], [np.array([[0.0, 0.0, 5.0, 5.0]])], GT, LAB, np.random.default_rng(0))
    assert parts["head_reg"].item() == 0.0 and np.isfinite(parts["total"].item())


def generic_point(det, seed=0):
    """Give every bias a small random value.

    With zero biases, dead ReLU patches put pre-activations exactly on the
    kink, where a central difference measures half the slope.
    """
    rng = np.random.default_rng(seed)
    for name, p in det.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.05, size=p.shape)
    return det


def test_end_to_end_gradients():
    det = generic_point(small("cascade_rram_gram", image_head=True))
    img = image()[None]

    def f():
        return det.losses(img, PROPS, GT, LAB, np.random.default_rng(0), image_labels=np.array([1]))["total"]
    assert grad_check(f, det.parameters(), max_coords_per_param=4) < 1e-4


def test_baseline_has_no_attention_parameters():
    base = small("none")
    full = small("cascade_rram_gram")
    extra = full.rram.num_parameters() + full.gram.num_parameters()
    assert base.rram is None and base.gram is None
    assert base.num_parameters() + extra == full.num_parameters()
    shared = dict(base.named_parameters())
    for name, p in full.named_parameters():
        if name in shared:
            assert np.array_equal(p.data, shared[name].data), name


# -- inference ---------------------------------------------------------------------------

def test_infer_empty_proposals():
    assert infer(small(), image(), [np.zeros((0, 4))]) == [[]]


def dominant(det, cls):
    det.cls_fc2.weight.data[:] = 0
    b = np.full(det.cfg.num_classes + 1, -10.0)
    b[cls] = 10.0
    det.cls_fc2.bias.data = b
    det.reg_fc.weight.data[:] = 0
    return det


def test_infer_one_dominant_class():
    det = dominant(small(), 2)
    (dets,) = infer(det, image(), [np.array([[10.0, 10.0, 30.0, 30.0]])])
    assert len(dets) == 1 and dets[0].class_id == 2 and dets[0].score > 0.99
    assert np.allclose(dets[0].box, [10, 10, 30, 30])


def test_infer_duplicates_suppressed():
    det = dominant(small(), 1)
    (dets,) = infer(det, image(), [np.array([[10.0, 10.0, 30.0, 30.0]] * 3)])
    assert len(dets) == 1

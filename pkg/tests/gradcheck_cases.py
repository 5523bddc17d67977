"""Gradient-check inventory shared by the unit tests and the acceptance suite.

One entry per differentiable operation: (name, fn, inputs, weights).
Inputs stay at side <= 8 so the whole inventory runs in seconds.  ReLU
inputs are pushed away from the kink at zero; softmax and similar
normalizing ops get a non-uniform projection so errors cannot cancel.
"""

import numpy as np

from mskseg.autograd import (
    concat,
    conv2d,
    conv2d_transpose,
    cross_entropy,
    binary_cross_entropy,
    index_rows,
    linear,
    matmul,
    smooth_l1,
    upsample_nearest2,
)
from mskseg.roialign import RoiBox, roi_align

_rng = np.random.default_rng(987)


def _away_from_zero(shape, margin=0.2):
    x = _rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)


_proj = lambda shape: _rng.normal(size=shape)

_x334 = _rng.normal(size=(3, 3, 4))
_roi = RoiBox(0.13, 0.21, 0.78, 0.9)

GRADCHECK_CASES = [
    ("add", lambda a, b: a + b, [_rng.normal(size=(4, 4)), _rng.normal(size=(4, 4))], None),
    ("add_scalar", lambda a: a + 2.5, [_rng.normal(size=(3, 3))], None),
    ("sub", lambda a, b: a - b, [_rng.normal(size=(4, 3)), _rng.normal(size=(4, 3))], None),
    ("mul", lambda a, b: a * b, [_rng.normal(size=(4, 4)), _rng.normal(size=(4, 4))], _proj((4, 4))),
    ("neg", lambda a: -a, [_rng.normal(size=(5,))], None),
    ("div_scalar", lambda a: a / 3.0, [_rng.normal(size=(4,))], None),
    ("slice", lambda a: a[1:3, ::2], [_rng.normal(size=(4, 6))], _proj((2, 3))),
    ("reshape", lambda a: a.reshape(2, 8), [_rng.normal(size=(4, 4))], _proj((2, 8))),
    ("transpose", lambda a: a.transpose(1, 0, 2), [_rng.normal(size=(2, 3, 4))], _proj((3, 2, 4))),
    ("concat", lambda a, b: concat([a, b], axis=0),
     [_rng.normal(size=(2, 3, 3)), _rng.normal(size=(1, 3, 3))], _proj((3, 3, 3))),
    ("matmul", lambda a, b: matmul(a, b), [_rng.normal(size=(3, 4)), _rng.normal(size=(4, 2))],
     _proj((3, 2))),
    ("linear", lambda x, w, b: linear(x, w, b),
     [_rng.normal(size=(3, 5)), _rng.normal(size=(5, 4)), _rng.normal(size=(4,))], _proj((3, 4))),
    ("index_rows", lambda a: index_rows(a, [2, 0, 2, 1]), [_rng.normal(size=(4, 3))], _proj((4, 3))),
    ("sum", lambda a: a.sum(), [_rng.normal(size=(3, 4))], None),
    ("sum_axis", lambda a: a.sum(axis=1), [_rng.normal(size=(3, 4))], _proj((3,))),
    ("mean", lambda a: a.mean(), [_rng.normal(size=(4, 4))], None),
    ("mean_axis", lambda a: a.mean(axis=0), [_rng.normal(size=(4, 3))], _proj((3,))),
    ("relu", lambda a: a.relu(), [_away_from_zero((4, 4))], _proj((4, 4))),
    ("sigmoid", lambda a: a.sigmoid(), [_rng.normal(size=(4, 4))], _proj((4, 4))),
    ("softmax", lambda a: a.softmax(axis=1), [_rng.normal(size=(3, 5))], _proj((3, 5))),
    ("conv2d", lambda x, k, b: conv2d(x, k, b, stride=1, padding=1),
     [_rng.normal(size=(2, 5, 5)), _rng.normal(size=(3, 2, 3, 3)), _rng.normal(size=(3,))],
     _proj((3, 5, 5))),
    ("conv2d_strided", lambda x, k: conv2d(x, k, stride=2, padding=0),
     [_rng.normal(size=(2, 6, 6)), _rng.normal(size=(2, 2, 2, 2))], _proj((2, 3, 3))),
    ("conv2d_transpose", lambda x, k, b: conv2d_transpose(x, k, b, stride=2),
     [_rng.normal(size=(2, 4, 4)), _rng.normal(size=(2, 3, 2, 2)), _rng.normal(size=(3,))],
     _proj((3, 8, 8))),
    ("upsample_nearest2", lambda a: upsample_nearest2(a), [_rng.normal(size=(2, 3, 3))],
     _proj((2, 6, 6))),
    ("cross_entropy", lambda z: cross_entropy(z, np.array([1, 0, 3])),
     [_rng.normal(size=(3, 4))], None),
    ("binary_cross_entropy",
     lambda z: binary_cross_entropy(z, np.array([[1.0, 0.0], [0.0, 1.0]])),
     [_rng.normal(size=(2, 2))], None),
    ("smooth_l1_small", lambda p: smooth_l1(p, np.zeros((3, 3))),
     [_rng.normal(size=(3, 3)) * 0.3], None),
    ("smooth_l1_large", lambda p: smooth_l1(p, np.zeros((2, 2))),
     [_away_from_zero((2, 2)) * 4.0], None),
    ("roi_align", lambda f: roi_align(f, _roi, 4, sampling_ratio=2), [_x334], _proj((3, 4, 4))),
    ("roi_align_fine", lambda f: roi_align(f, _roi, 7, sampling_ratio=1),
     [_rng.normal(size=(2, 8, 8))], _proj((2, 7, 7))),
]

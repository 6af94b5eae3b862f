"""Builders shared across the test modules."""

import numpy as np
import torch

from ka.data import DATASET_A, DATASET_B, MixedBatch, Sample
from ka.model import DualOutputs, TaskOutputs


def tiny_image(rng=None, h=8, w=8):
    if rng is None:
        return np.zeros((h, w, 3), dtype=np.float32)
    return rng.uniform(0, 1, size=(h, w, 3)).astype(np.float32)


def make_batch(rng, n_a, n_b, num_ids, num_attrs):
    a = tuple(Sample(tiny_image(), DATASET_A, person_id=int(rng.integers(0, num_ids)),
                     camera_id=int(rng.integers(0, 3))) for _ in range(n_a))
    b = tuple(Sample(tiny_image(), DATASET_B,
                     attributes=rng.integers(0, 2, size=num_attrs).astype(np.uint8))
              for _ in range(n_b))
    return MixedBatch(a, b)


def rand_outputs(rng, n, num_ids, num_attrs, feat_dim, dataset_head=True,
                 reid=True, par=True, scale=1.5, requires_grad=False,
                 dtype=torch.float64):
    def t(*shape):
        arr = rng.normal(0, scale, size=shape)
        return torch.tensor(arr, dtype=dtype, requires_grad=requires_grad)

    return TaskOutputs(
        reid_features=t(n, feat_dim) if reid else None,
        reid_logits=t(n, num_ids) if reid else None,
        dataset_logit=t(n, 1) if (reid and dataset_head) else None,
        par_features=t(n, feat_dim) if par else None,
        par_logits=t(n, num_attrs) if par else None,
    )


def rand_dual(rng, n_a=3, n_b=3, num_ids=4, num_attrs=3, feat_dim=5,
              dataset_head=True, reid=True, par=True, requires_grad=False,
              dtype=torch.float64):
    batch = make_batch(rng, n_a, n_b, num_ids, num_attrs)
    left = rand_outputs(rng, n_a + n_b, num_ids, num_attrs, feat_dim,
                        dataset_head, reid, par, requires_grad=requires_grad, dtype=dtype)
    right = rand_outputs(rng, n_a + n_b, num_ids, num_attrs, feat_dim,
                         dataset_head, reid, par, requires_grad=requires_grad, dtype=dtype)
    return DualOutputs(left=left, right=right, batch=batch)


def dual_tensors(d):
    """All tensors of a DualOutputs, in a fixed order."""
    out = []
    for side in (d.left, d.right):
        for name in ("reid_features", "reid_logits", "dataset_logit",
                     "par_features", "par_logits"):
            t = getattr(side, name)
            if t is not None:
                out.append(t)
    return out


def swap_sides(d):
    return DualOutputs(left=d.right, right=d.left, batch=d.batch)

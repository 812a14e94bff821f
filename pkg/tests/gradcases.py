"""Tiny differentiable cases shared by the gradient tests."""

import zlib
from dataclasses import replace

import numpy as np

from timeline_bench import numerics as nx
from timeline_bench.data import GenConfig, generate_synthetic
from timeline_bench import models
from timeline_bench.models import ModelConfig, collate, cross_entropy_loss, distillation_loss, forward, init_params
from timeline_bench.numerics import Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


BLOCK_CFG = ModelConfig(d_model=8, num_heads=2, num_layers=1, feedforward_dim=8)


def encoder_block_case(rng):
    raw = models._encoder_params(rng, "enc", BLOCK_CFG)
    names = sorted(raw)
    tensors = [Tensor(raw[k], requires_grad=True) for k in names]
    x = leaf(rng, 2, 4, 8)
    mask = np.array([[True, True, True, False], [True, True, True, True]])

    def fn(x, *ps):
        return models._encoder(x, mask, dict(zip(names, ps)), "enc", BLOCK_CFG, models._Context())

    return [x, *tensors], fn


LAYER_CASES = {
    "matmul_batched": lambda r: ([leaf(r, 2, 3, 4), leaf(r, 4, 5)], lambda a, b: nx.matmul(a, b)),
    "matmul_batch_batch": lambda r: ([leaf(r, 2, 3, 4), leaf(r, 2, 4, 3)], lambda a, b: nx.matmul(a, b)),
    "add_broadcast": lambda r: ([leaf(r, 3, 4), leaf(r, 4)], lambda a, b: nx.add(a, b)),
    "sub_mul": lambda r: ([leaf(r, 3, 4), leaf(r, 3, 1)], lambda a, b: nx.mul(nx.sub(a, b), a)),
    "scale": lambda r: ([leaf(r, 5)], lambda a: nx.scale(a, -1.7)),
    "concat": lambda r: ([leaf(r, 2, 3), leaf(r, 2, 2)], lambda a, b: nx.concat([a, b, a], axis=1)),
    "slice": lambda r: ([leaf(r, 4, 5)], lambda a: nx.slice_axis(a, 1, 3, axis=0)),
    "fancy_index": lambda r: ([leaf(r, 4, 5)], lambda a: a[(np.array([0, 2, 2]), np.array([1, 4, 4]))]),
    "reshape_transpose": lambda r: ([leaf(r, 2, 3, 4)], lambda a: nx.transpose(nx.reshape(a, (3, 2, 4)), (2, 0, 1))),
    "relu": lambda r: ([leaf(r, 6, 3)], nx.relu),
    "masked_softmax": lambda r: (
        [leaf(r, 3, 5)],
        lambda a: nx.masked_softmax(a, np.array([[1, 1, 0, 1, 1], [1, 0, 0, 0, 1], [1, 1, 1, 1, 1]], bool)),
    ),
    "masked_log_softmax": lambda r: (
        [leaf(r, 3, 5)],
        lambda a: nx.masked_log_softmax(a, np.array([[1, 1, 0, 1, 1], [1, 1, 1, 1, 1], [0, 1, 1, 1, 1]], bool))[
            np.array([[1, 1, 0, 1, 1], [1, 1, 1, 1, 1], [0, 1, 1, 1, 1]], bool)
        ],
    ),
    "layer_norm_affine": lambda r: ([leaf(r, 3, 6), leaf(r, 6), leaf(r, 6)], lambda x, g, b: nx.layer_norm(x, g, b)),
    "mean": lambda r: ([leaf(r, 3, 4)], lambda a: nx.mean(a, axis=1)),
    "encoder_block": encoder_block_case,
    "sinusoidal_pe_add": lambda r: ([leaf(r, 5, 6)], lambda a: nx.add(a, nx.sinusoidal_pe(5, 6))),
    "dropout_fixed_mask": lambda r: (
        [leaf(r, 4, 4)],
        lambda a: nx.dropout(a, 0.3, nx.DropoutStream(11), training=True),
    ),
}


def layer_error(name):
    """Max relative finite-difference error for one entry of LAYER_CASES."""
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params, fn = LAYER_CASES[name](rng)
    # random projection turns any output into a scalar with nontrivial gradient
    probe = rng.normal(size=fn(*params).shape)
    return nx.finite_diff_check(lambda: nx.reduce_sum(nx.mul(fn(*params), probe)), params, step=1e-5)


def full_loss_case(kind):
    """Tiny batch, parameters and a closure computing the full training loss."""
    gen = GenConfig(num_timelines=2, node_count_range=(2, 3), videos_per_node_range=(1, 2), embedding_dim=4, seed=1)
    samples = list(generate_synthetic(gen).samples)
    assert all(s.n <= 5 for s in samples)
    cfg = ModelConfig(model_kind=kind, d_model=8, num_heads=1, num_layers=1, feedforward_dim=8)
    params = init_params(cfg, 4, seed=5)
    batch = collate(samples)
    teacher_cfg = replace(cfg, model_kind="tri", use_text=True, d_text=4)
    teacher_params = init_params(teacher_cfg, 4, seed=6)
    # the frozen teacher does not depend on the student parameters
    teacher = forward(teacher_params, teacher_cfg, collate(samples, with_text=True))

    def loss():
        out = forward(params, cfg, batch)
        total = nx.scale(cross_entropy_loss(out.log_probs, batch.labels, batch.video_mask), cfg.ce_weight)
        if kind == "tri_distill":
            total = nx.add(total, nx.scale(distillation_loss(out, teacher), cfg.distill_weight))
        return total

    return params, loss

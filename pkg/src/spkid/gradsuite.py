"""Finite-difference gradient suite over every differentiable building block.

Each case maps a seed to ``(op, inputs)`` for :func:`grad_check`.  Inputs
avoid the measure-zero kinks (relu at 0, log/sqrt near 0) where central
differences are meaningless.  The composed case runs a tiny encoder (6
frames, width 8, one transformer block) end to end.  Its plain central
differences carry O(eps^2) truncation error on small-gradient coordinates
that can exceed the tolerance at eps=1e-3; ``grad_check(richardson=True)``
separates that from a wrong backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spkid import numcore as nc
from spkid.encoder import EncoderConfig, feature_encoder, init_encoder_params, transformer_encode
from spkid.numcore import grad_check
from spkid.objectives import (
    Codebook,
    contrastive_loss,
    diversity_penalty,
    masked_prediction_loss,
    quantize,
)

TOLERANCE = 1e-4
TINY_ENCODER = EncoderConfig(conv_layers=((8, 4, 2), (8, 3, 2)), model_dim=8, n_heads=2,
                             n_layers=1, ffn_dim=16, max_positions=6)
TINY_SAMPLES = 29  # -> 6 frames with the tiny conv stack


def _away_from_zero(rng, shape, low=0.2):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.5, size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _case_binary(fn):
    def make(rng):
        return fn, [rng.normal(size=(3, 4)), rng.normal(size=(4,))]
    return make


def _div(rng):
    return nc.div, [rng.normal(size=(3, 4)), _away_from_zero(rng, (3, 1), 0.5)]


def _unary(fn, sampler=None):
    def make(rng):
        x = sampler(rng, (3, 5)) if sampler else rng.normal(size=(3, 5))
        return fn, [x]
    return make


def _reductions(rng):
    def op(x):
        return nc.add(nc.sum_(nc.mul(x, x), axis=1), nc.mean(nc.tanh(x), axis=1))
    return op, [rng.normal(size=(3, 4))]


def _shape_ops(rng):
    def op(x):
        y = nc.transpose(nc.reshape(x, (2, 3, 4)), (2, 0, 1))
        y = nc.swapaxes(y, 0, 2)
        return nc.mul(y, y)
    return op, [rng.normal(size=(6, 4))]


def _indexing(rng):
    idx = np.array([2, 0, 2, 3])
    mask = np.array([True, False, True, True])

    def op(x):
        a = nc.take_rows(x, idx)
        b = nc.getitem(x, mask)
        c = nc.getitem(x, (slice(1, 3), slice(None)))
        return nc.concat([nc.mul(a, a), nc.stack([b[0], c[1]], axis=0)], axis=0)
    return op, [rng.normal(size=(4, 3))]


def _matmul(rng):
    return nc.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]


def _linear(rng):
    return nc.linear, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))]


def _conv1d(rng):
    return (lambda x, k: nc.conv1d(x, k, 2)), [rng.normal(size=(2, 3, 11)),
                                               rng.normal(size=(4, 3, 3))]


def _layer_norm(rng):
    return nc.layer_norm, [rng.normal(size=(3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))]


def _softmaxes(rng):
    def op(x):
        return nc.add(nc.softmax(x, axis=-1), nc.log_softmax(x, axis=0))
    return op, [rng.normal(size=(3, 5))]


def _cross_entropy(rng):
    targets = rng.integers(0, 5, size=6)
    weights = rng.uniform(0.5, 2.0, size=5)
    return (lambda z: nc.weighted_cross_entropy(z, targets, weights)), [rng.normal(size=(6, 5))]


def _cosine(rng):
    return nc.cosine_similarity, [rng.normal(size=(3, 1, 4)), rng.normal(size=(3, 5, 4))]


def _mean_pool(rng):
    mask = np.array([[True, True, False, True], [False, True, True, False]])
    return (lambda x: nc.mean_pool(x, mask)), [rng.normal(size=(2, 4, 3))]


def _gumbel(rng):
    seed = int(rng.integers(1 << 30))
    return (lambda z: nc.gumbel_softmax(z, 0.7, seed=seed)), [rng.normal(size=(3, 6))]


def _contrastive(rng):
    mask = np.zeros((2, 8), dtype=bool)
    mask[0, 1:5] = True
    mask[1, 3:8] = True
    seed = int(rng.integers(1 << 30))

    def op(c, q):
        return contrastive_loss(c, q, mask, K=3, kappa=0.5, seed=seed)
    return op, [rng.normal(size=(2, 8, 4)), rng.normal(size=(2, 8, 4))]


def _diversity(rng):
    def op(z):
        return diversity_penalty(nc.softmax(z, axis=-1))
    return op, [rng.normal(size=(5, 2, 4))]


def _quantize_vectors(rng):
    book = Codebook.init(4, groups=2, entries=3, seed=int(rng.integers(1 << 30)))
    latents = rng.normal(size=(5, 4))

    def op(v):
        book.vectors = v
        q, _ = quantize(latents, book, temperature=1.0, noise=False)
        return q
    return op, [book.vectors.data]


def _masked_prediction(rng):
    mask = np.array([[False, True, True, False, True], [True, False, False, False, True]])
    labels = rng.integers(0, 4, size=mask.shape)

    def op(ctx, proj):
        return masked_prediction_loss(ctx, labels, mask, proj)
    return op, [rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4))]


def _tiny_encoder(rng):
    params = init_encoder_params(TINY_ENCODER, seed=int(rng.integers(1 << 30)))
    names = sorted(params)
    wave = rng.normal(0.0, 0.5, size=(2, TINY_SAMPLES))
    valid = np.ones((2, 6), dtype=bool)
    valid[1, 5] = False

    def op(*tensors):
        p = dict(zip(names, tensors))
        frames = feature_encoder(wave, p, TINY_ENCODER)
        return nc.mean_pool(transformer_encode(frames, valid, p, TINY_ENCODER), valid)
    return op, [params[n].data for n in names]


@dataclass(frozen=True)
class GradCase:
    name: str
    make: object  # rng -> (op, inputs)


CASES = (
    GradCase("add", _case_binary(nc.add)),
    GradCase("sub", _case_binary(nc.sub)),
    GradCase("mul", _case_binary(nc.mul)),
    GradCase("div", _div),
    GradCase("neg", _unary(nc.neg)),
    GradCase("exp", _unary(nc.exp)),
    GradCase("log", _unary(nc.log, _positive)),
    GradCase("tanh", _unary(nc.tanh)),
    GradCase("sqrt", _unary(nc.sqrt, _positive)),
    GradCase("square", _unary(nc.square)),
    GradCase("gelu", _unary(nc.gelu)),
    GradCase("relu", _unary(nc.relu, _away_from_zero)),
    GradCase("sum_mean", _reductions),
    GradCase("reshape_transpose", _shape_ops),
    GradCase("indexing", _indexing),
    GradCase("matmul", _matmul),
    GradCase("linear", _linear),
    GradCase("conv1d", _conv1d),
    GradCase("layer_norm", _layer_norm),
    GradCase("softmax", _softmaxes),
    GradCase("weighted_cross_entropy", _cross_entropy),
    GradCase("cosine_similarity", _cosine),
    GradCase("mean_pool", _mean_pool),
    GradCase("gumbel_softmax", _gumbel),
    GradCase("contrastive_loss", _contrastive),
    GradCase("diversity_penalty", _diversity),
    GradCase("quantize_codebook", _quantize_vectors),
    GradCase("masked_prediction_loss", _masked_prediction),
    GradCase("tiny_encoder", _tiny_encoder),
)


def run_case(case: GradCase, seed: int) -> float:
    with nc.precision(np.float64):
        op, inputs = case.make(np.random.default_rng([seed, 909]))
        return grad_check(op, inputs=inputs, seed=seed)


def run_suite(seeds=range(10), cases=CASES, report=None) -> dict:
    """Worst relative error per case over ``seeds``."""
    worst = {}
    for case in cases:
        worst[case.name] = max(run_case(case, s) for s in seeds)
        if report:
            report(case.name, worst[case.name])
    return worst

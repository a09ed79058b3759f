"""Self-supervised objectives.

* Quantized contrastive learning: Gumbel codebook targets, cosine-similarity
  InfoNCE over masked frames with in-utterance distractors, and a codebook
  diversity penalty.
* Masked cluster prediction: a k-means teacher labels frames; the model is
  trained with cross-entropy on masked frames only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from spkid import numcore as nc
from spkid.errors import BadLabel, EmptyMask, ShapeMismatch, TooFewMasked, TooFewPoints
from spkid.numcore import Tensor

# ---------------------------------------------------------------- quantizer


@dataclass
class Codebook:
    groups: int
    entries_per_group: int
    vectors: Tensor  # [G, V, d/G]
    proj_weight: Tensor  # [d, G*V]
    proj_bias: Tensor  # [G*V]

    @classmethod
    def init(cls, dim, groups=2, entries=32, seed=0):
        if dim % groups:
            raise ShapeMismatch(f"dim {dim} not divisible into {groups} groups")
        rng = np.random.default_rng([seed, 202])
        vectors = rng.uniform(-1.0, 1.0, size=(groups, entries, dim // groups))
        # unit-variance projection (not 1/sqrt(dim)): code logits start decisive, so
        # the sampled codes follow the latents instead of the Gumbel noise
        w = rng.normal(0.0, 1.0, size=(dim, groups * entries))
        return cls(groups, entries,
                   Tensor(vectors, requires_grad=True, name="w2v.codebook.vectors"),
                   Tensor(w, requires_grad=True, name="w2v.codebook.proj.weight"),
                   Tensor(np.zeros(groups * entries), requires_grad=True,
                          name="w2v.codebook.proj.bias"))

    def params(self, prefix="w2v.codebook.") -> dict:
        return {prefix + "vectors": self.vectors,
                prefix + "proj.weight": self.proj_weight,
                prefix + "proj.bias": self.proj_bias}

    @classmethod
    def from_params(cls, params, prefix="w2v.codebook."):
        vectors = params[prefix + "vectors"]
        g, v, _ = vectors.shape
        return cls(g, v, vectors, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def quantize(latents, codebook: Codebook, temperature=1.0, seed=None, noise=True):
    """Pick one codebook entry per group for every frame.

    Returns (quantized [..., d], code_probs [..., G, V]); ``code_probs`` are
    the noise-free softmax distributions used by the diversity penalty.
    """
    latents = nc.as_tensor(latents)
    g, v = codebook.groups, codebook.entries_per_group
    lead = latents.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    logits = nc.linear(nc.reshape(latents, (n, latents.shape[-1])),
                       codebook.proj_weight, codebook.proj_bias)
    logits = nc.reshape(logits, (n, g, v))
    probs = nc.softmax(logits, axis=-1)
    onehot = nc.gumbel_softmax(logits, temperature, seed=seed, hard=True, noise=noise)
    # [G, n, V] @ [G, V, d/G] -> [G, n, d/G]
    picked = nc.matmul(nc.transpose(onehot, (1, 0, 2)), codebook.vectors)
    quantized = nc.reshape(nc.transpose(picked, (1, 0, 2)), (*lead, g * codebook.vectors.shape[-1]))
    return quantized, nc.reshape(probs, (*lead, g, v))


def diversity_penalty(code_probs) -> Tensor:
    """Mean over groups of ``1 - exp(H(avg usage)) / V``; 0 at uniform usage."""
    probs = nc.as_tensor(code_probs)
    g, v = probs.shape[-2:]
    flat = nc.reshape(probs, (-1, g, v))
    avg = nc.mean(flat, axis=0)  # [G, V]
    entropy = nc.neg(nc.sum_(nc.mul(avg, nc.log(nc.add(avg, 1e-30))), axis=-1))
    perplexity = nc.exp(entropy)
    return nc.mean(nc.sub(1.0, nc.mul(perplexity, 1.0 / v)))


# ---------------------------------------------------------------- contrastive


def sample_distractors(masked_positions, k, rng) -> np.ndarray:
    """For each masked position, ``k`` other masked positions (uniform, with replacement)."""
    pos = np.asarray(masked_positions)
    m = pos.size
    if m < 2:
        raise TooFewMasked(f"need >= 2 masked positions for distractors, got {m}")
    draw = rng.integers(0, m - 1, size=(m, k))
    # skip over the position itself
    draw = draw + (draw >= np.arange(m)[:, None])
    return pos[draw]


def contrastive_loss(context, quantized, mask, K=10, kappa=0.1, seed=None):
    """InfoNCE with cosine similarity over masked frames.

    ``context``/``quantized`` are ``[T, d]`` (one utterance) or ``[B, T, d]``
    with ``mask`` a boolean array of matching leading shape (a MaskSpec is
    accepted for the single-utterance case).  Distractors come from other
    masked positions of the same utterance.
    """
    context, quantized = nc.as_tensor(context), nc.as_tensor(quantized)
    if context.shape != quantized.shape:
        raise ShapeMismatch(f"context {context.shape} vs quantized {quantized.shape}")
    if K < 1:
        raise ValueError("K must be >= 1")
    if hasattr(mask, "as_bool"):
        mask = mask.as_bool()
    mask = np.asarray(mask, dtype=bool)
    if context.ndim == 2:
        context = nc.reshape(context, (1, *context.shape))
        quantized = nc.reshape(quantized, (1, *quantized.shape))
        mask = mask[None]
    b, t, d = context.shape
    if mask.shape != (b, t):
        raise ShapeMismatch(f"mask {mask.shape} for frames {(b, t)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    anchors, candidates = [], []
    for i in range(b):
        pos = np.flatnonzero(mask[i])
        if pos.size == 0:
            continue
        neg = sample_distractors(pos, K, rng)
        anchors.append(i * t + pos)
        candidates.append(i * t + np.concatenate([pos[:, None], neg], axis=1))
    if not anchors:
        raise TooFewMasked("no masked positions")
    anchors = np.concatenate(anchors)
    candidates = np.concatenate(candidates)

    c_flat = nc.reshape(context, (b * t, d))
    q_flat = nc.reshape(quantized, (b * t, d))
    c_sel = nc.take_rows(c_flat, anchors)  # [M, d]
    q_sel = nc.take_rows(q_flat, candidates)  # [M, K+1, d]
    sims = nc.cosine_similarity(nc.reshape(c_sel, (anchors.size, 1, d)), q_sel)
    logits = nc.mul(sims, 1.0 / kappa)
    return nc.weighted_cross_entropy(logits, np.zeros(anchors.size, dtype=np.int64))


def pretrain_loss_w2v(context, latents, codebook: Codebook, mask, K=10, kappa=0.1,
                      alpha=0.1, temperature=1.0, seed=None):
    """Contrastive loss + alpha * diversity penalty; returns (total, parts)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    quantized, probs = quantize(latents, codebook, temperature, rng)
    if hasattr(mask, "as_bool"):
        mask = mask.as_bool()
    mask = np.asarray(mask, dtype=bool)
    contrast = contrastive_loss(context, quantized, mask, K, kappa, rng)
    # usage statistics over masked frames only
    probs_masked = nc.getitem(probs, mask) if mask.any() else probs
    diversity = diversity_penalty(probs_masked)
    total = nc.add(contrast, nc.mul(diversity, alpha)) if alpha else contrast
    return total, {"contrastive": contrast.item(), "diversity": diversity.item()}


# ---------------------------------------------------------------- k-means teacher


@dataclass
class Centroids:
    means: np.ndarray
    inertia: float
    history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.means.shape[0]


def _sq_distances(x, c, chunk=4096):
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("nkf,nkf->nk", diff, diff)
    return out


def _inertia(x, means, labels):
    diff = x - means[labels]
    return float(np.einsum("nf,nf->", diff, diff))


def kmeans_fit(features, k, max_iters=100, seed=0) -> Centroids:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Empty clusters are re-seeded to the point farthest from its centroid.
    ``history`` records the inertia after every assignment step.
    """
    x = np.asarray(features.data if isinstance(features, Tensor) else features,
                   dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("features must be [N, f]")
    n = x.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"k-means with k={k} needs >= {k} points, got {n}")
    rng = np.random.default_rng(seed)

    means = np.empty((k, x.shape[1]))
    means[0] = x[rng.integers(n)]
    closest = _sq_distances(x, means[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        means[j] = x[idx]
        closest = np.minimum(closest, _sq_distances(x, means[j:j + 1])[:, 0])

    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_distances(x, means)
        new_labels = d2.argmin(axis=1)
        history.append(_inertia(x, means, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(means)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        means[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            dist = np.einsum("nf,nf->n", x - means[labels], x - means[labels])
            taken = set()
            for j in empty:
                order = np.argsort(-dist, kind="stable")
                pick = next(i for i in order if i not in taken)
                taken.add(pick)
                means[j] = x[pick]
                labels[pick] = j
                dist[pick] = 0.0
    labels = _sq_distances(x, means).argmin(axis=1)
    return Centroids(means, _inertia(x, means, labels), history, it)


def kmeans_assign(features, centroids) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance; ties to the lowest id."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features,
                   dtype=np.float64)
    means = centroids.means if isinstance(centroids, Centroids) else np.asarray(centroids)
    if x.ndim != 2 or x.shape[1] != means.shape[1]:
        raise ShapeMismatch(f"features {x.shape} vs centroids {means.shape}")
    return _sq_distances(x, means).argmin(axis=1)


# ---------------------------------------------------------------- masked prediction


def masked_prediction_loss(context, teacher_labels, mask, proj) -> Tensor:
    """Mean cross-entropy of ``context_t @ proj`` against teacher labels, masked t only.

    Shapes: ``context`` ``[T, d]`` or ``[B, T, d]``; labels and mask share the
    leading shape.  Unmasked frames are never touched, so their gradient is
    exactly zero.
    """
    context = nc.as_tensor(context)
    if hasattr(mask, "as_bool"):
        mask = mask.as_bool()
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(teacher_labels, dtype=np.int64)
    if mask.shape != context.shape[:-1] or labels.shape != mask.shape:
        raise ShapeMismatch(f"context {context.shape}, labels {labels.shape}, mask {mask.shape}")
    if not mask.any():
        raise EmptyMask("masked prediction needs at least one masked frame")
    k = proj.shape[-1]
    targets = labels[mask]
    if np.any(targets < 0) or np.any(targets >= k):
        raise BadLabel(f"teacher labels must lie in 0..{k - 1}")
    d = context.shape[-1]
    flat = nc.reshape(context, (-1, d))
    rows = nc.take_rows(flat, np.flatnonzero(mask.reshape(-1)))
    logits = nc.matmul(rows, proj)
    return nc.weighted_cross_entropy(logits, targets)


# ---------------------------------------------------------------- target refinement


def refine_targets(params, config, manifest, layer_index, k, seed=0, splits=("train", "val", "test"),
                   max_frames=100_000, max_len_s=4.0, max_iters=100, batch_size=16):
    """Second-iteration teacher: cluster hidden states of a pretrained encoder.

    Hidden states at ``layer_index`` (0 = position-embedded input of the
    first transformer block) are computed without masking, a seeded sample of
    at most ``max_frames`` frames is clustered with k-means, and every frame
    is re-labelled.  Returns ``{path: labels at the latent frame rate}``.
    """
    from spkid.audio_io import ClipCache, batch_iter
    from spkid.encoder import encode, transformer_encode

    if not 0 <= layer_index <= config.n_layers:
        raise ValueError(f"layer_index must lie in 0..{config.n_layers}")
    load = ClipCache()
    feats = {}
    for split in splits:
        if not manifest.split(split):
            continue
        for batch in batch_iter(manifest, split, batch_size, max_len_s, seed=0,
                                random_crop=False, shuffle=False, load=load):
            latents, valid = encode(batch.waves, batch.lengths, params, config)
            _, hidden = transformer_encode(latents, valid, params, config, return_hidden=True)
            h = hidden[layer_index].data
            for i, path in enumerate(batch.paths):
                feats[path] = np.asarray(h[i, :valid[i].sum()], dtype=np.float64)
    paths = sorted(feats)
    pool = np.concatenate([feats[p] for p in paths])
    rng = np.random.default_rng(seed)
    if pool.shape[0] > max_frames:
        pool = pool[np.sort(rng.choice(pool.shape[0], max_frames, replace=False))]
    centroids = kmeans_fit(pool, k, max_iters=max_iters, seed=seed)
    return {p: kmeans_assign(feats[p], centroids) for p in paths}

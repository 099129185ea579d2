"""Compiled inner loops for PV-DM training with negative sampling.

All randomness inside the kernels comes from a splitmix64 stream held in a
one-element uint64 array, so a run is bit-reproducible for a fixed seed.
"""
import numpy as np
from numba import njit, prange


@njit(cache=True)
def splitmix64(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _uniform(state):
    return (splitmix64(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def draw_negative(cum, state):
    u = _uniform(state)
    i = np.searchsorted(cum, u, side="right")
    if i >= cum.shape[0]:
        i = cum.shape[0] - 1
    return i


@njit(cache=True)
def _neg_log_sigmoid(f):
    # -log(sigmoid(f)) without overflow
    if f > 0:
        return np.log1p(np.exp(-f))
    return -f + np.log1p(np.exp(f))


@njit(cache=True)
def train_position(doc_vecs, d, word_vecs, ctx, n_ctx, out_vecs, targets, labels, n_targets,
                   lr, train_words, h, neu1e):
    """One SGD step on a single (context, center) example; returns its loss.

    The hidden vector is the mean of the document vector and the context
    word vectors.  Every input vector receives its exact share of the
    gradient, ``neu1e / (1 + n_ctx)``.
    """
    dim = h.shape[0]
    inv = 1.0 / (1 + n_ctx)
    for k in range(dim):
        h[k] = doc_vecs[d, k]
    for c in range(n_ctx):
        w = ctx[c]
        for k in range(dim):
            h[k] += word_vecs[w, k]
    for k in range(dim):
        h[k] *= inv
        neu1e[k] = 0.0
    loss = 0.0
    for j in range(n_targets):
        x = targets[j]
        f = 0.0
        for k in range(dim):
            f += h[k] * out_vecs[x, k]
        if labels[j] == 1:
            loss += _neg_log_sigmoid(f)
        else:
            loss += _neg_log_sigmoid(-f)
        sig = 1.0 / (1.0 + np.exp(-f))
        g = (labels[j] - sig) * lr
        for k in range(dim):
            neu1e[k] += g * out_vecs[x, k]
        if train_words:
            for k in range(dim):
                out_vecs[x, k] += g * h[k]
    for k in range(dim):
        doc_vecs[d, k] += neu1e[k] * inv
    if train_words:
        for c in range(n_ctx):
            w = ctx[c]
            for k in range(dim):
                word_vecs[w, k] += neu1e[k] * inv
    return loss


@njit(cache=True)
def run_walks(doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, walk_ids, cum,
              window, negative, lr_from, lr_to, state, train_words, shrink=False):
    """Train over ``walk_ids`` in order; lr moves linearly from lr_from to lr_to.

    With ``shrink`` each position uses a context span drawn uniformly from
    ``1..window`` (the word2vec convention), otherwise the full window.

    Returns ``(loss_sum, n_positions, bad_step)``; ``bad_step`` is -1 unless a
    non-finite loss was hit, in which case training stops at that step.
    """
    dim = doc_vecs.shape[1]
    h = np.empty(dim)
    neu1e = np.empty(dim)
    ctx = np.empty(2 * window, dtype=np.int64)
    targets = np.empty(negative + 1, dtype=np.int64)
    labels = np.empty(negative + 1, dtype=np.int64)

    total = 0
    for wi in walk_ids:
        total += starts[wi + 1] - starts[wi]
    step = 0
    loss_sum = 0.0
    for wi in walk_ids:
        a = starts[wi]
        b = starts[wi + 1]
        d = walk_doc[wi]
        for i in range(a, b):
            lr = lr_from + (lr_to - lr_from) * (step / max(total, 1))
            span = window
            if shrink:
                span = 1 + np.int64(splitmix64(state) % np.uint64(window))
            n_ctx = 0
            for j in range(max(a, i - span), min(b, i + span + 1)):
                if j != i:
                    ctx[n_ctx] = tokens[j]
                    n_ctx += 1
            center = tokens[i]
            targets[0] = center
            labels[0] = 1
            n_t = 1
            for _ in range(negative):
                x = draw_negative(cum, state)
                if x == center:
                    continue
                targets[n_t] = x
                labels[n_t] = 0
                n_t += 1
            loss = train_position(doc_vecs, d, word_vecs, ctx, n_ctx, out_vecs,
                                  targets, labels, n_t, lr, train_words, h, neu1e)
            if not np.isfinite(loss):
                return loss_sum, step, step
            loss_sum += loss
            step += 1
    return loss_sum, step, -1


@njit(cache=True, parallel=True)
def run_walks_sharded(doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, shards, shard_starts,
                      cum, window, negative, lr_from, lr_to, states, train_words, shrink):
    """Hogwild variant: shards run concurrently with unsynchronized updates.

    Results depend on thread scheduling and are not reproducible.
    """
    n = shard_starts.shape[0] - 1
    losses = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    bad = np.full(n, -1, dtype=np.int64)
    for s in prange(n):
        ids = shards[shard_starts[s]:shard_starts[s + 1]]
        l, c, b = run_walks(doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, ids, cum,
                            window, negative, lr_from, lr_to, states[s], train_words, shrink)
        losses[s] = l
        counts[s] = c
        bad[s] = b
    return losses, counts, bad


def example_loss(doc_vec, ctx_vecs, out_rows, labels):
    """Logistic loss of one example (pure numpy, for checking the kernel)."""
    h = (doc_vec + ctx_vecs.sum(axis=0)) / (1 + len(ctx_vecs))
    f = out_rows @ h
    signs = np.where(np.asarray(labels) == 1, 1.0, -1.0)
    return float(np.sum(np.logaddexp(0.0, -signs * f)))


def example_grad(doc_vec, ctx_vecs, out_rows, labels):
    """Analytic gradient of :func:`example_loss` w.r.t. (doc, context rows, output rows)."""
    n = 1 + len(ctx_vecs)
    h = (doc_vec + ctx_vecs.sum(axis=0)) / n
    f = out_rows @ h
    sig = 1.0 / (1.0 + np.exp(-f))
    err = sig - np.asarray(labels, dtype=float)  # dL/df
    grad_h = err @ out_rows
    g_doc = grad_h / n
    g_ctx = np.tile(g_doc, (len(ctx_vecs), 1))
    g_out = err[:, None] * h[None, :]
    return g_doc, g_ctx, g_out

"""Independent oracles shared by the test modules."""

import numpy as np

from ifedavg.nn import PersonalParams, SharedParams, forward, loss_weighted_nll


def random_instance(rng, D=None, K=None, n=None, scalar=None):
    D = D or int(rng.integers(1, 9))
    K = K or int(rng.integers(2, 5))
    n = n or int(rng.integers(1, 17))
    scalar = bool(rng.integers(2)) if scalar is None else scalar
    shared = SharedParams.init(D, K, rng)
    personal = PersonalParams.identity(D, K, scalar_w_out=scalar, train_b_in=True, train_w_in=True,
                                       train_b_out=True, train_w_out=True)
    personal.b_in[:] = rng.normal(scale=0.5, size=D)
    personal.w_in[:] = rng.uniform(0.5, 1.5, size=D)
    personal.b_out[:] = rng.normal(scale=0.5, size=K)
    personal.w_out[:] = rng.uniform(0.5, 1.5, size=personal.w_out.shape)
    X = rng.normal(size=(n, D))
    y = rng.integers(0, K, size=n)
    cw = rng.uniform(0.2, 2.0, size=K)
    return shared, personal, X, y, cw


def _batched_loss(params, X, y, cw, masks=None):
    """Weighted NLL for a stack of parameter sets (leading axis), written independently of ifedavg.nn."""
    a = (X + params["b_in"][:, None, :]) * params["w_in"][:, None, :]
    if masks is not None:
        a = a * masks[0]
    a = np.tanh(a @ params["w1"] + params["b1"][:, None, :])
    if masks is not None:
        a = a * masks[1]
    a = np.tanh(a @ params["w2"] + params["b2"][:, None, :])
    if masks is not None:
        a = a * masks[2]
    z = a @ params["w3"] + params["b3"][:, None, :]
    out = (z + params["b_out"][:, None, :]) * params["w_out"][:, None, :]
    top = out.max(axis=2, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(out - top).sum(axis=2))
    picked = out[:, np.arange(len(y)), y]
    return np.mean(cw[y] * (lse - picked), axis=1)


def numeric_grads(shared, personal, X, y, cw, eps=1e-5, masks=None, chunk=64):
    """Central differences of the weighted NLL for every trainable entry."""
    D, K = shared.w1.shape[0], shared.w3.shape[1]
    if personal is None:
        personal = PersonalParams.identity(D, K, scalar_w_out=False, train_b_in=False, train_w_in=False)
    base = dict(shared.arrays())
    base.update(b_in=personal.b_in, w_in=personal.w_in, b_out=personal.b_out, w_out=personal.w_out)
    trainable = list(shared.arrays()) + list(personal.trainable())
    y = np.asarray(y)
    cw = np.asarray(cw, dtype=float)

    # the oracle's own forward must agree with the package at the base point
    train = masks is not None
    ref_out, _ = forward(shared, personal, X, train_mode=train, masks=masks)
    ref = loss_weighted_nll(ref_out, y, cw)
    mine = _batched_loss({k: v[None] for k, v in base.items()}, X, y, cw, masks)[0]
    assert abs(mine - ref) <= 1e-10 * max(1.0, abs(ref)), (mine, ref)

    grads = {}
    for name in trainable:
        p = base[name]
        flat = np.zeros(p.size)
        for start in range(0, p.size, chunk):
            idx = np.arange(start, min(start + chunk, p.size))
            stack = np.repeat(p.reshape(1, -1), 2 * len(idx), axis=0)
            stack[np.arange(len(idx)), idx] += eps
            stack[len(idx) + np.arange(len(idx)), idx] -= eps
            params = {k: v[None] for k, v in base.items()}
            params[name] = stack.reshape((2 * len(idx),) + p.shape)
            losses = _batched_loss(params, X, y, cw, masks)
            flat[idx] = (losses[: len(idx)] - losses[len(idx):]) / (2 * eps)
        grads[name] = flat.reshape(p.shape)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest element-wise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_confusion(y_true, y_pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return cm


def brute_f1_weighted(y_true, y_pred):
    k = max(max(y_true), max(y_pred)) + 1
    cm = brute_confusion(y_true, y_pred, k)
    total, acc = 0, 0.0
    for c in range(k):
        tp = cm[c][c]
        fn = sum(cm[c]) - tp
        fp = sum(cm[r][c] for r in range(k)) - tp
        f1 = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        support = tp + fn
        acc += f1 * support
        total += support
    return acc / total


def brute_balanced_accuracy(y_true, y_pred):
    k = max(max(y_true), max(y_pred)) + 1
    cm = brute_confusion(y_true, y_pred, k)
    recalls = [cm[c][c] / sum(cm[c]) for c in range(k) if sum(cm[c]) > 0]
    return sum(recalls) / len(recalls)


def brute_auc_pair(pos, neg):
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def brute_auc_ovo(y, scores):
    scores = np.asarray(scores)
    if scores.ndim == 1:
        return brute_auc_pair(scores[y == 1], scores[y == 0])
    if scores.shape[1] == 2:
        return brute_auc_pair(scores[y == 1, 1], scores[y == 0, 1])
    vals = []
    k = scores.shape[1]
    for i in range(k):
        for j in range(k):
            if i != j and (y == i).any() and (y == j).any():
                vals.append(brute_auc_pair(scores[y == i, i], scores[y == j, i]))
    return sum(vals) / len(vals)

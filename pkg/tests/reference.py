"""Plain-numpy single-session re-statement of the encoder, used as an oracle.

Written loop-style on purpose: no padding, no flat indices, no tape.
"""

import numpy as np


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def graph(items):
    nodes = []
    for x in items:
        if x not in nodes:
            nodes.append(x)
    n = len(nodes)
    c = np.zeros((n, n))
    for a, b in zip(items, items[1:]):
        c[nodes.index(a), nodes.index(b)] += 1
    a_out = np.array([row / row.sum() if row.sum() else row for row in c])
    a_in = np.array([row / row.sum() if row.sum() else row for row in c.T])
    return nodes, a_in, a_out


def encode_one(items, p, layers=1):
    """``p`` maps parameter names to arrays."""
    nodes, a_in, a_out = graph(list(items))
    d = p["item_embeddings"].shape[1]
    h0 = np.array([p["item_embeddings"][x] for x in nodes])
    star = h0.mean(axis=0)
    h = h0
    for _ in range(layers):
        m = np.concatenate([a_in @ (h @ p["W_in"] + p["b_in"]), a_out @ (h @ p["W_out"] + p["b_out"])], axis=1)
        hh = np.zeros_like(h)
        for i in range(len(nodes)):
            z = sig(p["W_z"] @ m[i] + p["U_z"] @ h[i])
            r = sig(p["W_r"] @ m[i] + p["U_r"] @ h[i])
            cand = np.tanh(p["W_h"] @ m[i] + p["U_h"] @ (r * h[i]))
            hh[i] = (1 - z) * h[i] + z * cand
        blended = np.zeros_like(hh)
        for i in range(len(nodes)):
            alpha = (p["W_q1"] @ hh[i]) @ (p["W_k1"] @ star) / np.sqrt(d)
            blended[i] = (1 - alpha) * hh[i] + alpha * star
        h = blended
        scores = np.array([(p["W_k2"] @ h[i]) @ (p["W_q2"] @ star) / np.sqrt(d) for i in range(len(nodes))])
        beta = np.exp(scores - scores.max())
        beta /= beta.sum()
        star = sum(beta[i] * h[i] for i in range(len(nodes)))
    hf = np.zeros_like(h)
    for i in range(len(nodes)):
        g = sig(p["W_hw"] @ np.concatenate([h0[i], h[i]]))
        hf[i] = g * h0[i] + (1 - g) * h[i]
    u = np.array([hf[nodes.index(x)] + p["position_embeddings"][pos] for pos, x in enumerate(items)])
    last = u[-1]
    pooled = np.zeros(d)
    for i in range(len(items)):
        gamma = p["W_0"] @ sig(p["W_1"] @ u[i] + p["W_2"] @ star + p["W_3"] @ last + p["b_0"])
        pooled += gamma * u[i]
    return np.concatenate([pooled, last])


def layer_norm(v):
    c = v - v.mean()
    return c / np.sqrt((c * c).mean())


def sim(a, b):
    return float(layer_norm(a) @ layer_norm(b))


def main_ce(t_rows, targets, emb, tau):
    """Mean over examples of -log softmax_j(sim(t, E_j)/tau)[target], by enumeration."""
    total = 0.0
    for t, y in zip(t_rows, targets):
        logits = [sim(t, e) / tau for e in emb]
        top = max(logits)
        lse = top + np.log(sum(np.exp(v - top) for v in logits))
        total += lse - logits[y]
    return total / len(targets)


def multi_positive(z, m, n, tau, exclude_self=False):
    """Full pairwise enumeration of the multi-positive loss.

    ``z`` rows are method-major: row ``a*n + i`` is method ``a`` on session ``i``.
    Queries are the first method's views.
    """
    total = 0.0
    for i in range(n):
        q = z[i]
        keys = [k for k in range(m * n) if not (exclude_self and k == i)]
        logits = {k: sim(q, z[k]) / tau for k in keys}
        top = max(logits.values())
        lse = top + np.log(sum(np.exp(v - top) for v in logits.values()))
        positives = [a * n + i for a in range(m) if not (exclude_self and a == 0)]
        total += sum(lse - logits[k] for k in positives) / len(positives)
    return total / n

# Frame-synchronous kernels.  Sums run in probability space with per-frame
# rescaling; Viterbi runs in log space.  Epsilon arcs arrive sorted in
# topological order of their source state.

import math

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _eps_forward(vec, eps_src, eps_dst, eps_p):
    for i in range(eps_src.shape[0]):
        vec[eps_dst[i]] += vec[eps_src[i]] * eps_p[i]


@njit(cache=True)
def _eps_backward(vec, eps_src, eps_dst, eps_p):
    for i in range(eps_src.shape[0] - 1, -1, -1):
        vec[eps_src[i]] += vec[eps_dst[i]] * eps_p[i]


@njit(cache=True)
def _emissions(loglik):
    """Per-frame max-shifted likelihoods and the shifts."""
    T, P = loglik.shape
    shift = np.empty(T)
    e = np.empty((T, P))
    for t in range(T):
        m = loglik[t, 0]
        for p in range(1, P):
            if loglik[t, p] > m:
                m = loglik[t, p]
        shift[t] = m
        for p in range(P):
            e[t, p] = math.exp(loglik[t, p] - m)
    return e, shift


SAFE_MIN = 1e-250


@njit(cache=True)
def forward(num_states, start, final, src, dst, lab, w, eps_src, eps_dst, eps_w, loglik):
    """Per-frame normalised forward probabilities and the total log-likelihood.
    Returns ``-inf`` when a frame's mass falls below ``SAFE_MIN``; callers
    then redo the computation in log space."""
    T = loglik.shape[0]
    e, shift = _emissions(loglik)
    p = np.exp(w)
    ep = np.exp(eps_w)
    alpha = np.zeros((T + 1, num_states))
    alpha[0, start] = 1.0
    _eps_forward(alpha[0], eps_src, eps_dst, ep)
    log_total = 0.0
    for t in range(T):
        prev = alpha[t]
        cur = alpha[t + 1]
        for a in range(src.shape[0]):
            v = prev[src[a]]
            if v != 0.0:
                cur[dst[a]] += v * p[a] * e[t, lab[a]]
        _eps_forward(cur, eps_src, eps_dst, ep)
        z = cur.sum()
        if z < SAFE_MIN:
            return alpha, NEG_INF
        cur /= z
        log_total += math.log(z) + shift[t]
    fmax = NEG_INF
    for s in range(num_states):
        if final[s] > fmax:
            fmax = final[s]
    if fmax == NEG_INF:
        return alpha, NEG_INF
    z = 0.0
    for s in range(num_states):
        z += alpha[T, s] * math.exp(final[s] - fmax)
    if z < SAFE_MIN:
        return alpha, NEG_INF
    return alpha, log_total + math.log(z) + fmax


@njit(cache=True)
def backward(num_states, final, src, dst, lab, w, eps_src, eps_dst, eps_w, loglik):
    """Per-frame normalised backward probabilities."""
    T = loglik.shape[0]
    e, _ = _emissions(loglik)
    p = np.exp(w)
    ep = np.exp(eps_w)
    beta = np.zeros((T + 1, num_states))
    fmax = final.max()
    for s in range(num_states):
        beta[T, s] = math.exp(final[s] - fmax)
    _eps_backward(beta[T], eps_src, eps_dst, ep)
    beta[T] /= beta[T].sum()
    for t in range(T - 1, -1, -1):
        nxt = beta[t + 1]
        cur = beta[t]
        for a in range(src.shape[0]):
            v = nxt[dst[a]]
            if v != 0.0:
                cur[src[a]] += v * p[a] * e[t, lab[a]]
        _eps_backward(cur, eps_src, eps_dst, ep)
        z = cur.sum()
        if z > 0.0:
            cur /= z
    return beta


@njit(cache=True)
def occupancies(alpha, beta, src, dst, lab, w, loglik):
    """Pdf posteriors; every path crosses exactly one labeled arc per frame,
    so each frame's arc posteriors are normalised to sum to one.  The flag
    is false if some frame's unnormalised mass came near underflow."""
    T, P = loglik.shape
    e, _ = _emissions(loglik)
    p = np.exp(w)
    gamma = np.zeros((T, P))
    ok = True
    for t in range(T):
        z = 0.0
        for a in range(src.shape[0]):
            v = alpha[t, src[a]] * beta[t + 1, dst[a]]
            if v != 0.0:
                v *= p[a] * e[t, lab[a]]
                gamma[t, lab[a]] += v
                z += v
        if z < SAFE_MIN:
            ok = False
        if z > 0.0:
            for q in range(P):
                gamma[t, q] /= z
    return gamma, ok


# log-space versions, used when the scaled kernels lose too much range


@njit(cache=True)
def _logadd(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _eps_forward_log(vec, eps_src, eps_dst, eps_w):
    for i in range(eps_src.shape[0]):
        v = vec[eps_src[i]]
        if v != NEG_INF:
            vec[eps_dst[i]] = _logadd(vec[eps_dst[i]], v + eps_w[i])


@njit(cache=True)
def _eps_backward_log(vec, eps_src, eps_dst, eps_w):
    for i in range(eps_src.shape[0] - 1, -1, -1):
        v = vec[eps_dst[i]]
        if v != NEG_INF:
            vec[eps_src[i]] = _logadd(vec[eps_src[i]], v + eps_w[i])


@njit(cache=True)
def forward_log(num_states, start, src, dst, lab, w, eps_src, eps_dst, eps_w, loglik):
    T = loglik.shape[0]
    alpha = np.full((T + 1, num_states), NEG_INF)
    alpha[0, start] = 0.0
    _eps_forward_log(alpha[0], eps_src, eps_dst, eps_w)
    for t in range(T):
        prev = alpha[t]
        cur = alpha[t + 1]
        for a in range(src.shape[0]):
            v = prev[src[a]]
            if v != NEG_INF:
                cur[dst[a]] = _logadd(cur[dst[a]], v + w[a] + loglik[t, lab[a]])
        _eps_forward_log(cur, eps_src, eps_dst, eps_w)
    return alpha


@njit(cache=True)
def backward_log(num_states, final, src, dst, lab, w, eps_src, eps_dst, eps_w, loglik):
    T = loglik.shape[0]
    beta = np.full((T + 1, num_states), NEG_INF)
    beta[T, :] = final
    _eps_backward_log(beta[T], eps_src, eps_dst, eps_w)
    for t in range(T - 1, -1, -1):
        nxt = beta[t + 1]
        cur = beta[t]
        for a in range(src.shape[0]):
            v = nxt[dst[a]]
            if v != NEG_INF:
                cur[src[a]] = _logadd(cur[src[a]], v + w[a] + loglik[t, lab[a]])
        _eps_backward_log(cur, eps_src, eps_dst, eps_w)
    return beta


@njit(cache=True)
def occupancies_log(alpha, beta, total, src, dst, lab, w, loglik):
    T, P = loglik.shape
    gamma = np.zeros((T, P))
    for t in range(T):
        for a in range(src.shape[0]):
            v = alpha[t, src[a]]
            b = beta[t + 1, dst[a]]
            if v != NEG_INF and b != NEG_INF:
                gamma[t, lab[a]] += math.exp(v + w[a] + loglik[t, lab[a]] + b - total)
    return gamma


@njit(cache=True)
def _eps_backward_max(vec, eps_src, eps_dst, eps_w):
    for i in range(eps_src.shape[0] - 1, -1, -1):
        v = vec[eps_dst[i]] + eps_w[i]
        if v > vec[eps_src[i]]:
            vec[eps_src[i]] = v


@njit(cache=True)
def _eps_forward_max(vec, eps_src, eps_dst, eps_w):
    for i in range(eps_src.shape[0]):
        v = vec[eps_src[i]] + eps_w[i]
        if v > vec[eps_dst[i]]:
            vec[eps_dst[i]] = v


@njit(cache=True)
def viterbi(num_states, start, final, src, dst, lab, w, eps_src, eps_dst, eps_w, loglik, rel_tol):
    """Best label sequence; among (near-)ties the lexicographically smallest.

    Best-suffix scores are computed backward, then the label sequence is
    fixed greedily from the first frame, keeping the set of states reachable
    by optimal prefixes that carry the chosen labels.
    """
    T = loglik.shape[0]
    vbeta = np.full((T + 1, num_states), NEG_INF)
    vbeta[T, :] = final
    _eps_backward_max(vbeta[T], eps_src, eps_dst, eps_w)
    for t in range(T - 1, -1, -1):
        for a in range(src.shape[0]):
            v = vbeta[t + 1, dst[a]] + w[a] + loglik[t, lab[a]]
            if v > vbeta[t, src[a]]:
                vbeta[t, src[a]] = v
        _eps_backward_max(vbeta[t], eps_src, eps_dst, eps_w)
    best = vbeta[0, start]
    labels = np.full(T, -1, dtype=np.int64)
    if best == NEG_INF:
        return labels, best
    tol = rel_tol * max(1.0, abs(best))
    cur = np.full(num_states, NEG_INF)
    cur[start] = 0.0
    _eps_forward_max(cur, eps_src, eps_dst, eps_w)
    big = np.iinfo(np.int64).max
    for t in range(T):
        chosen = big
        for a in range(src.shape[0]):
            p = cur[src[a]]
            if p == NEG_INF:
                continue
            if p + w[a] + loglik[t, lab[a]] + vbeta[t + 1, dst[a]] >= best - tol and lab[a] < chosen:
                chosen = lab[a]
        nxt = np.full(num_states, NEG_INF)
        for a in range(src.shape[0]):
            if lab[a] != chosen:
                continue
            p = cur[src[a]]
            if p == NEG_INF:
                continue
            v = p + w[a] + loglik[t, lab[a]]
            if v + vbeta[t + 1, dst[a]] >= best - tol and v > nxt[dst[a]]:
                nxt[dst[a]] = v
        _eps_forward_max(nxt, eps_src, eps_dst, eps_w)
        labels[t] = chosen
        cur = nxt
    return labels, best

"""Test doubles and independent oracles shared across the test modules."""
from __future__ import annotations

from functools import lru_cache
from types import SimpleNamespace

import numpy as np

from sqat.model import Generation


class AffineSequenceModel:
    """Logits ``F^t = A_t x + b_t`` at every position, independent of the prefix.

    Implements the same numpy interface the attacks use on the recognizer, so
    every linearization is exact.
    """

    def __init__(self, A, b, shape, eos=None):
        self.A = np.asarray(A, dtype=np.float64)        # (T, v, n)
        self.b = np.asarray(b, dtype=np.float64)        # (T, v)
        self.shape = tuple(shape)
        T, v, n = self.A.shape
        assert n == int(np.prod(self.shape))
        self.vocab_size = v
        eos = v - 1 if eos is None else eos
        self.charset = SimpleNamespace(bos=v - 3, pad=v - 2, eos=eos, specials=(v - 3, v - 2, eos))

    @classmethod
    def random(cls, rng, T=4, v=6, shape=(3, 5), scale=1.0):
        n = int(np.prod(shape))
        return cls(scale * rng.standard_normal((T, v, n)), rng.standard_normal((T, v)), shape)

    def logits(self, image):
        return self.A @ np.asarray(image, dtype=np.float64).ravel() + self.b

    def decode_text(self, labels):
        out = []
        for t in labels:
            if t == self.charset.eos:
                break
            out.append(chr(ord("a") + int(t)))
        return "".join(out)

    def generate(self, image):
        F = self.logits(image)
        toks = []
        for t in range(F.shape[0]):
            toks.append(int(np.argmax(F[t])))
            if toks[-1] == self.charset.eos:
                break
        tokens = np.array(toks, dtype=np.int64)
        return Generation(tokens, F[: len(toks)].copy(), self.decode_text(tokens))

    def generate_batch(self, images):
        return [self.generate(x) for x in images]

    def sequence_logits(self, image, labels):
        return self.logits(image)[: len(labels)]

    def logit_gradients(self, image, labels, weights):
        W = np.asarray(weights, dtype=np.float64)
        single = W.ndim == 2
        if single:
            W = W[None]
        T = len(labels)
        g = np.einsum("btk,tkn->bn", W, self.A[:T]).reshape((len(W),) + self.shape)
        return g[0] if single else g

    def input_gradient(self, image, request):
        labels = list(request.labels)
        T = len(labels)
        if request.kind == "cross_entropy":
            F = self.logits(image)[:T]
            p = np.exp(F - F.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(T), labels] -= 1.0
            return np.einsum("tk,tkn->n", p, self.A[:T]).reshape(self.shape)
        w = np.zeros((T, self.vocab_size))
        w[request.position, request.cls] = 1.0
        return self.logit_gradients(image, labels, w)


def qp_oracle(d, G, h, iters=20000):
    """Projected gradient (FISTA) on the dual of ``min ||d+x||^2 s.t. Gx <= h``.

    Dual: ``min_{mu>=0} 1/4 mu^T G G^T mu + mu^T (h + G d)``, primal
    ``x = -G^T mu / 2 - d``.
    """
    Q = G @ G.T / 2.0
    q = h + G @ d
    L = max(np.linalg.eigvalsh(Q).max(), 1e-12)
    mu = np.zeros(len(h))
    z, s = mu.copy(), 1.0
    for _ in range(iters):
        mu_new = np.maximum(z - (Q @ z + q) / L, 0.0)
        s_new = (1 + np.sqrt(1 + 4 * s * s)) / 2
        z = mu_new + (s - 1) / s_new * (mu_new - mu)
        mu, s = mu_new, s_new
    return -G.T @ mu / 2 - d, mu


def random_feasible_qp(rng, n=20, m=5):
    """Instance with a known strictly feasible point ``x0``."""
    d = rng.standard_normal(n)
    G = rng.standard_normal((m, n))
    x0 = rng.standard_normal(n)
    h = G @ x0 + rng.uniform(0.1, 1.0, m)
    return d, G, h


def edit_distance_recursive(a: str, b: str) -> int:
    """Recursion over all three edit operations at every cell (memoized on suffixes)."""
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)
    return go(0, 0)

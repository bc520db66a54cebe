"""FGSM, DeepFool, Backward-Error and Carlini-Wagner attacks on a sequence model.

The attacks only use this model interface (see :class:`sqat.model.Recognizer`):

``generate(image)``
    greedy decoding, returns ``.tokens`` (labels t_1..t_{k+1}), ``.logits``
    and ``.text``
``sequence_logits(image, labels)``
    teacher-forced logits reproducing ``labels``
``logit_gradients(image, labels, weights)``
    pixel gradients of weighted logit sums, teacher-forced on ``labels``
``input_gradient(image, request)``
    pixel gradient of a :class:`~sqat.model.GradientRequest`
``vocab_size``

Positions are 0-based throughout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import qpsolve
from .model import GradientRequest

log = logging.getLogger(__name__)


@dataclass
class Perturbation:
    delta: np.ndarray
    method: str
    iterations: int
    converged: bool
    info: dict = field(default_factory=dict)
    l2_norm: float = field(init=False)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.l2_norm = float(np.linalg.norm(self.delta))


@dataclass
class AttackTarget:
    labels: np.ndarray
    position: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)


@dataclass
class BoundaryLinearization:
    w: np.ndarray
    f: float
    k: int
    t: int


def changed_positions(original, current) -> np.ndarray:
    """Boolean mask over ``max(len)`` positions; trailing positions count as changed."""
    original = np.asarray(original)
    current = np.asarray(current)
    n = min(len(original), len(current))
    mask = np.ones(max(len(original), len(current)), dtype=bool)
    mask[:n] = original[:n] != current[:n]
    return mask


def select_target(logit_row, rank: int = 10, exclude=()) -> int:
    """Index of the ``rank``-th largest logit, ties toward the lower index."""
    row = np.asarray(logit_row, dtype=np.float64)
    allowed = np.setdiff1d(np.arange(row.size), np.asarray(exclude, dtype=np.int64))
    if rank < 1 or rank > allowed.size:
        raise ValueError(f"rank {rank} outside 1..{allowed.size}")
    order = allowed[np.argsort(-row[allowed], kind="stable")]
    return int(order[rank - 1])


def single_token_target(model, image, rng: np.random.Generator, rank: int = 10) -> AttackTarget:
    """Replace one uniformly chosen character position by its rank-th class.

    Only character positions are eligible and special tokens are never
    chosen as the replacement, so the target is a plain text line.
    """
    g = model.generate(image)
    specials = tuple(model.charset.specials)
    positions = [t for t, tok in enumerate(g.tokens) if tok not in specials]
    if not positions:
        raise ValueError("clean decoding has no character positions to target")
    t = positions[int(rng.integers(len(positions)))]
    labels = g.tokens.copy()
    labels[t] = select_target(g.logits[t], rank, exclude=specials)
    return AttackTarget(labels, t)


def _sign_direction(grad, method, flip=False):
    delta = np.sign(grad)
    if flip:
        delta = -delta
    degenerate = not np.any(delta)
    if degenerate:
        log.warning("%s: zero input gradient, returning a zero perturbation", method)
    return Perturbation(delta, method, 1, not degenerate, {"degenerate": degenerate})


def fgsm_untargeted(model, image) -> Perturbation:
    """Unit-scale ``sign(grad L(x, L_out))`` with ``L_out`` the clean decoding."""
    labels = model.generate(image).tokens
    grad = model.input_gradient(image, GradientRequest.cross_entropy(labels))
    return _sign_direction(grad, "fgsm")


def fgsm_targeted(model, image, target: AttackTarget) -> Perturbation:
    grad = model.input_gradient(image, GradientRequest.cross_entropy(target.labels))
    return _sign_direction(grad, "fgsm", flip=True)


# -- DeepFool ----------------------------------------------------------------

def deepfool_linearize(model, image, labels, logits, positions, top_amount: int = 1):
    """Linearized boundaries against the top competitors at each position.

    Returns one list of :class:`BoundaryLinearization` per position in
    ``positions``; ``labels[t]`` plays the role of the current class.
    """
    v = logits.shape[1]
    pairs = []
    for t in positions:
        k_hat = int(labels[t])
        top = np.argsort(-logits[t], kind="stable")[: top_amount + 1]
        pairs.extend((t, int(k), k_hat) for k in top if k != k_hat)
    if not pairs:
        return {t: [] for t in positions}
    W = np.zeros((len(pairs), len(labels), v))
    for b, (t, k, k_hat) in enumerate(pairs):
        W[b, t, k] += 1.0
        W[b, t, k_hat] -= 1.0
    grads = model.logit_gradients(image, labels, W)
    out = {t: [] for t in positions}
    for (t, k, k_hat), w in zip(pairs, grads):
        out[t].append(BoundaryLinearization(w, float(logits[t, k] - logits[t, k_hat]), k, t))
    return out


def deepfool_step(candidates):
    """Closest linearized boundary ``k_bar`` and the step ``r`` onto it.

    Returns ``None`` when every candidate has a zero gradient difference.
    """
    best = None
    for lin in candidates:
        wn = np.linalg.norm(lin.w)
        if wn == 0:
            continue
        score = abs(lin.f) / wn
        if best is None or score < best[0]:
            best = (score, lin, wn)
    if best is None:
        return None
    _, lin, wn = best
    return lin.k, (abs(lin.f) / wn**2) * lin.w


def deepfool(model, image, top_amount: int = 1, max_iters: int = 1) -> Perturbation:
    x = np.asarray(image, dtype=np.float64)
    g = model.generate(x)
    org, labels, logits = g.tokens, g.tokens, g.logits
    total = np.zeros_like(x)
    skipped = []
    it = 0
    while it < max_iters:
        n = min(len(org), len(labels))
        unchanged = [t for t in range(n) if org[t] == labels[t]]
        if not unchanged:
            break
        lins = deepfool_linearize(model, x + total, labels, logits, unchanged, top_amount)
        u = np.zeros_like(x)
        for t in unchanged:
            step = deepfool_step(lins[t])
            if step is None:
                skipped.append((it + 1, t))
                continue
            u += step[1]
        total = total + u
        it += 1
        g = model.generate(x + total)
        labels, logits = g.tokens, g.logits
    changed = changed_positions(org, labels)
    return Perturbation(total, "deepfool", it, bool(changed.all()),
                        {"skipped": skipped, "changed_fraction": float(changed.mean())})


# -- Backward error ----------------------------------------------------------

def backward_error(model, image, target: AttackTarget, alpha: float = 0.5, iterations: int = 5,
                   margin: float = 0.0, qp_tol: float = 1e-8, qp_max_iters: int = 10000) -> Perturbation:
    """Iterated minimum-norm linearized misclassification toward ``target``.

    Each differing position contributes one constraint comparing only the
    target class with the current class.  No box constraint on the pixels.
    """
    x = np.asarray(image, dtype=np.float64)
    goal = target.labels
    g = model.generate(x)
    labels, logits = g.tokens, g.logits
    total = np.zeros_like(x)
    qp_calls = 0
    status = None
    it = 0
    for it in range(1, iterations + 1):
        diff = np.flatnonzero(changed_positions(labels, goal))
        if diff.size == 0:
            it -= 1
            break
        n = min(len(labels), len(goal))
        rows = [int(t) for t in diff if t < n]
        if not rows:
            it -= 1
            status = "no_linearizable_position"
            break
        W = np.zeros((len(rows), len(labels), logits.shape[1]))
        h = np.empty(len(rows))
        for j, t in enumerate(rows):
            orig, targ = int(labels[t]), int(goal[t])
            W[j, t, orig] += 1.0
            W[j, t, targ] -= 1.0
            h[j] = logits[t, targ] - logits[t, orig] - margin
        G = model.logit_gradients(x + total, labels, W).reshape(len(rows), -1)
        sol = qpsolve.solve(qpsolve.QpProblem(total.ravel(), G, h), tol=qp_tol, max_iters=qp_max_iters)
        qp_calls += 1
        if not sol.optimal:
            status = sol.status
            it -= 1
            break
        total = total + alpha * sol.delta.reshape(x.shape)
        g = model.generate(x + total)
        labels, logits = g.tokens, g.logits
    reached = not changed_positions(labels, goal).any()
    return Perturbation(total, "be", it, reached and status is None,
                        {"qp_calls": qp_calls, "qp_status": status, "reached": reached})


# -- Carlini-Wagner ----------------------------------------------------------

def cw_init(image, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Move each pixel by +-eta, clip to [0,1], then push 0/1 to eta/1-eta."""
    x0 = np.clip(image + eta * rng.choice([-1.0, 1.0], size=image.shape), 0.0, 1.0)
    x0[x0 == 0.0] = eta
    x0[x0 == 1.0] = 1.0 - eta
    return x0


def to_pixels(w):
    return 0.5 * (np.tanh(w) + 1.0)


def hinge_terms(logits, labels, targeted: bool):
    """Per-position margins and the competing class ``argmax_{k != L_t}``."""
    T = len(labels)
    rows = logits[:T].copy()
    own = rows[np.arange(T), labels]
    rows[np.arange(T), labels] = -np.inf
    rival = np.argmax(rows, axis=1)
    best_other = rows[np.arange(T), rival]
    margin = best_other - own if targeted else own - best_other
    return margin, rival


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, shape, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, w, grad):
        b1, b2 = self.betas
        grad = grad + self.wd * w
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cw_attack(model, image, mode: str, target: AttackTarget, c: float, eta: float,
              lr: float = 0.002, weight_decay: float = 1e-5, max_iters: int = 30,
              patience: int = 5, seed: int = 0) -> Perturbation:
    """Minimize ``||dx||^2 + c f(x + dx, L)`` over tanh-space variables with Adam.

    ``target.labels`` are the target labels in targeted mode and the clean
    labels in untargeted mode.  Targeted runs stop as soon as greedy decoding
    of ``x + dx`` equals the target; untargeted runs stop after ``patience``
    steps without improving the loss and return the best iterate.
    """
    if mode not in ("targeted", "untargeted"):
        raise ValueError(f"mode must be 'targeted' or 'untargeted', not {mode!r}")
    targeted = mode == "targeted"
    x = np.asarray(image, dtype=np.float64)
    labels = target.labels
    rng = np.random.default_rng(seed)
    w = np.arctanh(2.0 * cw_init(x, eta, rng) - 1.0)
    opt = Adam(w.shape, lr, weight_decay)
    best_loss, best_delta, best_step = np.inf, None, 0
    stale = 0
    steps = 0
    reason = "max_iters"
    while True:
        xp = to_pixels(w)
        delta = xp - x
        logits = model.sequence_logits(xp, labels)
        margin, rival = hinge_terms(logits, labels, targeted)
        loss = float(np.sum(delta * delta) + c * np.maximum(margin, 0).sum())
        if not np.isfinite(loss):
            reason = "non_finite"
            break
        if targeted and np.all(margin < 0) and np.array_equal(model.generate(x + delta).tokens, labels):
            best_loss, best_delta, best_step = loss, delta, steps
            reason = "target_reached"
            break
        if loss < best_loss:
            best_loss, best_delta, best_step = loss, delta, steps
            stale = 0
        else:
            stale += 1
            if not targeted and stale >= patience:
                reason = "patience"
                break
        if steps >= max_iters:
            break
        active = margin > 0
        grad_x = 2.0 * delta
        if active.any():
            W = np.zeros_like(logits)
            t = np.flatnonzero(active)
            sign = 1.0 if targeted else -1.0
            W[t, rival[t]] += sign
            W[t, labels[t]] -= sign
            grad_x = grad_x + c * model.logit_gradients(xp, labels, W)
        grad_w = grad_x * 0.5 * (1.0 - np.tanh(w) ** 2)
        w = opt.step(w, grad_w)
        steps += 1

    if best_delta is None:
        best_delta = np.zeros_like(x)
    if targeted:
        converged = reason == "target_reached"
    else:
        converged = reason != "non_finite" and bool(
            changed_positions(labels, model.generate(x + best_delta).tokens).any())
    return Perturbation(best_delta, "cw", steps, converged,
                        {"mode": mode, "loss": best_loss, "best_step": best_step, "stop": reason})

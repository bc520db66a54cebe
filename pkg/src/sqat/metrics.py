"""Character error rate, relative-scale evaluation and sweep curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

UNTARGETED_STEPS = list(range(100))
UNTARGETED_GRID = [n / 1e4 for n in UNTARGETED_STEPS]
TARGETED_STEPS = list(range(100)) + list(range(100, 400, 10))
TARGETED_GRID = [n / 1e5 for n in TARGETED_STEPS]

CURVE_COLUMNS = ["epsilon", "value", "n_images", "metric_kind"]


@dataclass(frozen=True)
class EditCosts:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        return self.distance / self.reference_length


def edit_costs(reference: str, hypothesis: str) -> EditCosts:
    """Levenshtein alignment with unit costs, split into S/D/I counts.

    Among minimal alignments the backtrace prefers substitution, then
    deletion, then insertion.
    """
    n, m = len(reference), len(hypothesis)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = reference[i - 1]
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ri != hypothesis[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = de = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            de += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCosts(int(s), de, ins, n)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j - 1] + (ca != cb), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        raise ValueError("CER is undefined for an empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


def mean_cer(references, hypotheses) -> float:
    if len(references) != len(hypotheses):
        raise ValueError("reference/hypothesis count mismatch")
    return float(np.mean([cer(r, h) for r, h in zip(references, hypotheses)]))


def scaled_image(image, delta, epsilon: float) -> np.ndarray:
    """``x + eps * ||x|| / ||dx|| * dx``, no clipping."""
    image = np.asarray(image, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if epsilon == 0:
        return image.copy()
    dn = np.linalg.norm(delta)
    if dn == 0:
        raise ValueError("cannot rescale a zero perturbation to a nonzero epsilon")
    return image + (epsilon * np.linalg.norm(image) / dn) * delta


def scaled_eval(model, image, delta, epsilon: float):
    """Decode the relatively scaled perturbed image; returns (text, tokens)."""
    g = model.generate(scaled_image(image, delta, epsilon))
    return g.text, g.tokens


def _check_grid(grid):
    grid = [float(e) for e in grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be nonempty and strictly increasing")
    return grid


def _delta_array(delta):
    return np.asarray(getattr(delta, "delta", delta), dtype=np.float64)


@dataclass
class SweepRecord:
    image_id: int
    epsilon: float
    text: str
    cer_original: float
    cer_target: float | None = None


@dataclass
class SweepCurve:
    grid: list
    values: list
    metric_kind: str
    n_images: int
    records: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(CURVE_COLUMNS)
            for e, v in zip(self.grid, self.values):
                wr.writerow([repr(float(e)), repr(float(v)), self.n_images, self.metric_kind])

    def write_records(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["image_id", "epsilon", "text", "cer_original", "cer_target"])
            for r in sorted(self.records, key=lambda r: (r.image_id, r.epsilon)):
                ct = "" if r.cer_target is None else repr(float(r.cer_target))
                wr.writerow([r.image_id, repr(float(r.epsilon)), r.text, repr(float(r.cer_original)), ct])


def read_curve_csv(path) -> SweepCurve:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or list(rows[0].keys()) != CURVE_COLUMNS:
        raise ValueError(f"{path}: not a curve CSV")
    kinds = {r["metric_kind"] for r in rows}
    if len(kinds) != 1:
        raise ValueError(f"{path}: mixed metric kinds {sorted(kinds)}")
    return SweepCurve([float(r["epsilon"]) for r in rows], [float(r["value"]) for r in rows],
                      kinds.pop(), int(rows[0]["n_images"]))


def _decode_grid(model, image, delta, grid, reference):
    """Texts at every grid point; eps=0 reuses the clean decoding.

    A zero perturbation leaves the image unchanged at every epsilon.
    """
    if not np.any(delta):
        return [reference] * len(grid)
    texts = [None] * len(grid)
    todo = []
    for i, e in enumerate(grid):
        if e == 0:
            texts[i] = reference
        else:
            todo.append(i)
    if todo:
        batch = np.stack([scaled_image(image, delta, grid[i]) for i in todo])
        for i, g in zip(todo, model.generate_batch(batch)):
            texts[i] = g.text
    return texts


def sweep_untargeted(model, images, deltas, grid=UNTARGETED_GRID, ids=None) -> SweepCurve:
    """Mean CER against each image's clean decoding, per epsilon."""
    grid = _check_grid(grid)
    if len(images) != len(deltas):
        raise ValueError("need exactly one perturbation per image")
    ids = list(range(len(images))) if ids is None else list(ids)
    per_eps = np.zeros((len(images), len(grid)))
    records = []
    for n, (img, d) in enumerate(zip(images, deltas)):
        reference = model.generate(img).text
        texts = _decode_grid(model, img, _delta_array(d), grid, reference)
        for k, (e, t) in enumerate(zip(grid, texts)):
            # an empty clean decoding has no defined CER; count any output as one error per char
            c = cer(reference, t) if reference else float(len(t))
            per_eps[n, k] = c
            records.append(SweepRecord(ids[n], e, t, c))
    values = per_eps.mean(axis=0).tolist() if len(images) else [0.0] * len(grid)
    return SweepCurve(grid, values, "mean_cer", len(images), records)


def cumulative_success(success: np.ndarray) -> list:
    """Fraction of rows with a success at or before each column."""
    if success.size == 0:
        return [0.0] * success.shape[1]
    return np.logical_or.accumulate(success, axis=1).mean(axis=0).tolist()


def success_ratio_curve(model, images, deltas, target_texts, grid=TARGETED_GRID,
                        ids=None, native: bool = False) -> SweepCurve:
    """Cumulative fraction of images decoded exactly as their target text.

    With ``native=True`` each perturbation is only evaluated at the size it
    was emitted with: image ``i`` counts from the first grid point that is
    at least its relative size ``||dx|| / ||x||``.
    """
    grid = _check_grid(grid)
    if not (len(images) == len(deltas) == len(target_texts)):
        raise ValueError("images, perturbations and targets must have equal length")
    ids = list(range(len(images))) if ids is None else list(ids)
    success = np.zeros((len(images), len(grid)), dtype=bool)
    records = []
    for n, (img, d, target) in enumerate(zip(images, deltas, target_texts)):
        img = np.asarray(img, dtype=np.float64)
        delta = _delta_array(d)
        reference = model.generate(img).text
        if native:
            text = model.generate(img + delta).text
            rel = float(np.linalg.norm(delta) / np.linalg.norm(img))
            ok = text == target
            first = next((k for k, e in enumerate(grid) if e >= rel), None)
            if ok and first is not None:
                success[n, first] = True
            records.append(SweepRecord(ids[n], rel, text,
                                       cer(reference, text) if reference else float(len(text)),
                                       cer(target, text)))
            continue
        texts = _decode_grid(model, img, delta, grid, reference)
        for k, (e, t) in enumerate(zip(grid, texts)):
            ct = cer(target, t)
            success[n, k] = ct == 0
            records.append(SweepRecord(ids[n], e, t,
                                       cer(reference, t) if reference else float(len(t)), ct))
    values = cumulative_success(success) if len(images) else [0.0] * len(grid)
    return SweepCurve(grid, values, "success_ratio", len(images), records)

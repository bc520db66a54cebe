"""Synthetic text-line images rendered from a built-in 5x7 bitmap font."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEIGHT = 32
WIDTH = 256
PITCH = 8
LEFT_MARGIN = 2
VSCALE = 2
TOP_ROW = 9
PAPER_LEVEL = 0.75
INK_LEVEL = 0.45
NOISE_AMPLITUDE = 0.02
MAX_BASELINE_JITTER = 2
MAX_PITCH_NOISE = 1
MIN_TEXT_LEN = 8
MAX_TEXT_LEN = 24

CHARACTERS = "abcdefghijklmnopqrstuvwxyz "

_GLYPH_ROWS = {
    "a": ".....|.....|.###.|....#|.####|#...#|.####",
    "b": "#....|#....|#.##.|##..#|#...#|#...#|####.",
    "c": ".....|.....|.###.|#....|#....|#...#|.###.",
    "d": "....#|....#|.##.#|#..##|#...#|#...#|.####",
    "e": ".....|.....|.###.|#...#|#####|#....|.###.",
    "f": "..##.|.#..#|.#...|###..|.#...|.#...|.#...",
    "g": ".....|.####|#...#|#...#|.####|....#|.###.",
    "h": "#....|#....|#.##.|##..#|#...#|#...#|#...#",
    "i": "..#..|.....|.##..|..#..|..#..|..#..|.###.",
    "j": "...#.|.....|..##.|...#.|...#.|#..#.|.##..",
    "k": "#....|#....|#..#.|#.#..|##...|#.#..|#..#.",
    "l": ".##..|..#..|..#..|..#..|..#..|..#..|.###.",
    "m": ".....|.....|##.#.|#.#.#|#.#.#|#...#|#...#",
    "n": ".....|.....|#.##.|##..#|#...#|#...#|#...#",
    "o": ".....|.....|.###.|#...#|#...#|#...#|.###.",
    "p": ".....|.....|####.|#...#|####.|#....|#....",
    "q": ".....|.....|.##.#|#..##|.####|....#|....#",
    "r": ".....|.....|#.##.|##..#|#....|#....|#....",
    "s": ".....|.....|.###.|#....|.###.|....#|####.",
    "t": ".#...|.#...|###..|.#...|.#...|.#..#|..##.",
    "u": ".....|.....|#...#|#...#|#...#|#..##|.##.#",
    "v": ".....|.....|#...#|#...#|#...#|.#.#.|..#..",
    "w": ".....|.....|#...#|#...#|#.#.#|#.#.#|.#.#.",
    "x": ".....|.....|#...#|.#.#.|..#..|.#.#.|#...#",
    "y": ".....|.....|#...#|#...#|.####|....#|.###.",
    "z": ".....|.....|#####|...#.|..#..|.#...|#####",
    " ": ".....|.....|.....|.....|.....|.....|.....",
}

FONT = {
    ch: np.array([[c == "#" for c in row] for row in rows.split("|")], dtype=bool)
    for ch, rows in _GLYPH_ROWS.items()
}


def max_text_length() -> int:
    return (WIDTH - LEFT_MARGIN - MAX_PITCH_NOISE) // PITCH


def nominal_ink(text: str) -> int:
    """Ink pixel count of ``text`` before jitter, at the rendering scale."""
    return int(sum(FONT[c].sum() for c in text)) * VSCALE


@dataclass(frozen=True)
class Charset:
    characters: str = CHARACTERS

    def __post_init__(self):
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("duplicate characters in charset")

    @property
    def bos(self) -> int:
        return len(self.characters)

    @property
    def eos(self) -> int:
        return len(self.characters) + 1

    @property
    def pad(self) -> int:
        return len(self.characters) + 2

    @property
    def size(self) -> int:
        return len(self.characters) + 3

    @property
    def specials(self) -> tuple[int, int, int]:
        return (self.bos, self.eos, self.pad)

    def index(self, ch: str) -> int:
        i = self.characters.find(ch)
        if i < 0 or len(ch) != 1:
            raise ValueError(f"character {ch!r} not in charset")
        return i

    def token_name(self, tok: int) -> str:
        if tok < len(self.characters):
            return self.characters[tok]
        return {self.bos: "<bos>", self.eos: "<eos>", self.pad: "<pad>"}[tok]


def encode_text(text: str, charset: Charset) -> list[int]:
    """``[bos, c_1, ..., c_k, eos]``."""
    return [charset.bos] + [charset.index(c) for c in text] + [charset.eos]


def decode_tokens(tokens, charset: Charset) -> str:
    """Characters up to the first eos; bos and pad are skipped."""
    out = []
    for t in tokens:
        t = int(t)
        if t == charset.eos:
            break
        if t < len(charset.characters):
            out.append(charset.characters[t])
    return "".join(out)


def render_text_line(text: str, seed: int) -> np.ndarray:
    if not text:
        raise ValueError("cannot render empty text")
    bad = [c for c in text if c not in FONT]
    if bad:
        raise ValueError(f"characters outside charset: {bad!r}")
    if len(text) > max_text_length():
        raise ValueError(f"text of length {len(text)} does not fit a {WIDTH}px line")

    rng = np.random.default_rng(seed)
    top = TOP_ROW + int(rng.integers(-MAX_BASELINE_JITTER, MAX_BASELINE_JITTER + 1))
    shifts = rng.integers(-MAX_PITCH_NOISE, MAX_PITCH_NOISE + 1, size=len(text))
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(HEIGHT, WIDTH))

    img = np.full((HEIGHT, WIDTH), PAPER_LEVEL)
    for i, ch in enumerate(text):
        glyph = np.repeat(FONT[ch], VSCALE, axis=0)
        left = max(0, LEFT_MARGIN + PITCH * i + int(shifts[i]))
        gh, gw = glyph.shape
        cell = img[top:top + gh, left:left + gw]
        cell[glyph] = INK_LEVEL
    return np.clip(img + noise, 0.0, 1.0)


@dataclass(frozen=True)
class TextSample:
    id: int
    text: str
    seed: int
    split: str

    @property
    def image(self) -> np.ndarray:
        return render_text_line(self.text, self.seed)


@dataclass
class Dataset:
    train: list[TextSample]
    test: list[TextSample]
    charset: Charset = field(default_factory=Charset)
    seed: int = 0

    def samples(self):
        return self.train + self.test

    def by_id(self, sample_id: int) -> TextSample:
        for s in self.samples():
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def _random_text(rng: np.random.Generator, charset: Charset) -> str:
    n = int(rng.integers(MIN_TEXT_LEN, MAX_TEXT_LEN + 1))
    idx = rng.integers(0, len(charset.characters), size=n)
    return "".join(charset.characters[i] for i in idx)


def sample_seed(dataset_seed: int, index: int) -> int:
    state = np.random.SeedSequence([dataset_seed, index]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def generate_dataset(n_train: int, n_test: int, seed: int,
                     charset: Charset | None = None) -> Dataset:
    """Sample ``n_train + n_test`` text lines.

    Sample ``i`` draws its text from the stream ``(seed, i)`` so enlarging a
    split never changes the samples already present.  Test texts that collide
    with a train text are redrawn from the same stream.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    charset = charset or Charset()
    train, seen = [], set()
    for i in range(n_train):
        text = _random_text(np.random.default_rng([seed, i]), charset)
        train.append(TextSample(i, text, sample_seed(seed, i), "train"))
        seen.add(text)
    test = []
    for j in range(n_test):
        i = n_train + j
        rng = np.random.default_rng([seed, i])
        text = _random_text(rng, charset)
        while text in seen:
            text = _random_text(rng, charset)
        test.append(TextSample(i, text, sample_seed(seed, i), "test"))
    if len({s.seed for s in train + test}) != n_train + n_test:
        raise RuntimeError("sample seed collision")
    return Dataset(train, test, charset, seed)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    h, w = image.shape
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, data = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in dims.split())
    maxval = int(maxval)
    data = np.frombuffer(data[: w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_manifest(path, dataset: Dataset) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["id", "split", "seed", "text"])
        for s in dataset.samples():
            wr.writerow([s.id, s.split, s.seed, s.text])

"""Small encoder-decoder text-line recognizer with a pixel-gradient interface.

All public methods take and return numpy arrays; torch is only used
internally for the forward pass and reverse-mode differentiation.

Label conventions: a *label sequence* is the decoder output ``t_1 .. t_{k+1}``
(eos included when emitted, bos excluded).  The decoder input that produces
it is ``[bos, t_1, .., t_k]``.  Every decoder pass runs on a sequence padded
to ``max_len`` so that the logits of position ``i`` are bitwise independent of
whatever sits after it; greedy generation and teacher forcing therefore agree
exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import HEIGHT, WIDTH, Charset, decode_tokens

torch.set_default_dtype(torch.float64)

MAGIC = b"SQAT"
FORMAT_VERSION = 1
GRAD_CHUNK = 64


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 2
    max_len: int = 32
    mlp_dim: int = 128
    patch_width: int = 8

    def as_vector(self) -> np.ndarray:
        return np.array(list(asdict(self).values()), dtype=np.float64)

    @classmethod
    def from_vector(cls, vec) -> "ModelConfig":
        return cls(*(int(round(v)) for v in vec))


@dataclass
class Generation:
    tokens: np.ndarray      # t_1 .. t_{k+1}
    logits: np.ndarray      # (k+1, v)
    text: str


@dataclass(frozen=True)
class GradientRequest:
    """Scalar objective whose pixel gradient is requested.

    ``kind`` is ``"cross_entropy"`` (summed over positions of ``labels``) or
    ``"single_logit"`` (logit of ``cls`` at ``position``, 0-based, with the
    decoder teacher-forced on ``labels``).
    """
    kind: str
    labels: tuple
    position: int = 0
    cls: int = 0

    @classmethod
    def cross_entropy(cls, labels) -> "GradientRequest":
        return cls("cross_entropy", tuple(int(t) for t in labels))

    @classmethod
    def single_logit(cls, labels, position: int, k: int) -> "GradientRequest":
        return cls("single_logit", tuple(int(t) for t in labels), position, k)


def preprocess(image):
    """Affine normalization ``(x - 0.5) / 0.5``; works on numpy or torch input."""
    if tuple(image.shape[-2:]) != (HEIGHT, WIDTH):
        raise ValueError(f"expected a {HEIGHT}x{WIDTH} image, got {tuple(image.shape)}")
    return (image - 0.5) / 0.5


def argmax_first(row: np.ndarray) -> int:
    # np.argmax returns the first occurrence of the maximum
    return int(np.argmax(row))


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context, mask=None):
        b, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(context).view(b, m, h, d // h).transpose(1, 2)
        v = self.v(context).view(b, m, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores + mask
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg.embed_dim, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_dim)

    def forward(self, x):
        y = self.ln1(x)
        x = x + self.attn(y, y)
        return x + self.mlp(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.self_attn = Attention(cfg.embed_dim, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.cross_attn = Attention(cfg.embed_dim, cfg.heads)
        self.ln3 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_dim)

    def forward(self, x, memory, mask):
        y = self.ln1(x)
        x = x + self.self_attn(y, y, mask)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.mlp(self.ln3(x))


class Recognizer(nn.Module):
    def __init__(self, charset: Charset | None = None, config: ModelConfig | None = None,
                 seed: int = 0):
        super().__init__()
        self.charset = charset or Charset()
        self.config = cfg = config or ModelConfig()
        if WIDTH % cfg.patch_width:
            raise ValueError("patch width must divide the image width")
        self.seed = seed
        n_patches = WIDTH // cfg.patch_width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(HEIGHT * cfg.patch_width, cfg.embed_dim)
            self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
            self.enc_norm = nn.LayerNorm(cfg.embed_dim)
            self.token_embed = nn.Embedding(self.charset.size, cfg.embed_dim)
            self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
            self.dec_norm = nn.LayerNorm(cfg.embed_dim)
            self.head = nn.Linear(cfg.embed_dim, self.charset.size)
        self.register_buffer("enc_pos", sinusoidal_positions(n_patches, cfg.embed_dim), persistent=False)
        self.register_buffer("dec_pos", sinusoidal_positions(cfg.max_len, cfg.embed_dim), persistent=False)
        causal = torch.full((cfg.max_len, cfg.max_len), float("-inf")).triu(1)
        self.register_buffer("causal_mask", causal, persistent=False)
        self.eval()

    @property
    def vocab_size(self) -> int:
        return self.charset.size

    # -- torch graph ---------------------------------------------------------

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        x = preprocess(images)
        b = x.shape[0]
        pw = self.config.patch_width
        patches = x.reshape(b, HEIGHT, WIDTH // pw, pw).permute(0, 2, 1, 3).reshape(b, WIDTH // pw, HEIGHT * pw)
        h = self.patch_embed(patches) + self.enc_pos
        for layer in self.encoder:
            h = layer(h)
        return self.enc_norm(h)

    def decode(self, memory: torch.Tensor, dec_input: torch.Tensor) -> torch.Tensor:
        """Logits for a (B, n) decoder input; n is max_len except in batch decoding."""
        n = dec_input.shape[1]
        h = self.token_embed(dec_input) + self.dec_pos[:n]
        mask = self.causal_mask[:n, :n]
        for layer in self.decoder:
            h = layer(h, memory, mask)
        return self.head(self.dec_norm(h))

    def forward(self, images: torch.Tensor, dec_input: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images), dec_input)

    def pad_input(self, forced) -> torch.Tensor:
        forced = [int(t) for t in forced]
        if not forced or forced[0] != self.charset.bos:
            raise ValueError("decoder input must start with bos")
        if len(forced) > self.config.max_len:
            raise ValueError(f"decoder input longer than max_len={self.config.max_len}")
        row = forced + [self.charset.pad] * (self.config.max_len - len(forced))
        return torch.tensor(row, dtype=torch.long)

    def decoder_input(self, labels) -> list[int]:
        return [self.charset.bos] + [int(t) for t in labels[:-1]]

    # -- numpy interface -----------------------------------------------------

    def _image_tensor(self, image) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image, dtype=np.float64))
        if tuple(x.shape) != (HEIGHT, WIDTH):
            raise ValueError(f"expected a {HEIGHT}x{WIDTH} image, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("image contains non-finite values")
        return x

    def decode_text(self, labels) -> str:
        return decode_tokens(labels, self.charset)

    @torch.no_grad()
    def generate(self, image) -> Generation:
        """Greedy decoding from bos until eos or ``max_len`` outputs."""
        memory = self.encode(self._image_tensor(image)[None])
        seq = [self.charset.bos]
        rows = []
        while len(rows) < self.config.max_len:
            logits = self.decode(memory, self.pad_input(seq)[None])[0, len(rows)].numpy()
            tok = argmax_first(logits)
            rows.append(logits)
            if tok == self.charset.eos:
                break
            if len(seq) < self.config.max_len:
                seq.append(tok)
            else:
                break
        tokens = np.array(seq[1:] + [tok], dtype=np.int64)
        return Generation(tokens, np.array(rows), self.decode_text(tokens))

    @torch.no_grad()
    def generate_batch(self, images) -> list[Generation]:
        """Lockstep greedy decoding of a stack of images.

        Same decoding rule as :meth:`generate`, but each step only runs the
        decoder on the current prefix and batched products may round
        differently in the last bit.  Use :meth:`generate` where the exact
        logit identity with teacher forcing matters.
        """
        x = torch.as_tensor(np.asarray(images, dtype=np.float64))
        if x.ndim != 3 or tuple(x.shape[1:]) != (HEIGHT, WIDTH):
            raise ValueError("expected a stack of images")
        b = x.shape[0]
        memory = self.encode(x)
        L = self.config.max_len
        inp = torch.full((b, L), self.charset.pad, dtype=torch.long)
        inp[:, 0] = self.charset.bos
        rows = [[] for _ in range(b)]
        toks = [[] for _ in range(b)]
        active = np.ones(b, dtype=bool)
        for pos in range(L):
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            logits = self.decode(memory[idx], inp[idx, :pos + 1])[:, pos].numpy()
            for j, i in enumerate(idx):
                tok = argmax_first(logits[j])
                rows[i].append(logits[j])
                toks[i].append(tok)
                if tok == self.charset.eos or pos + 1 >= L:
                    active[i] = False
                else:
                    inp[i, pos + 1] = tok
        out = []
        for i in range(b):
            t = np.array(toks[i], dtype=np.int64)
            out.append(Generation(t, np.array(rows[i]), self.decode_text(t)))
        return out

    @torch.no_grad()
    def teacher_forced_logits(self, image, forced) -> np.ndarray:
        """One row of logits per token of ``forced`` (which starts with bos)."""
        inp = self.pad_input(forced)
        logits = self.forward(self._image_tensor(image)[None], inp[None])[0]
        return logits[: len(forced)].numpy()

    def sequence_logits(self, image, labels) -> np.ndarray:
        """Teacher-forced logits that reproduce the label sequence ``labels``."""
        return self.teacher_forced_logits(image, self.decoder_input(labels))

    def logit_gradients(self, image, labels, weights) -> np.ndarray:
        """Pixel gradients of ``sum_{t,k} W[b,t,k] F^t_k`` for each ``W[b]``.

        ``weights`` has shape (B, len(labels), v) or (len(labels), v); the
        decoder is teacher-forced on ``labels``.
        """
        weights = np.asarray(weights, dtype=np.float64)
        single = weights.ndim == 2
        if single:
            weights = weights[None]
        T = len(labels)
        if weights.shape[1:] != (T, self.vocab_size):
            raise ValueError(f"weights must have shape (B, {T}, {self.vocab_size})")
        x = self._image_tensor(image)
        inp = self.pad_input(self.decoder_input(labels))
        out = []
        for start in range(0, len(weights), GRAD_CHUNK):
            w = torch.as_tensor(weights[start:start + GRAD_CHUNK])
            b = w.shape[0]
            xb = x.expand(b, HEIGHT, WIDTH).clone().requires_grad_(True)
            logits = self.forward(xb, inp.expand(b, -1))[:, :T]
            (grad,) = torch.autograd.grad((logits * w).sum(), xb)
            out.append(grad.numpy())
        grads = np.concatenate(out)
        return grads[0] if single else grads

    def cross_entropy(self, image, labels) -> float:
        with torch.no_grad():
            x = self._image_tensor(image)[None]
            return float(self._ce(x, labels))

    def _ce(self, x, labels):
        T = len(labels)
        inp = self.pad_input(self.decoder_input(labels))[None]
        logits = self.forward(x, inp)[0, :T]
        target = torch.as_tensor(np.asarray(labels, dtype=np.int64))
        return nn.functional.cross_entropy(logits, target, reduction="sum")

    def input_gradient(self, image, request: GradientRequest) -> np.ndarray:
        labels = list(request.labels)
        if request.kind == "cross_entropy":
            for t in labels:
                if not 0 <= t < self.vocab_size:
                    raise ValueError(f"label {t} outside vocabulary")
            x = self._image_tensor(image)[None].clone().requires_grad_(True)
            (grad,) = torch.autograd.grad(self._ce(x, labels), x)
            return grad[0].numpy()
        if request.kind == "single_logit":
            if not 0 <= request.position < len(labels):
                raise ValueError(f"position {request.position} outside sequence of length {len(labels)}")
            if not 0 <= request.cls < self.vocab_size:
                raise ValueError(f"class {request.cls} outside vocabulary")
            w = np.zeros((len(labels), self.vocab_size))
            w[request.position, request.cls] = 1.0
            return self.logit_gradients(image, labels, w)
        raise ValueError(f"unknown objective kind {request.kind!r}")

    # -- persistence ---------------------------------------------------------

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("hparams", self.config.as_vector()), ("seed", np.array([float(self.seed)]))]
        for name, p in self.state_dict().items():
            out.append((name, p.detach().numpy()))
        return out

    def save(self, path) -> None:
        chars = self.charset.characters.encode("utf-8")
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(chars)), chars]
        for name, arr in self.named_tensors():
            nb = name.encode("utf-8")
            parts.append(struct.pack("<I", len(nb)) + nb)
            parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "Recognizer":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a model file")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (nchars,) = struct.unpack_from("<I", raw, 8)
        off = 12
        charset = Charset(raw[off:off + nchars].decode("utf-8"))
        off += nchars
        tensors = {}
        while off < len(raw):
            (n,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
        model = cls(charset, ModelConfig.from_vector(tensors.pop("hparams")),
                    seed=int(tensors.pop("seed")[0]))
        state = {k: torch.tensor(np.array(v)) for k, v in tensors.items()}
        model.load_state_dict(state)
        return model

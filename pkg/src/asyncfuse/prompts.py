"""Prompt text per variable, embedding providers and the semantic adapter.

Embedding file layout (little-endian)::

    8 bytes  magic b"ASFEMB01"
    4 bytes  uint32 D_llm
    8 bytes  uint64 record count
    records  32-byte SHA-256 of the UTF-8 prompt text, then D_llm '<f8' values

A file is produced offline by any tool that can embed the texts exported by
``asyncfuse render-prompts``; lookups key on the exact rendered text.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Linear, Tensor, expand

VARIANTS = ("full", "domain", "timestamp", "instruction")
DEFAULT_D_LLM = 768
_EMB_MAGIC = b"ASFEMB01"


@dataclass(frozen=True)
class PromptTemplateSpec:
    variant: str = "full"
    freq: str = "1 hour"
    precision: int = 3
    domain: str = "an unspecified"
    trend: str = "last_minus_first"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown prompt variant {self.variant!r}; expected one of {VARIANTS}")
        if self.trend not in TREND_RULES:
            raise ValueError(f"unknown trend rule {self.trend!r}")


def _last_minus_first(x: np.ndarray) -> float:
    return float(x[-1] - x[0])


def _fitted_rise(x: np.ndarray) -> float:
    # least-squares slope scaled to the window span
    if len(x) < 2:
        return 0.0
    t = np.arange(len(x), dtype=np.float64)
    return float(np.polyfit(t, x, 1)[0] * (len(x) - 1))


TREND_RULES = {"last_minus_first": _last_minus_first, "fitted_rise": _fitted_rise}


def _fmt(x: float, precision: int) -> str:
    s = f"{x:.{precision}f}"
    # "-0.000" and "0.000" describe the same value
    return s[1:] if s.startswith("-") and not s.strip("-0.") else s


def render_prompt(values: Sequence[float], timestamps: Sequence[str], spec: PromptTemplateSpec) -> str:
    """Describe one variable's window in the fixed template for ``spec.variant``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot render a prompt for an empty window")
    if spec.variant == "instruction":
        return "Forecast the future values of this variable from its recent history."
    if spec.variant == "domain":
        return f"This variable is recorded in the {spec.domain} domain."
    numbers = ", ".join(_fmt(v, spec.precision) for v in x)
    text = f"From {timestamps[0]} to {timestamps[-1]}, the values were {numbers} every {spec.freq}."
    if spec.variant == "timestamp":
        return text
    trend = TREND_RULES[spec.trend](x)
    return f"{text} The total trend value was {_fmt(trend, spec.precision)}."


def text_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class PromptRecord:
    variable: int
    text: str
    embedding: np.ndarray | None = None


# -- providers -----------------------------------------------------------------
class StubEmbedder:
    """Deterministic text -> unit vector without any language model.

    The 256 bits of the text's SHA-256 become a +-1 vector that is pushed
    through a fixed Gaussian projection drawn from ``seed``.
    """

    kind = "stub"

    def __init__(self, d_llm: int = DEFAULT_D_LLM, seed: int = 0):
        self.d_llm = d_llm
        self.seed = seed
        self._proj = np.random.default_rng(seed).standard_normal((256, d_llm))

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.d_llm))
        digests = np.frombuffer(b"".join(text_hash(t) for t in texts), dtype=np.uint8)
        bits = np.unpackbits(digests).reshape(len(texts), 256).astype(np.float64) * 2.0 - 1.0
        vecs = bits @ self._proj
        return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


class FileEmbedder:
    """Looks up precomputed embeddings by the SHA-256 of the prompt text."""

    kind = "file"

    def __init__(self, path):
        self.path = Path(path)
        self.d_llm, self.index = read_embedding_file(self.path)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.d_llm))
        for i, t in enumerate(texts):
            vec = self.index.get(text_hash(t))
            if vec is None:
                raise LookupError(f"{self.path}: no embedding for prompt starting {t[:60]!r}")
            out[i] = vec
        return out


def make_provider(kind: str = "stub", d_llm: int = DEFAULT_D_LLM, seed: int = 0, path=None):
    if kind == "stub":
        return StubEmbedder(d_llm, seed)
    if kind == "file":
        if path is None:
            raise ValueError("file provider needs a path")
        return FileEmbedder(path)
    raise ValueError(f"unknown embedding provider {kind!r}")


def write_embedding_file(path, texts: Iterable[str], vectors: np.ndarray) -> Path:
    texts = list(texts)
    vectors = np.asarray(vectors, dtype="<f8")
    if vectors.shape[0] != len(texts):
        raise ValueError("one vector per text required")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<IQ", vectors.shape[1], len(texts)))
        for t, v in zip(texts, vectors):
            fh.write(text_hash(t))
            fh.write(v.tobytes())
    return path


def read_embedding_file(path) -> tuple[int, dict[bytes, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    d_llm, count = struct.unpack("<IQ", raw[8:20])
    rec = 32 + 8 * d_llm
    if len(raw) != 20 + rec * count:
        raise ValueError(f"{path}: size does not match header ({count} x {d_llm})")
    index = {}
    for i in range(count):
        off = 20 + i * rec
        index[raw[off:off + 32]] = np.frombuffer(raw, "<f8", d_llm, off + 32).astype(np.float64)
    return d_llm, index


def embed_prompts(records: Sequence[PromptRecord], provider) -> Tensor:
    """Stack per-variable embeddings as columns: (D_llm, N)."""
    vecs = provider.embed([r.text for r in records])
    for r, v in zip(records, vecs):
        r.embedding = v
    return Tensor(vecs.T.copy())


def adapt_semantics(emb: Tensor, adapter: Linear, pos: Tensor, batch: int | None = None) -> Tensor:
    """Map prompt embeddings into model space: (D_llm, N) or (B, D_llm, N) -> (B*N, 1, D).

    A 2-D input is shared by every sample and needs ``batch``.
    """
    if emb.ndim == 2:
        if batch is None:
            raise ValueError("batch size required for shared (D_llm, N) embeddings")
        z = adapter(emb.transpose()) + pos  # (N, D)
        n, d = z.shape
        return expand(z, (batch, n, d)).reshape(batch * n, 1, d)
    b, _, n = emb.shape
    z = adapter(emb.transpose(0, 2, 1)) + pos  # (B, N, D)
    return z.reshape(b * n, 1, z.shape[-1])


class PromptPipeline:
    """Renders and embeds the prompts of dataset windows, caching by window start."""

    def __init__(self, dataset, spec: PromptTemplateSpec, provider):
        self.dataset = dataset
        self.spec = spec
        self.provider = provider
        self._cache: dict[int, np.ndarray] = {}

    def records(self, start: int) -> list[PromptRecord]:
        values, stamps = self.dataset.raw_window(int(start))
        return [PromptRecord(n, render_prompt(values[:, n], stamps, self.spec))
                for n in range(values.shape[1])]

    def embeddings(self, starts: Sequence[int]) -> np.ndarray:
        """(B, D_llm, N) for the given window starts."""
        missing = [int(s) for s in starts if int(s) not in self._cache]
        if missing:
            recs = [r for s in missing for r in self.records(s)]
            vecs = self.provider.embed([r.text for r in recs])
            n = self.dataset.n_vars
            for i, s in enumerate(missing):
                self._cache[s] = vecs[i * n:(i + 1) * n].T.copy()
        return np.stack([self._cache[int(s)] for s in starts])

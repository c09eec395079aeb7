"""Tokenization with a 75-token budget and pluggable word-level embedding backends."""
from __future__ import annotations

import os
import re
import shlex
import struct
import subprocess
import tempfile
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendUnavailable, CorruptFile, EmptyPrompt, ShapeMismatch

MAX_TOKENS = 75
CONTEXT_LENGTH = MAX_TOKENS + 2
VOCAB_SIZE = 49408
SOT_ID = VOCAB_SIZE - 2
EOT_ID = VOCAB_SIZE - 1
_WORD_BUCKETS = VOCAB_SIZE - 2
_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

EMB_MAGIC = b"T2IEMB1"
_EMB_HEADER = struct.Struct("<7sII")


@dataclass
class TokenizedPrompt:
    text: str
    token_ids: list[int]
    mask: np.ndarray
    embeddings: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def padded_ids(self) -> np.ndarray:
        ids = np.zeros(CONTEXT_LENGTH, dtype=np.int64)
        ids[: self.length] = self.token_ids
        return ids


def word_token_id(word: str) -> int:
    return zlib.crc32(word.encode("utf-8")) % _WORD_BUCKETS


def tokenize(text: str) -> TokenizedPrompt:
    """Lower-cased word/punctuation tokens, truncated to 75 between the boundary markers."""
    if not isinstance(text, str) or not text.strip():
        raise EmptyPrompt("prompt is empty")
    words = _TOKEN_RE.findall(text.strip().lower())[:MAX_TOKENS]
    ids = [SOT_ID] + [word_token_id(w) for w in words] + [EOT_ID]
    mask = np.zeros(CONTEXT_LENGTH, dtype=bool)
    mask[: len(ids)] = True
    return TokenizedPrompt(text, ids, mask)


class EmbeddingBackend(Protocol):
    dim: int
    name: str

    def embed(self, prompts: Sequence[TokenizedPrompt]) -> np.ndarray:
        """Return a ``(len(prompts), 77, dim)`` float32 array."""


def stub_token_vector(token_id: int, dim: int) -> np.ndarray:
    v = np.random.default_rng([int(token_id), int(dim)]).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


class StubEmbedder:
    """Each token id maps to a fixed pseudo-random unit vector; no position mixing."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.name = f"stub-{dim}"
        self._cache: dict[int, np.ndarray] = {}

    def vector(self, token_id: int) -> np.ndarray:
        vec = self._cache.get(token_id)
        if vec is None:
            vec = self._cache[token_id] = stub_token_vector(token_id, self.dim)
        return vec

    def embed(self, prompts):
        out = np.zeros((len(prompts), CONTEXT_LENGTH, self.dim), dtype=np.float32)
        for b, p in enumerate(prompts):
            for k, tid in enumerate(p.token_ids):
                out[b, k] = self.vector(tid)
        return out


def write_embedding_records(path, matrices: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for m in matrices:
            m = np.ascontiguousarray(m, dtype="<f4")
            if m.ndim != 2:
                raise ShapeMismatch(f"embedding record must be 2-d, got {m.shape}")
            fh.write(_EMB_HEADER.pack(EMB_MAGIC, m.shape[1], m.shape[0]))
            fh.write(m.tobytes())


def read_embedding_records(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        if len(data) - pos < _EMB_HEADER.size:
            raise CorruptFile(f"{path}: truncated record header at byte {pos}")
        magic, dim, length = _EMB_HEADER.unpack_from(data, pos)
        if magic != EMB_MAGIC:
            raise CorruptFile(f"{path}: bad magic {magic!r}")
        pos += _EMB_HEADER.size
        nbytes = 4 * dim * length
        if len(data) - pos < nbytes:
            raise CorruptFile(f"{path}: truncated payload")
        out.append(np.frombuffer(data, dtype="<f4", count=dim * length, offset=pos).reshape(length, dim).copy())
        pos += nbytes
    return out


class ExternalEmbedder:
    """Out-of-process encoder reached through the embedding exchange file.

    ``command`` is invoked as ``command <prompts.txt> <out.bin>``; the adapter
    writes one record per input line.  Set ``PAIRMOTION_TEXT_ENCODER`` to
    configure it from the environment.
    """

    def __init__(self, command: str | Sequence[str] | None = None, dim: int = 768, timeout: float = 600.0):
        command = command or os.environ.get("PAIRMOTION_TEXT_ENCODER")
        if not command:
            raise BackendUnavailable("no external text encoder configured")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.dim = dim
        self.name = f"external-{dim}"
        self.timeout = timeout

    def embed(self, prompts):
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp, "prompts.txt"), Path(tmp, "embeddings.bin")
            src.write_text("".join(p.text.replace("\n", " ") + "\n" for p in prompts), encoding="utf-8")
            try:
                subprocess.run(self.command + [str(src), str(dst)], check=True, timeout=self.timeout,
                               capture_output=True)
            except (OSError, subprocess.SubprocessError) as exc:
                raise BackendUnavailable(f"text encoder failed: {exc}") from exc
            if not dst.exists():
                raise BackendUnavailable("text encoder produced no output file")
            records = read_embedding_records(dst)
        if len(records) != len(prompts):
            raise BackendUnavailable(f"expected {len(prompts)} records, got {len(records)}")
        out = np.zeros((len(prompts), CONTEXT_LENGTH, self.dim), dtype=np.float32)
        for b, rec in enumerate(records):
            if rec.shape[1] != self.dim:
                raise ShapeMismatch(f"encoder returned width {rec.shape[1]}, expected {self.dim}")
            length = min(rec.shape[0], CONTEXT_LENGTH)
            out[b, :length] = rec[:length]
        return out


def embed_words(prompt, backend: EmbeddingBackend):
    """Fill ``embeddings`` (77 x D) for one prompt or a list of prompts; padded rows are zero."""
    single = isinstance(prompt, TokenizedPrompt)
    prompts = [prompt] if single else list(prompt)
    mats = backend.embed(prompts)
    out = []
    for p, m in zip(prompts, mats):
        m = np.where(p.mask[:, None], m, 0.0).astype(np.float32)
        out.append(replace(p, embeddings=m))
    return out[0] if single else out


def null_prompt(dim: int) -> TokenizedPrompt:
    """Boundary markers only; the embeddings do not depend on any backend."""
    mask = np.zeros(CONTEXT_LENGTH, dtype=bool)
    mask[:2] = True
    emb = np.zeros((CONTEXT_LENGTH, dim), dtype=np.float32)
    emb[0] = stub_token_vector(SOT_ID, dim)
    emb[1] = stub_token_vector(EOT_ID, dim)
    return TokenizedPrompt("", [SOT_ID, EOT_ID], mask, emb)


def encode_prompts(texts: Sequence[str], backend: EmbeddingBackend) -> list[TokenizedPrompt]:
    return embed_words([tokenize(t) for t in texts], backend)


def stack_prompts(prompts: Sequence[TokenizedPrompt]) -> tuple[np.ndarray, np.ndarray]:
    """Batch ``(B, 77, D)`` embeddings and ``(B, 77)`` masks."""
    if any(p.embeddings is None for p in prompts):
        raise ShapeMismatch("prompts must be embedded before batching")
    return np.stack([p.embeddings for p in prompts]), np.stack([p.mask for p in prompts])

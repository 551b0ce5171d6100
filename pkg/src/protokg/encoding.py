"""Text encoders, mean pooling and gated aggregation.

Two encoders are used throughout the pipeline:

* a *frozen* encoder ``f'`` that maps text to fixed vectors (used for graph
  fusion and as the base of every other text path), and
* a *trainable* encoder ``f`` = frozen encoder followed by a learnable affine
  adapter (:class:`Adapter`).

The deterministic :class:`HashEncoder` gives every token a seeded pseudo-random
unit vector, so the whole pipeline runs offline and bit-reproducibly.
"""
from __future__ import annotations

import hashlib
import os
import re
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import EncoderUnavailable, InvalidInput

DTYPE = torch.float64

STOP_WORDS = frozenset(
    """
    a about above after again all also am an and any are as at be been before being
    below between both but by can could did do does doing down during each few for
    from further had has have having he her here hers him his how if in into is it
    its itself just me more most my myself no nor not now of off on once only or
    other our ours out over own same she should so some such than that the their
    theirs them then there these they this those through to too under until up very
    was we were what when where which while who whom why will with would you your
    """.split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop short tokens and stop words."""
    return [
        tok
        for tok in _TOKEN_RE.findall(text.lower())
        if len(tok) >= 2 and tok not in STOP_WORDS
    ]


def _encoder_tokens(text: str) -> list[str]:
    # Entity names like "it" or "a-1" still need a vector, so fall back to the
    # unfiltered tokens and then to the whole string.
    norm = normalize_whitespace(text)
    if not norm:
        raise InvalidInput("cannot encode empty text")
    toks = tokenize(norm)
    if not toks:
        toks = _TOKEN_RE.findall(norm.lower())
    if not toks:
        toks = [norm.lower()]
    return toks


class Encoder:
    """Interface shared by all frozen encoders."""

    kind = "abstract"

    def __init__(self, dim: int):
        if dim <= 0:
            raise InvalidInput("encoder dimension must be positive")
        self.dim = int(dim)

    def encode_tokens(self, text: str) -> list[np.ndarray]:
        raise NotImplementedError

    def embed(self, text: str) -> np.ndarray:
        """Mean-pooled token embedding of ``text``."""
        return mean_pool(self.encode_tokens(text))

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])


class HashEncoder(Encoder):
    """Deterministic token encoder: blake2b(seed, token) seeds a Gaussian draw, normalized."""

    kind = "deterministic-test"

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__(dim)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}\x00{token}".encode("utf-8"), digest_size=16
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec

    def encode_tokens(self, text: str) -> list[np.ndarray]:
        return [self.token_vector(tok).copy() for tok in _encoder_tokens(text)]


class HttpEncoder(Encoder):
    """Remote token encoder.

    Sends ``{"inputs": [token, ...]}`` to ``endpoint`` and expects
    ``{"embeddings": [[...], ...]}`` back, one row per token.
    """

    kind = "http"

    def __init__(self, endpoint: str, dim: int, credential_env: str | None = None,
                 timeout: float = 30.0, transport=None):
        super().__init__(dim)
        import httpx

        self.endpoint = endpoint
        headers = {}
        if credential_env:
            token = os.environ.get(credential_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)
        self._httpx = httpx

    def encode_tokens(self, text: str) -> list[np.ndarray]:
        toks = _encoder_tokens(text)
        try:
            resp = self._client.post(self.endpoint, json={"inputs": toks})
            resp.raise_for_status()
            rows = resp.json()["embeddings"]
        except (self._httpx.HTTPError, KeyError, ValueError) as exc:
            raise EncoderUnavailable(f"encoder endpoint {self.endpoint} failed: {exc}") from exc
        out = [np.asarray(r, dtype=np.float64) for r in rows]
        if len(out) != len(toks) or any(v.shape != (self.dim,) for v in out):
            raise EncoderUnavailable("encoder endpoint returned malformed embeddings")
        return out


class SentenceTransformerEncoder(Encoder):
    """Wraps a locally available sentence-transformers model (token embeddings)."""

    kind = "sentence-transformer"

    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise EncoderUnavailable("sentence-transformers is not installed") from exc
        try:
            self.model = SentenceTransformer(model_name)
        except Exception as exc:  # pragma: no cover - needs model files
            raise EncoderUnavailable(f"cannot load {model_name}: {exc}") from exc
        super().__init__(self.model.get_sentence_embedding_dimension())

    def encode_tokens(self, text: str) -> list[np.ndarray]:  # pragma: no cover
        norm = normalize_whitespace(text)
        if not norm:
            raise InvalidInput("cannot encode empty text")
        out = self.model.encode(norm, output_value="token_embeddings")
        return [np.asarray(row, dtype=np.float64) for row in out.cpu().numpy()]


def make_encoder(kind: str, dim: int = 64, seed: int = 0, endpoint: str | None = None,
                 credential_env: str | None = None, model_name: str | None = None) -> Encoder:
    if kind == "deterministic-test":
        return HashEncoder(dim, seed=seed)
    if kind == "http":
        if not endpoint:
            raise InvalidInput("http encoder needs an endpoint")
        return HttpEncoder(endpoint, dim, credential_env=credential_env)
    if kind == "sentence-transformer":
        return SentenceTransformerEncoder(model_name or "all-MiniLM-L6-v2")
    raise InvalidInput(f"unknown encoder kind {kind!r}")


def mean_pool(tokens: Sequence[np.ndarray]) -> np.ndarray:
    if len(tokens) == 0:
        raise InvalidInput("mean_pool needs at least one vector")
    arr = np.asarray(np.stack([np.asarray(t, dtype=np.float64) for t in tokens]))
    if arr.ndim != 2:
        raise InvalidInput("mean_pool expects vectors of uniform dimension")
    return arr.mean(axis=0)


class Adapter(nn.Module):
    """Trainable affine map applied on top of the frozen encoder; starts as identity."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.eye(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, frozen: torch.Tensor) -> torch.Tensor:
        return frozen @ self.weight.T + self.bias


def gated_aggregate(items: torch.Tensor, gate_weight: torch.Tensor,
                    mask: torch.Tensor | None = None) -> torch.Tensor:
    """Blend mean and coordinate-wise max pooling with a learned sigmoid gate.

    ``items`` is ``(n, D)`` or batched ``(B, n, D)``; ``mask`` (same leading
    shape, bool) marks real entries in a padded batch.
    """
    if items.shape[-2] == 0:
        raise InvalidInput("gated_aggregate needs at least one item")
    if mask is None:
        mean = items.mean(dim=-2)
        mx = items.max(dim=-2).values
    else:
        m = mask.unsqueeze(-1)
        counts = m.sum(dim=-2).to(items.dtype)
        if bool((counts == 0).any()):
            raise InvalidInput("gated_aggregate needs at least one item per row")
        mean = (items * m).sum(dim=-2) / counts
        mx = items.masked_fill(~m, float("-inf")).max(dim=-2).values
    gate = torch.sigmoid(mean @ gate_weight.T)
    return gate * mean + (1.0 - gate) * mx

"""Text-based patient embedding from the narrative and self-reported fields."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoding import DTYPE, Adapter, Encoder, gated_aggregate, normalize_whitespace
from .errors import InvalidInput, UnknownCategory

AGE_BUCKET_WIDTH = 10
AGE_BUCKETS = 13
LAYER_NORM_EPS = 1e-6
DEFAULT_GENDERS = ("female", "male", "other")

_SENTENCE_RE = re.compile(r"[.?!;\n]+")


@dataclass
class PatientRecord:
    id: str
    narrative: str
    gender: str
    age: int
    clinical_profile: dict[str, float] = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self):
        if not self.narrative or not self.narrative.strip():
            raise InvalidInput(f"record {self.id!r} has an empty narrative")
        if int(self.age) < 0:
            raise InvalidInput(f"record {self.id!r} has a negative age")
        self.age = int(self.age)
        for k, v in self.clinical_profile.items():
            if not math.isfinite(float(v)):
                raise InvalidInput(f"record {self.id!r}: clinical field {k!r} is not finite")

    @classmethod
    def from_dict(cls, d: dict) -> "PatientRecord":
        return cls(str(d["id"]), d["narrative"], d["gender"], d["age"],
                   {k: float(v) for k, v in d.get("clinical_profile", {}).items()}, d.get("label"))

    def to_dict(self, with_label: bool = True) -> dict:
        d = {"id": self.id, "narrative": self.narrative, "gender": self.gender,
             "age": self.age, "clinical_profile": dict(self.clinical_profile)}
        if with_label and self.label is not None:
            d["label"] = self.label
        return d

    def without_label(self) -> "PatientRecord":
        return PatientRecord(self.id, self.narrative, self.gender, self.age,
                             dict(self.clinical_profile), None)


def load_records(path) -> list[PatientRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(PatientRecord.from_dict(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise InvalidInput(f"{path}:{lineno}: bad patient record ({exc})") from exc
    return out


def split_sentences(narrative: str) -> list[str]:
    parts = [normalize_whitespace(p) for p in _SENTENCE_RE.split(narrative)]
    parts = [p for p in parts if p]
    if not parts:
        whole = normalize_whitespace(narrative)
        if not whole:
            raise InvalidInput("narrative has no sentence")
        parts = [whole]
    return parts


def age_bucket(age: int, width: int = AGE_BUCKET_WIDTH, buckets: int = AGE_BUCKETS) -> int:
    if age < 0:
        raise InvalidInput("age must be non-negative")
    return min(int(age) // width, buckets - 1)


def clinical_vector(profile: dict[str, float], fields: Sequence[str], dim: int) -> tuple[np.ndarray, list[str]]:
    """Values in schema order, zero-padded to ``dim``; also returns the imputed field names."""
    if len(fields) > dim:
        raise InvalidInput(f"{len(fields)} clinical fields do not fit in dimension {dim}")
    vec = np.zeros(dim)
    missing = []
    for i, name in enumerate(fields):
        if name in profile:
            vec[i] = float(profile[name])
        else:
            missing.append(name)
    return vec, missing


def sentence_vectors(narrative: str, encoder: Encoder) -> np.ndarray:
    """Frozen mean-pooled vector per sentence; the trainable adapter is applied later."""
    return np.stack([encoder.embed(s) for s in split_sentences(narrative)])


def encode_narrative(sentences: torch.Tensor, adapter: Adapter, gate: torch.Tensor,
                     mask: torch.Tensor | None = None) -> torch.Tensor:
    """h_narr = rho(f(sentences)) over frozen sentence vectors (S, D) or (B, S, D)."""
    if sentences.shape[-2] == 0:
        raise InvalidInput("narrative has no sentence")
    return gated_aggregate(adapter(sentences), gate, mask)


class SegmentAttention(nn.Module):
    """Multi-head self-attention over a short sequence of segment tokens (no residual)."""

    def __init__(self, dim: int, heads: int = 2, generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise InvalidInput("embedding dimension must be divisible by the number of heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE))
        self.w_v = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE))
        self.w_out = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE))
        for w in (self.w_q, self.w_k, self.w_v, self.w_out):
            nn.init.xavier_uniform_(w, generator=generator)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        *lead, t, d = tokens.shape

        def split(w):
            return (tokens @ w.T).reshape(*lead, t, self.heads, self.head_dim).transpose(-2, -3)

        q, k, v = split(self.w_q), split(self.w_k), split(self.w_v)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        mixed = (att @ v).transpose(-2, -3).reshape(*lead, t, d)
        return mixed @ self.w_out.T


class LayerNorm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, LAYER_NORM_EPS)


class PatientEncoder(nn.Module):
    """Structured fields + narrative embedding -> h_p.

    Structured tokens [gender; age; clinical] go through self-attention and layer
    norm (width 3D). That block is projected to one D-wide token, paired with the
    narrative token, attended again, normalized (width 2D) and projected to D.
    """

    def __init__(self, dim: int, genders: Sequence[str] = DEFAULT_GENDERS, heads: int = 2,
                 age_buckets: int = AGE_BUCKETS, generator: torch.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.genders = tuple(genders)
        self.gender_table = nn.Parameter(torch.empty(len(self.genders), dim, dtype=DTYPE))
        self.age_table = nn.Parameter(torch.empty(age_buckets, dim, dtype=DTYPE))
        nn.init.normal_(self.gender_table, 0.0, dim ** -0.5, generator=generator)
        nn.init.normal_(self.age_table, 0.0, dim ** -0.5, generator=generator)
        self.struct_attn = SegmentAttention(dim, heads, generator)
        self.struct_norm = LayerNorm(3 * dim)
        self.struct_proj = nn.Parameter(torch.empty(dim, 3 * dim, dtype=DTYPE))
        self.fusion_attn = SegmentAttention(dim, heads, generator)
        self.fusion_norm = LayerNorm(2 * dim)
        self.out_proj = nn.Parameter(torch.empty(dim, 2 * dim, dtype=DTYPE))
        nn.init.xavier_uniform_(self.struct_proj, generator=generator)
        nn.init.xavier_uniform_(self.out_proj, generator=generator)

    def gender_index(self, gender: str) -> int:
        try:
            return self.genders.index(gender)
        except ValueError:
            raise UnknownCategory(f"gender {gender!r} not in {self.genders}") from None

    def encode_structured(self, gender_idx: torch.Tensor, age_idx: torch.Tensor,
                          clinical: torch.Tensor) -> torch.Tensor:
        tokens = torch.stack([self.gender_table[gender_idx], self.age_table[age_idx], clinical], dim=-2)
        mixed = self.struct_attn(tokens)
        return self.struct_norm(mixed.flatten(-2))

    def fuse(self, h_tilde_s: torch.Tensor, h_narr: torch.Tensor) -> torch.Tensor:
        tokens = torch.stack([h_tilde_s @ self.struct_proj.T, h_narr], dim=-2)
        h_hat = self.fusion_norm(self.fusion_attn(tokens).flatten(-2))
        return h_hat @ self.out_proj.T

    def forward(self, gender_idx, age_idx, clinical, h_narr) -> torch.Tensor:
        return self.fuse(self.encode_structured(gender_idx, age_idx, clinical), h_narr)

"""Losses, the training loop and label-agnostic cosine-ranking inference."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoding import DTYPE
from .errors import DegenerateEmbedding, DivergenceAbort, InvalidInput
from .graph_encoder import PrototypeSet
from .model import GraphContext, Hyperparams, ModelState, PatientBatch, derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "protokg.checkpoint"
CHECKPOINT_VERSION = 1


# -- losses ----------------------------------------------------------------

def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateEmbedding(f"zero-norm {what}")
    return x / norms


def cosine_matrix(h_p: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    return _unit(h_p, "patient embedding") @ _unit(prototypes, "prototype").T


def info_nce(h_p: torch.Tensor, prototypes: torch.Tensor, targets: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-record InfoNCE over all prototypes; ``h_p`` is (B, D), returns (B,)."""
    if tau <= 0:
        raise InvalidInput("temperature must be positive")
    logits = cosine_matrix(h_p, prototypes) / tau
    return -F.log_softmax(logits, dim=-1).gather(1, targets.view(-1, 1)).squeeze(1)


def contrastive_loss(h_p: torch.Tensor, prototypes: PrototypeSet, positive_label: str,
                     tau: float) -> torch.Tensor:
    target = torch.tensor([prototypes.index(positive_label)])
    return info_nce(h_p.reshape(1, -1), prototypes.embeddings, target, tau)[0]


def semantic_consistency_loss(h_gp: torch.Tensor, h_p: torch.Tensor) -> torch.Tensor:
    if h_gp.shape != h_p.shape:
        raise InvalidInput("graph and text patient embeddings differ in shape")
    return ((h_gp - h_p) ** 2).sum(dim=-1)


@dataclass
class LossParts:
    total: torch.Tensor
    contrastive: torch.Tensor
    semantic: torch.Tensor | None


def total_loss(model: ModelState, batch: PatientBatch, ctx: GraphContext,
               lam: float | None = None, with_semantic: bool | None = None) -> LossParts:
    """mean over the batch of L_con + lam * L_sem.

    Prototypes are recomputed once per call. The graph branch is skipped when
    ``lam == 0`` unless ``with_semantic`` asks for it.
    """
    lam = model.hp.lam if lam is None else lam
    if bool((batch.labels < 0).any()):
        raise InvalidInput("training loss needs a gold label for every record")
    protos = model.prototypes(ctx)
    h_p = model.patient_embedding(batch)
    con = info_nce(h_p, protos, batch.labels, model.hp.tau)
    if with_semantic is None:
        with_semantic = lam != 0
    sem = None
    total = con.mean()
    if with_semantic:
        h_gp = model.graph_patient_embedding(model.query(batch, protos), batch.labels, ctx)
        sem = semantic_consistency_loss(h_gp, h_p)
        total = (con + lam * sem).mean()
    return LossParts(total, con.mean(), None if sem is None else sem.mean())


# -- inference -------------------------------------------------------------

@dataclass
class Prediction:
    ranked_labels: list[str]
    scores: list[float]

    def rank_of(self, label: str) -> int:
        return self.ranked_labels.index(label) + 1


def rank_labels(scores: Sequence[float], labels: Sequence[str]) -> Prediction:
    """Descending by score; ties keep the canonical label order."""
    order = sorted(range(len(labels)), key=lambda j: (-scores[j], j))
    return Prediction([labels[j] for j in order], [float(scores[j]) for j in order])


@torch.no_grad()
def score_matrix(model: ModelState, batch: PatientBatch, ctx: GraphContext,
                 prototypes: torch.Tensor | None = None) -> np.ndarray:
    protos = model.prototypes(ctx) if prototypes is None else prototypes
    return cosine_matrix(model.patient_embedding(batch), protos).numpy()


@torch.no_grad()
def predict(model: ModelState, batch: PatientBatch, ctx: GraphContext,
            prototypes: torch.Tensor | None = None) -> list[Prediction]:
    """Text path only: h_p against every prototype. Labels and subgraphs are never read."""
    scores = score_matrix(model, batch, ctx, prototypes)
    return [rank_labels(row.tolist(), ctx.labels) for row in scores]


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: ModelState
    trace: list[tuple[int, float]]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1


@torch.no_grad()
def _validate(model: ModelState, batch: PatientBatch, ctx: GraphContext) -> tuple[float, float]:
    protos = model.prototypes(ctx)
    h_p = model.patient_embedding(batch)
    sims = cosine_matrix(h_p, protos)
    top = sims.argmax(dim=1)
    hit1 = float((top == batch.labels).double().mean())
    loss = float(info_nce(h_p, protos, batch.labels, model.hp.tau).mean())
    return hit1, loss


def train(model: ModelState, train_batch: PatientBatch, ctx: GraphContext,
          valid_batch: PatientBatch | None = None, epochs: int | None = None,
          lr: float | None = None, batch_size: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on total_loss with per-epoch shuffling from the "training" seed stream.

    The returned model carries the parameters of the epoch with the best
    validation hit@1 (ties: lower validation contrastive loss); without a
    validation set the final parameters are kept.
    """
    hp = model.hp
    epochs = hp.epochs if epochs is None else epochs
    lr = hp.lr if lr is None else lr
    batch_size = hp.batch_size if batch_size is None else batch_size
    rng = np.random.default_rng(derive_seed(hp.seed, "training"))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    trace: list[tuple[int, float]] = []
    history: list[dict] = []
    best_key, best_state, best_epoch = None, None, -1
    n = len(train_batch)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            mb = train_batch.take(order[start:start + batch_size].tolist())
            parts = total_loss(model, mb, ctx)
            value = float(parts.total.detach())
            if not math.isfinite(value):
                raise DivergenceAbort(step, value)
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            trace.append((step, value))
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean([v for _, v in trace[-math.ceil(n / batch_size):]]))}
        if valid_batch is not None and len(valid_batch):
            hit1, vloss = _validate(model, valid_batch, ctx)
            record.update(valid_hit1=hit1, valid_loss=vloss)
            key = (hit1, -vloss)
            if best_key is None or key > best_key:
                best_key, best_epoch = key, epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(record)
        log.info("epoch %d %s", epoch, record)
        if on_epoch:
            on_epoch(record)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = epochs - 1
    return TrainResult(model, trace, history, best_epoch)


# -- persistence -------------------------------------------------------------

def parameter_registry(model: ModelState) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in model.named_parameters()}


def checkpoint_bytes(model: ModelState, corpus_hash: str = "", extra: dict | None = None) -> bytes:
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "hyperparams": model.hp.to_dict(), "corpus_hash": corpus_hash,
            "num_diseases": None if model.free_prototypes is None else model.free_prototypes.shape[0],
            "parameters": sorted(parameter_registry(model)), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in parameter_registry(model).items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
             **arrays)
    return buf.getvalue()


def save_checkpoint(model: ModelState, path: str | os.PathLike, corpus_hash: str = "",
                    extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, corpus_hash, extra))


def load_checkpoint(path: str | os.PathLike, num_diseases: int | None = None) -> tuple[ModelState, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInput(f"{path} is not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    hp = Hyperparams.from_dict(meta["hyperparams"])
    model = ModelState(hp, meta.get("num_diseases") or num_diseases or 0)
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in params.items()}
    missing = set(dict(model.named_parameters())) ^ set(state)
    if missing:
        raise InvalidInput(f"checkpoint parameters do not match the model: {sorted(missing)}")
    model.load_state_dict(state)
    return model, meta


def dumps_loss_trace(trace: Sequence[tuple[int, float]]) -> str:
    return "".join(f"{step}\t{value!r}\n" for step, value in trace)


def write_loss_trace(trace: Sequence[tuple[int, float]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_loss_trace(trace))


def read_loss_trace(path: str | os.PathLike) -> list[tuple[int, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                step, value = line.split("\t")
                out.append((int(step), float(value)))
    return out

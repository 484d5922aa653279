"""Teacher lifecycle: initialization from the student and the EMA update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models, numcore as nc
from .errors import ContractError


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.99
    include_running_stats: bool = True

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractError(f"ema alpha must lie in [0, 1], got {self.alpha}")


def init_teacher(student: models.ParamSet, include_classifier: bool = False) -> models.ParamSet:
    """Teacher starts as a value copy of the student, minus student-only heads.

    The predictor is always student-only. The classifier is copied only when
    the teacher must produce class predictions (learning target P).
    """
    entries = {}
    for name, tensor in student.entries.items():
        if name.startswith("predictor."):
            continue
        if name.startswith("classifier.") and not include_classifier:
            continue
        entries[name] = tensor.copy()
    return models.ParamSet(student.config, entries, role="teacher")


def ema_update(teacher: models.ParamSet, student: models.ParamSet,
               cfg: EmaConfig) -> None:
    """In-place xi <- alpha*xi + (1-alpha)*theta over all shared entries."""
    bad = [n for n in teacher.entries
           if n not in student.entries
           or student.entries[n].data.shape != teacher.entries[n].data.shape]
    if bad:
        raise ContractError(f"teacher/student parity violation on entries: {bad}")
    a = cfg.alpha
    for name, xi in teacher.entries.items():
        if models.is_running_stat(name) and not cfg.include_running_stats:
            continue
        xi.data *= a
        xi.data += (1.0 - a) * student.entries[name].data


def teacher_forward(teacher: models.ParamSet, batch, mode: str = "embedding",
                    training: bool = True) -> nc.Tensor:
    """Teacher outputs for a (S, U/2, T) batch; constants w.r.t. any loss.

    mode "embedding" returns g(f(x)) of shape (S, U/2, D); mode "prediction"
    returns softmax class probabilities (S, U/2, K) and requires the teacher
    to carry a classifier.
    """
    if teacher.role != "teacher":
        raise ContractError("teacher_forward requires a teacher ParamSet")
    arr = np.asarray(batch, dtype=np.float64)
    s, u2, t = arr.shape
    cfg = teacher.config
    ctx = models.BuildContext(models.LeafCache(trainable=False), training=training)
    x = nc.leaf("input.x", (s * u2, t), requires_grad=False)
    if mode == "embedding":
        out, _ = models.build_embedding(cfg, ctx, x, role="teacher")
        width = cfg.embedding_dim
    elif mode == "prediction":
        if "classifier.weight" not in teacher:
            raise ContractError("prediction mode requires a teacher classifier "
                                "(only constructed for learning target P)")
        emb, _ = models.build_encoder(cfg, ctx, x)
        out = nc.softmax(models.build_classifier(cfg, ctx, emb), axis=1)
        width = cfg.class_count
    else:
        raise ContractError(f"unknown teacher_forward mode {mode!r}")

    graph = nc.ExprGraph(out)
    bindings = teacher.bindings()
    bindings["input.x"] = arr.reshape(s * u2, t)
    bindings.update({name: np.ones(node.shape) for name, node in ctx.masks.items()})
    val = nc.evaluate(graph, bindings)
    return nc.Tensor(val.data.reshape(s, u2, width), requires_grad=False)

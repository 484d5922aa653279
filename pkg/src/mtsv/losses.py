"""Training objectives: centroids, scaled-cosine similarity, GE2E-H and its
ablation variants, MSE consistency, CCE, and the symmetric total loss.

Centroids pool student and teacher embeddings of one speaker; the exclusion
centroid omits the query utterance from the student side. The similarity
softmax reads -log(exp(S_jij) / sum_k exp(S_jik)), averaged over queries.
Teacher embeddings always enter as constants, so no loss propagates gradient
into the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models, numcore as nc
from .errors import ContractError, ShapeError

CONSISTENCY_KINDS = ("mse", "ge2e", "ap", "ge2e_h")
W_MIN = 1e-4


@dataclass
class SimilarityParams:
    w: float = 10.0
    b: float = -5.0


@dataclass
class EmbeddingBatch:
    values: nc.Tensor          # (S, U/2, D)
    speaker_ids: list

    def __post_init__(self):
        if not isinstance(self.values, nc.Tensor):
            self.values = nc.Tensor(self.values)
        if self.values.data.ndim != 3:
            raise ShapeError(f"EmbeddingBatch expects (S, U/2, D) values, "
                             f"got {self.values.shape}")
        if len(self.speaker_ids) != self.values.shape[0]:
            raise ContractError("speaker_ids length must match the speaker axis")


@dataclass(frozen=True)
class LossConfig:
    consistency: str = "ge2e_h"
    negative_pairs: bool = True
    learning_target: str = "embedding"   # "prediction" | "embedding"
    use_cce: bool = True
    consistency_weight: float = 1.0

    def validate(self) -> "LossConfig":
        if self.consistency not in CONSISTENCY_KINDS:
            raise ContractError(f"unknown consistency loss {self.consistency!r}")
        if self.learning_target not in ("prediction", "embedding"):
            raise ContractError(f"unknown learning target {self.learning_target!r}")
        if self.consistency == "mse" and self.negative_pairs:
            raise ContractError("MSE consistency is positive-pair by construction; "
                                "negative_pairs must be false")
        if self.consistency != "mse" and self.learning_target != "embedding":
            raise ContractError("centroid losses operate on embeddings; "
                                "learning target must be E")
        if self.consistency_weight < 0.0:
            raise ContractError("consistency_weight must be non-negative")
        return self


def _check_aligned(z: EmbeddingBatch, y: EmbeddingBatch):
    if list(z.speaker_ids) != list(y.speaker_ids):
        raise ContractError("student and teacher batches disagree on speakers")
    if z.values.shape[0] != y.values.shape[0] or z.values.shape[2] != y.values.shape[2]:
        raise ShapeError(f"incompatible embedding shapes {z.values.shape} "
                         f"and {y.values.shape}")


# ---------------------------------------------------------------------------
# Plain-array centroid and similarity operations

@dataclass
class CentroidSet:
    full: np.ndarray       # (S, D), all U embeddings per speaker
    exclusion: np.ndarray  # (S, U/2, S is not here: (S, U/2, D)), query left out


def centroid(z: EmbeddingBatch, yp: EmbeddingBatch, j: int, exclude=None) -> nc.Tensor:
    """Speaker centroid over both networks' embeddings (with optional exclusion).

    Without exclusion, all U = Uz + Uy embeddings average with weight 1/U.
    With exclusion, the student utterance `exclude` is left out and the
    remaining U-1 embeddings average with weight 1/(U-1).
    """
    _check_aligned(z, yp)
    zj = z.values.data[j]
    yj = yp.values.data[j]
    total = len(zj) + len(yj)
    if total < 2:
        raise ContractError(f"centroid needs U >= 2 embeddings, got {total}")
    if exclude is None:
        return nc.Tensor((zj.sum(axis=0) + yj.sum(axis=0)) / total)
    if not (0 <= exclude < len(zj)):
        raise ContractError(f"exclusion index {exclude} outside the student "
                            f"utterances [0, {len(zj)})")
    return nc.Tensor((zj.sum(axis=0) - zj[exclude] + yj.sum(axis=0)) / (total - 1))


def centroid_set(z: EmbeddingBatch, yp: EmbeddingBatch) -> CentroidSet:
    """All full centroids and all student-query exclusion centroids."""
    _check_aligned(z, yp)
    zv, yv = z.values.data, yp.values.data
    total = zv.shape[1] + yv.shape[1]
    if total < 2:
        raise ContractError(f"centroids need U >= 2 embeddings, got {total}")
    sums = zv.sum(axis=1) + yv.sum(axis=1)            # (S, D)
    full = sums / total
    excl = (sums[:, None, :] - zv) / (total - 1)      # (S, U/2, D)
    return CentroidSet(full=full, exclusion=excl)


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if norms.min() <= 1e-12:
        raise ContractError(f"zero-norm {what}; cosine similarity is undefined")
    return x / norms


def similarity_matrix(z: EmbeddingBatch, centroids: CentroidSet,
                      sp: SimilarityParams) -> nc.Tensor:
    """Scaled cosine similarities S[j, i, k] between queries and centroids."""
    if sp.w <= 0.0:
        raise ContractError(f"similarity scale w must be positive, got {sp.w}")
    zu = _unit_rows(z.values.data, "embedding")
    fu = _unit_rows(centroids.full, "centroid")
    eu = _unit_rows(centroids.exclusion, "exclusion centroid")
    sim = np.einsum("jid,kd->jik", zu, fu)
    diag = (zu * eu).sum(axis=-1)
    idx = np.arange(sim.shape[0])
    sim[idx, :, idx] = diag  # k == j uses the exclusion centroid
    return nc.Tensor(sp.w * sim + sp.b)


# ---------------------------------------------------------------------------
# Graph builders

def _diag_mask(s, u):
    m = np.zeros((s, u, s))
    for j in range(s):
        m[j, :, j] = 1.0
    return m


def _centroid_softmax(qn: nc.Node, zn: nc.Node, yn, w: nc.Node, b: nc.Node,
                      negative_pairs: bool) -> nc.Node:
    """Shared structure of GE2E-H (queries=Z) and GE2E (queries=Z and Y').

    qn: (S, Uq, D) queries, each of which is a member of its speaker's pool.
    zn/yn: the pooled embeddings; yn may be None for a student-only pool.
    """
    s, uq, d = qn.shape
    u_total = zn.shape[1] + (yn.shape[1] if yn is not None else 0)
    if u_total < 2:
        raise ContractError(f"GE2E-family losses need U >= 2, got {u_total}")
    sums = nc.sum_(zn, axis=1, keepdims=True)
    if yn is not None:
        sums = nc.add(sums, nc.sum_(yn, axis=1, keepdims=True))
    excl = nc.mul(nc.sub(sums, qn), nc.const(1.0 / (u_total - 1)))
    cos_excl = nc.sum_(nc.mul(nc.unit(qn), nc.unit(excl)), axis=-1)     # (S, Uq)
    if not negative_pairs:
        return nc.sub(nc.const(1.0), nc.mean(cos_excl), label="positive_only")
    if s < 2:
        raise ContractError("negative pairs need at least 2 speakers per batch")
    full = nc.mul(nc.reshape(sums, (s, d)), nc.const(1.0 / u_total))
    qf = nc.unit(nc.reshape(qn, (s * uq, d)))
    cos_full = nc.reshape(nc.matmul(qf, nc.transpose(nc.unit(full), (1, 0))),
                          (s, uq, s))
    mask = nc.const(_diag_mask(s, uq))
    inv = nc.const(1.0 - _diag_mask(s, uq))
    cos = nc.add(nc.mul(cos_full, inv),
                 nc.mul(nc.reshape(cos_excl, (s, uq, 1)), mask))
    sim = nc.add(nc.mul(cos, w), b, label="similarity")
    lse = nc.logsumexp(sim, axis=2)
    pos = nc.sum_(nc.mul(sim, mask), axis=2)
    return nc.mean(nc.sub(lse, pos), label="ge2e_softmax")


def build_ge2e_h(zn, yn, w, b, negative_pairs=True) -> nc.Node:
    return _centroid_softmax(zn, zn, yn, w, b, negative_pairs)


def build_ge2e(zn, yn, w, b, negative_pairs=True) -> nc.Node:
    if yn is None:
        return _centroid_softmax(zn, zn, None, w, b, negative_pairs)
    queries = nc.concat([zn, yn], axis=1)
    return _centroid_softmax(queries, zn, yn, w, b, negative_pairs)


def build_ap(zn, yn, w, b, negative_pairs=True) -> nc.Node:
    """Angular prototypical: first student utterance vs teacher prototypes."""
    s, u2, d = zn.shape
    q = nc.unit(nc.reshape(nc.slice_axis(zn, 1, 0, 1), (s, d)))
    proto = nc.unit(nc.mean(yn, axis=1))
    if not negative_pairs:
        return nc.sub(nc.const(1.0), nc.mean(nc.sum_(nc.mul(q, proto), axis=-1)))
    if s < 2:
        raise ContractError("negative pairs need at least 2 speakers per batch")
    cos = nc.matmul(q, nc.transpose(proto, (1, 0)))
    sim = nc.add(nc.mul(cos, w), b, label="ap.similarity")
    eye = nc.const(np.eye(s))
    lse = nc.logsumexp(sim, axis=1)
    pos = nc.sum_(nc.mul(sim, eye), axis=1)
    return nc.mean(nc.sub(lse, pos), label="ap")


def build_mse(a: nc.Node, bnode: nc.Node) -> nc.Node:
    if a.shape != bnode.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {bnode.shape}")
    return nc.mean(nc.square(nc.sub(a, bnode)), label="mse")


def build_cce(logits: nc.Node, onehot: nc.Node) -> nc.Node:
    lse = nc.logsumexp(logits, axis=1)
    picked = nc.sum_(nc.mul(logits, onehot), axis=1)
    return nc.mean(nc.sub(lse, picked), label="cce")


# ---------------------------------------------------------------------------
# Spec-level loss operations on concrete embedding batches

def _eval_pair_loss(builder, z: EmbeddingBatch, yp, sp: SimilarityParams,
                    negative_pairs=True, with_grads_for=None):
    if sp.w <= 0.0:
        raise ContractError(f"similarity scale w must be positive, got {sp.w}")
    zl = nc.leaf("Z", z.values.shape, requires_grad=True)
    bindings = {"Z": z.values.data, "w": np.float64(sp.w), "b": np.float64(sp.b)}
    if yp is not None and yp.values.shape[1] > 0:
        _check_aligned(z, yp)
        yl = nc.leaf("Yp", yp.values.shape, requires_grad=False)
        bindings["Yp"] = yp.values.data
    else:
        yl = None
    w = nc.leaf("w", (), requires_grad=True)
    b = nc.leaf("b", (), requires_grad=True)
    graph = nc.ExprGraph(builder(zl, yl, w, b, negative_pairs))
    value = float(nc.evaluate(graph, bindings).data)
    if with_grads_for is not None:
        return value, nc.gradients(graph, with_grads_for)
    return value


def ge2e_h_loss(z: EmbeddingBatch, yp: EmbeddingBatch, sp: SimilarityParams,
                negative_pairs=True) -> float:
    """Half GE2E: only student embeddings serve as queries."""
    return _eval_pair_loss(build_ge2e_h, z, yp, sp, negative_pairs)


def ge2e_loss(z: EmbeddingBatch, yp: EmbeddingBatch, sp: SimilarityParams,
              negative_pairs=True) -> float:
    """Original GE2E: all U embeddings are queries; teacher terms carry no grad."""
    return _eval_pair_loss(build_ge2e, z, yp, sp, negative_pairs)


def ap_loss(z: EmbeddingBatch, yp: EmbeddingBatch, sp: SimilarityParams,
            negative_pairs=True) -> float:
    """Angular prototypical with teacher-side prototypes."""
    return _eval_pair_loss(build_ap, z, yp, sp, negative_pairs)


def mse_consistency(student_out, teacher_out) -> float:
    """Mean squared elementwise difference; the teacher side is constant."""
    a = np.asarray(student_out.data if isinstance(student_out, nc.Tensor)
                   else student_out, dtype=np.float64)
    t = np.asarray(teacher_out.data if isinstance(teacher_out, nc.Tensor)
                   else teacher_out, dtype=np.float64)
    al = nc.leaf("a", a.shape, requires_grad=True)
    tl = nc.leaf("t", t.shape, requires_grad=False)
    graph = nc.ExprGraph(build_mse(al, tl))
    return float(nc.evaluate(graph, {"a": a, "t": t}).data)


def cce_loss(logits, labels) -> float:
    """Mean categorical cross-entropy of affine logits against class ids."""
    arr = np.asarray(logits.data if isinstance(logits, nc.Tensor) else logits,
                     dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = arr.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k}), got "
                            f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    ll = nc.leaf("logits", arr.shape, requires_grad=True)
    ol = nc.leaf("onehot", onehot.shape, requires_grad=False)
    graph = nc.ExprGraph(build_cce(ll, ol))
    return float(nc.evaluate(graph, {"logits": arr, "onehot": onehot}).data)


# ---------------------------------------------------------------------------
# Total loss (Eqs. 7 and 8): symmetric two-pass objective over (m, m')

_CONSISTENCY_BUILDERS = {"ge2e_h": build_ge2e_h, "ge2e": build_ge2e, "ap": build_ap}


@dataclass
class TotalLossBuild:
    graph: nc.ExprGraph
    total: nc.Node
    consistency: nc.Node
    cce: nc.Node | None
    bn_nodes: list
    mask_names: list
    model_cfg: models.ModelConfig
    loss_cfg: LossConfig
    shape: tuple  # (S, U2, T)

    def bindings(self, student: models.ParamSet, teacher: models.ParamSet,
                 m, m_prime, class_ids, masks=None) -> dict:
        s, u2, t = self.shape
        k = self.model_cfg.class_count
        ids = np.asarray(class_ids, dtype=np.int64)
        onehot = np.zeros((s * u2, k))
        onehot[np.arange(s * u2), np.repeat(ids, u2)] = 1.0
        out = student.bindings("s:")
        out.update(teacher.bindings("t:"))
        out["input.m"] = np.asarray(m, dtype=np.float64).reshape(s * u2, t)
        out["input.mp"] = np.asarray(m_prime, dtype=np.float64).reshape(s * u2, t)
        out["input.onehot"] = onehot
        masks = masks or {}
        for name in self.mask_names:
            if name in masks:
                out[name] = masks[name]
            else:
                shape = self.graph.leaves[name].shape
                out[name] = np.ones(shape)
        return out


def build_total_loss(model_cfg: models.ModelConfig, loss_cfg: LossConfig,
                     s: int, u2: int, t: int, training=True) -> TotalLossBuild:
    """One graph computing (L_S + L~_S)/2 with both half-batch assignments."""
    loss_cfg.validate()
    d = model_cfg.embedding_dim
    ls = models.LeafCache("s:", trainable=True)
    lt = models.LeafCache("t:", trainable=False)
    m = nc.leaf("input.m", (s * u2, t), requires_grad=False)
    mp = nc.leaf("input.mp", (s * u2, t), requires_grad=False)
    onehot = nc.leaf("input.onehot", (s * u2, model_cfg.class_count),
                     requires_grad=False)
    w = ls("loss.w", ())
    b = ls("loss.b", ())

    bn_nodes, mask_names = [], []

    def one_pass(x_student, x_teacher, tag):
        ctx_s = models.BuildContext(ls, training, mask_tag=tag)
        ctx_t = models.BuildContext(lt, training, mask_tag=tag)
        enc_s, lms = models.build_encoder(model_cfg, ctx_s, x_student)
        if loss_cfg.learning_target == "embedding":
            zs = models.build_head(model_cfg, ctx_s, "projector", enc_s)
            zs = models.build_head(model_cfg, ctx_s, "predictor", zs)
            z3 = nc.reshape(zs, (s, u2, d))
            enc_t, _ = models.build_encoder(model_cfg, ctx_t, x_teacher)
            yt = models.build_head(model_cfg, ctx_t, "projector", enc_t)
            y3 = nc.reshape(yt, (s, u2, d))
            if loss_cfg.consistency == "mse":
                cons = build_mse(nc.unit(z3), nc.unit(y3))
            else:
                builder = _CONSISTENCY_BUILDERS[loss_cfg.consistency]
                cons = builder(z3, y3, w, b, loss_cfg.negative_pairs)
        else:
            probs_s = nc.softmax(models.build_classifier(model_cfg, ctx_s, enc_s),
                                 axis=1)
            enc_t, _ = models.build_encoder(model_cfg, ctx_t, x_teacher)
            probs_t = nc.softmax(models.build_classifier(model_cfg, ctx_t, enc_t),
                                 axis=1)
            cons = build_mse(probs_s, probs_t)
        bn_nodes.extend(ctx_s.bn_nodes)
        mask_names.extend(list(ctx_s.masks) + list(ctx_t.masks))
        cce = build_cce(models.build_classifier(model_cfg, ctx_s, enc_s), onehot) \
            if loss_cfg.use_cce else None
        return cons, cce

    cons_a, cce_a = one_pass(m, mp, "@a")
    cons_b, cce_b = one_pass(mp, m, "@b")

    half = nc.const(0.5)
    cons_total = nc.mul(nc.add(cons_a, cons_b), half, label="consistency")
    weighted = nc.mul(cons_total, nc.const(loss_cfg.consistency_weight))
    if loss_cfg.use_cce:
        cce_total = nc.mul(nc.add(cce_a, cce_b), half, label="cce")
        total = nc.add(weighted, cce_total, label="total")
    else:
        cce_total = None
        total = nc.add(weighted, nc.const(0.0), label="total")

    return TotalLossBuild(graph=nc.ExprGraph(total), total=total,
                          consistency=cons_total, cce=cce_total,
                          bn_nodes=bn_nodes, mask_names=mask_names,
                          model_cfg=model_cfg, loss_cfg=loss_cfg,
                          shape=(s, u2, t))


def total_loss(student: models.ParamSet, teacher: models.ParamSet, batch,
               cfg: LossConfig, sp: SimilarityParams | None = None) -> float:
    """Convenience evaluation of the symmetric total loss on one mini-batch."""
    m = np.asarray(batch.m.data if isinstance(batch.m, nc.Tensor) else batch.m)
    mp = np.asarray(batch.m_prime.data if isinstance(batch.m_prime, nc.Tensor)
                    else batch.m_prime)
    s, u2, t = m.shape
    build = build_total_loss(student.config, cfg, s, u2, t, training=True)
    class_ids = getattr(batch, "class_ids", None)
    if class_ids is None:
        class_ids = list(range(s))
    bindings = build.bindings(student, teacher, m, mp, class_ids)
    if sp is not None:
        bindings["s:loss.w"] = np.float64(sp.w)
        bindings["s:loss.b"] = np.float64(sp.b)
    return float(nc.evaluate(build.graph, bindings).data)

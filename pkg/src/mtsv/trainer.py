"""Optimization loop: SGD with momentum, warm-up + cosine LR, EMA sequencing,
JSONL metrics, and a versioned binary checkpoint container.

All per-step randomness (batch sampling, augmentation, dropout masks) is
keyed by (run seed, step index), so runs are bitwise reproducible and a
checkpoint resume continues exactly where an uninterrupted run would be.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import evaluation, losses, meanteacher, models, numcore as nc
from .errors import CheckpointError, ContractError, NumericError

CHECKPOINT_MAGIC = b"MTSV1"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    lr_max: float = 0.1
    warmup_steps: int | None = None     # None: 3 warm-up epochs over the corpus
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_speakers: int = 4
    batch_utterances: int = 4
    batch_mode: str = "different"       # "different" | "same_noised"
    loss: losses.LossConfig = losses.LossConfig()
    ema: meanteacher.EmaConfig = meanteacher.EmaConfig()
    seed: int = 7
    eval_every: int = 50
    eval_crops: int = 1
    snr_db_range: tuple = (10.0, 20.0)  # same_noised augmentation draw
    gain_range: tuple = (0.9, 1.1)

    @property
    def batch_geometry(self):
        return (self.batch_speakers, self.batch_utterances)

    def resolve(self, corpus: datamod.Corpus) -> "TrainConfig":
        """Fill the derived warm-up length and validate the schedule."""
        cfg = self
        if cfg.warmup_steps is None:
            total = corpus.config.n_train_speakers * corpus.config.utterances_per_speaker
            per_batch = cfg.batch_speakers * cfg.batch_utterances
            warm = 3 * math.ceil(total / per_batch)
            if cfg.steps > 0:
                warm = min(warm, max(1, cfg.steps // 3))
            cfg = dataclasses.replace(cfg, warmup_steps=warm)
        if cfg.steps > 0 and cfg.warmup_steps >= cfg.steps:
            raise ContractError(f"warmup_steps {cfg.warmup_steps} must be smaller "
                                f"than steps {cfg.steps}")
        if cfg.lr_max <= 0 or cfg.weight_decay < 0:
            raise ContractError("lr_max must be positive and weight_decay >= 0")
        return cfg


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to lr_max, then cosine annealing to ~0."""
    if not (0 <= step < cfg.steps):
        raise ContractError(f"step {step} outside [0, {cfg.steps})")
    warm = cfg.warmup_steps
    if warm is None:
        raise ContractError("lr_at needs a resolved TrainConfig (warmup_steps set)")
    if step < warm:
        return cfg.lr_max * (step + 1) / warm
    span = cfg.steps - warm
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def sgd_step(params: models.ParamSet, grads: dict, lr: float, momentum: float,
             weight_decay: float, velocity: dict) -> None:
    """v <- momentum*v + g + wd*p; p <- p - lr*v. Skips decay on loss.w/loss.b.

    Updates exactly the entries named in `grads`; running statistics are never
    gradient targets. A non-finite gradient aborts before touching anything.
    """
    for name, g in grads.items():
        arr = g.data if isinstance(g, nc.Tensor) else np.asarray(g)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        arr = g.data if isinstance(g, nc.Tensor) else np.asarray(g)
        p = params[name].data
        wd = 0.0 if name in ("loss.w", "loss.b") else weight_decay
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + arr + wd * p
        velocity[name] = v
        params[name].data = p - lr * v
    if "loss.w" in grads:
        params["loss.w"].data = np.maximum(params["loss.w"].data, losses.W_MIN)


@dataclass
class TrainState:
    student: models.ParamSet
    teacher: models.ParamSet
    velocity: dict
    step: int


@dataclass
class TrainResult:
    student: models.ParamSet
    teacher: models.ParamSet
    metrics: list
    best_eer: float | None = None
    best_step: int | None = None


def make_embedding_fn(model_cfg: models.ModelConfig, role: str):
    """Evaluation-mode embedding function: q(g(f(x))) or g(f(x)) per role."""
    cache = {}

    def embed(params: models.ParamSet, waves):
        arr = np.asarray(waves, dtype=np.float64)
        b = arr.shape[0]
        if b not in cache:
            ctx = models.BuildContext(models.LeafCache(trainable=False),
                                      training=False)
            x = nc.leaf("input.x", (b, model_cfg.input_samples), requires_grad=False)
            out, _ = models.build_embedding(model_cfg, ctx, x, role=role)
            cache[b] = nc.ExprGraph(out)
        graph = cache[b]
        bindings = params.bindings()
        bindings["input.x"] = arr
        return nc.evaluate(graph, bindings).data

    return embed


def _dropout_masks(build: losses.TotalLossBuild, rate: float, seed: int,
                   step: int) -> dict:
    rng = datamod._rng(seed, 5, step)
    masks = {}
    for name in sorted(build.mask_names):
        shape = build.graph.leaves[name].shape
        keep = (rng.random(shape) >= rate).astype(np.float64)
        masks[name] = keep / (1.0 - rate)
    return masks


def _update_running_stats(build: losses.TotalLossBuild, student: models.ParamSet):
    for prefix, node in build.bn_nodes:
        _, _, mean_c, var_c = build.graph.aux_of(node)
        rm = student[f"{prefix}.running_mean"].data
        rv = student[f"{prefix}.running_var"].data
        rm *= BN_MOMENTUM
        rm += (1.0 - BN_MOMENTUM) * mean_c
        rv *= BN_MOMENTUM
        rv += (1.0 - BN_MOMENTUM) * var_c


def train(model_cfg: models.ModelConfig, cfg: TrainConfig, corpus: datamod.Corpus,
          out_dir: str | None = None, resume: TrainState | None = None,
          hooks: dict | None = None, stop_after: int | None = None) -> TrainResult:
    """Run the full loop; see the module docstring for the determinism contract.

    Per step: sample batch -> total loss -> gradients -> sgd_step -> ema_update.
    Every eval_every steps the held-out EER is computed for the student
    (q o g o f) and the teacher (g o f). Checkpoints are written to out_dir at
    the best student EER and at the end. `stop_after` interrupts the schedule
    early (the final checkpoint then resumes exactly where it stopped).
    """
    cfg = cfg.resolve(corpus)
    cfg.loss.validate()
    hooks = hooks or {}
    s, u = cfg.batch_geometry
    u2 = u // 2
    t = model_cfg.input_samples

    if resume is not None:
        student = resume.student
        teacher = resume.teacher
        velocity = resume.velocity
        start_step = resume.step
    else:
        student = models.init_params(model_cfg, cfg.seed)
        teacher = meanteacher.init_teacher(
            student, include_classifier=cfg.loss.learning_target == "prediction")
        velocity = {}
        start_step = 0

    build = losses.build_total_loss(model_cfg, cfg.loss, s, u2, t, training=True)
    wrt = ["s:" + n for n in student.trainable_names()
           if "s:" + n in build.graph.leaves]
    noise_cfg = datamod.NoiseConfig(cfg.snr_db_range, cfg.gain_range)

    do_eval = cfg.eval_every > 0 and len(corpus.eval_ids) >= 2
    trials = evaluation.make_trials(corpus, seed=cfg.seed) if do_eval else None
    student_fn = make_embedding_fn(model_cfg, "student")
    teacher_fn = make_embedding_fn(model_cfg, "teacher")

    metrics = []
    best_eer, best_step = None, None
    mfh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mfh = open(os.path.join(out_dir, "metrics.jsonl"),
                   "a" if resume is not None else "w")

    def abort(step, err):
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint_last_good.mtsv"),
                            model_cfg, cfg,
                            TrainState(student, teacher, velocity, step))
        raise NumericError(f"numeric failure at step {step}: {err}") from err

    end_step = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    try:
        for step in range(start_step, end_step):
            lr = lr_at(step, cfg)
            batch = datamod.sample_minibatch(corpus, s, u, cfg.batch_mode,
                                             seed=(cfg.seed, 3, step),
                                             noise_cfg=noise_cfg)
            masks = None
            if cfg.batch_mode == "same_noised" and model_cfg.dropout_rate > 0:
                masks = _dropout_masks(build, model_cfg.dropout_rate, cfg.seed, step)
            bindings = build.bindings(student, teacher, batch.m, batch.m_prime,
                                      batch.class_ids, masks)
            try:
                total = float(nc.evaluate(build.graph, bindings).data)
            except NumericError as err:
                abort(step, err)
            _update_running_stats(build, student)
            raw = nc.gradients(build.graph, set(wrt))
            grads = {name[2:]: g for name, g in raw.items()}
            try:
                sgd_step(student, grads, lr, cfg.momentum, cfg.weight_decay, velocity)
            except NumericError as err:
                abort(step, err)
            if "pre_ema" in hooks:
                hooks["pre_ema"](step, student, teacher)
            meanteacher.ema_update(teacher, student, cfg.ema)

            record = {
                "step": step,
                "lr": lr,
                "loss_total": total,
                "loss_consistency": float(build.graph.value_of(build.consistency)),
                "loss_cce": (float(build.graph.value_of(build.cce))
                             if build.cce is not None else 0.0),
            }
            if do_eval and ((step + 1) % cfg.eval_every == 0 or step == end_step - 1):
                eer_s, _ = evaluation.evaluate_model(
                    student, student_fn, corpus, trials, cfg.eval_crops, t)
                eer_t, _ = evaluation.evaluate_model(
                    teacher, teacher_fn, corpus, trials, cfg.eval_crops, t)
                record["eer_student"] = eer_s
                record["eer_teacher"] = eer_t
                if best_eer is None or eer_s < best_eer:
                    best_eer, best_step = eer_s, step
                    if out_dir is not None:
                        save_checkpoint(
                            os.path.join(out_dir, "checkpoint_best.mtsv"),
                            model_cfg, cfg,
                            TrainState(student, teacher, velocity, step + 1))
            metrics.append(record)
            if mfh is not None:
                mfh.write(json.dumps(record, sort_keys=True) + "\n")
                mfh.flush()
    finally:
        if mfh is not None:
            mfh.close()

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.mtsv"),
                        model_cfg, cfg,
                        TrainState(student, teacher, velocity, end_step))
    return TrainResult(student, teacher, metrics, best_eer, best_step)


# ---------------------------------------------------------------------------
# Checkpoint container: MTSV1 magic, JSON manifest, raw little-endian arrays

def _cfg_dicts(model_cfg: models.ModelConfig, cfg: TrainConfig):
    return {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(cfg),
    }


def model_cfg_from_dict(d: dict) -> models.ModelConfig:
    d = dict(d)
    d["conv_channels"] = tuple(d["conv_channels"])
    d["res_blocks"] = tuple(d["res_blocks"])
    return models.ModelConfig(**d)


def train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["loss"] = losses.LossConfig(**d["loss"])
    d["ema"] = meanteacher.EmaConfig(**d["ema"])
    d["snr_db_range"] = tuple(d["snr_db_range"])
    d["gain_range"] = tuple(d["gain_range"])
    return TrainConfig(**d)


def save_checkpoint(path: str, model_cfg: models.ModelConfig, cfg: TrainConfig,
                    state: TrainState) -> None:
    arrays = []
    blobs = []
    offset = 0

    def put(key, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        arrays.append({"key": key, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name in state.student.names():
        put(f"student/{name}", state.student[name].data)
    for name in state.teacher.names():
        put(f"teacher/{name}", state.teacher[name].data)
    for name in sorted(state.velocity):
        put(f"velocity/{name}", state.velocity[name])

    manifest = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "rng": {"scheme": "philox-step-keyed", "seed": cfg.seed, "step": state.step},
        "configs": _cfg_dicts(model_cfg, cfg),
        "arrays": arrays,
    }
    payload = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str):
    """Returns (model_cfg, train_cfg, TrainState)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not an MTSV1 checkpoint "
                                  f"(magic {magic!r})")
        (size,) = struct.unpack("<Q", fh.read(8))
        try:
            manifest = json.loads(fh.read(size))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"corrupt checkpoint manifest in {path}") from err
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version "
                                  f"{manifest.get('version')} in {path}")
        body = fh.read()

    model_cfg = model_cfg_from_dict(manifest["configs"]["model"])
    train_cfg = train_cfg_from_dict(manifest["configs"]["train"])
    groups = {"student": {}, "teacher": {}, "velocity": {}}
    for rec in manifest["arrays"]:
        group, name = rec["key"].split("/", 1)
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arr = arr.reshape(shape).astype(np.float64).copy()
        groups[group][name] = arr if shape else np.float64(arr)

    student = models.ParamSet(model_cfg,
                              {k: nc.Tensor(v) for k, v in groups["student"].items()},
                              role="student")
    teacher = models.ParamSet(model_cfg,
                              {k: nc.Tensor(v) for k, v in groups["teacher"].items()},
                              role="teacher")
    state = TrainState(student, teacher, dict(groups["velocity"]), manifest["step"])
    return model_cfg, train_cfg, state

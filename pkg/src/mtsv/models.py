"""Network definitions: raw-waveform encoder, ASP pooling, heads, classifier.

Networks are expressed as graph builders over named parameter leaves so the
same topology can be instantiated for the student (trainable leaves) and the
teacher (constant leaves) inside a single loss graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError, ShapeError

BN_EPS = 1e-5
ASP_EPS = 1e-9


@dataclass(frozen=True)
class ModelConfig:
    """Encoder/head topology. Defaults are the desk-scale configuration."""

    input_samples: int = 6561
    conv_channels: tuple = (16, 32, 64)
    res_blocks: tuple = (2, 2, 2)
    embedding_dim: int = 32
    projector_hidden: int = 32
    class_count: int = 20
    dropout_rate: float = 0.0

    @property
    def stem_channels(self) -> int:
        if len(self.conv_channels) == len(self.res_blocks) + 1:
            return self.conv_channels[0]
        if len(self.conv_channels) == len(self.res_blocks):
            return self.conv_channels[0]
        raise ContractError(
            f"conv_channels {self.conv_channels} must have one entry per stage, "
            f"optionally preceded by a stem entry (stages: {len(self.res_blocks)})")

    @property
    def stage_channels(self) -> tuple:
        if len(self.conv_channels) == len(self.res_blocks) + 1:
            return tuple(self.conv_channels[1:])
        return tuple(self.conv_channels)

    @property
    def downsample(self) -> int:
        # stem conv stride 3, then one stride-3 max pool per residual block
        return 3 ** (1 + sum(self.res_blocks))

    @property
    def final_frames(self) -> int:
        return self.input_samples // self.downsample

    def validate_input_length(self, t: int) -> None:
        if t % self.downsample != 0:
            raise ShapeError(f"input length {t} is not divisible by the total "
                             f"downsampling factor {self.downsample}")
        if t // self.downsample < 2:
            raise ShapeError(f"input length {t} leaves {t // self.downsample} frame(s) "
                             f"after downsampling; ASP needs at least 2")


def paper_config() -> ModelConfig:
    """Full-width topology used only for shape verification."""
    return ModelConfig(input_samples=59049, conv_channels=(128, 128, 256, 512),
                       res_blocks=(2, 3, 3), embedding_dim=512, projector_hidden=512,
                       class_count=6112)


class ParamSet:
    """Named, ordered parameter tensors for one network role."""

    def __init__(self, config: ModelConfig, entries: dict, role: str):
        self.config = config
        self.entries = dict(entries)
        self.role = role

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> nc.Tensor:
        return self.entries[name]

    def __setitem__(self, name, value: nc.Tensor):
        self.entries[name] = value

    def names(self):
        return list(self.entries)

    def trainable_names(self):
        return [n for n in self.entries if not is_running_stat(n)]

    def copy(self, role=None) -> "ParamSet":
        return ParamSet(self.config,
                        {k: v.copy() for k, v in self.entries.items()},
                        role or self.role)

    def bindings(self, prefix: str = "") -> dict:
        return {prefix + k: v.data for k, v in self.entries.items()}


def is_running_stat(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


# ---------------------------------------------------------------------------
# Initialization

def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: ModelConfig, seed: int, with_predictor=True,
                with_classifier=True, role="student") -> ParamSet:
    """Deterministic He-initialized parameter set for the full model."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0))))
    e: dict[str, nc.Tensor] = {}

    def conv(name, cout, cin, k):
        e[f"{name}.weight"] = nc.Tensor(_he(rng, (cout, cin, k), cin * k))
        e[f"{name}.bias"] = nc.Tensor(np.zeros(cout))

    def bn(name, c):
        e[f"{name}.gamma"] = nc.Tensor(np.ones(c))
        e[f"{name}.beta"] = nc.Tensor(np.zeros(c))
        e[f"{name}.running_mean"] = nc.Tensor(np.zeros(c))
        e[f"{name}.running_var"] = nc.Tensor(np.ones(c))

    def fc(name, din, dout):
        e[f"{name}.weight"] = nc.Tensor(_he(rng, (din, dout), din))
        e[f"{name}.bias"] = nc.Tensor(np.zeros(dout))

    c0 = cfg.stem_channels
    conv("encoder.stem", c0, 1, 3)
    cin = c0
    for s, (cout, nblocks) in enumerate(zip(cfg.stage_channels, cfg.res_blocks), 1):
        for b in range(nblocks):
            p = f"encoder.res{s}.{b}"
            bn(f"{p}.bn1", cin)
            conv(f"{p}.conv1", cout, cin, 3)
            bn(f"{p}.bn2", cout)
            conv(f"{p}.conv2", cout, cout, 3)
            if cin != cout:
                conv(f"{p}.skip", cout, cin, 1)
            cin = cout
    bn("encoder.post", cin)
    h = cin  # attention hidden width tied to the final channel count
    fc("encoder.asp.att1", cin, h)
    fc("encoder.asp.att2", h, 1)
    fc("encoder.embed", 2 * cin, cfg.embedding_dim)

    for head in ("projector", "predictor") if with_predictor else ("projector",):
        # no fc1 bias: the batch norm right after would cancel it exactly
        e[f"{head}.fc1.weight"] = nc.Tensor(_he(rng, (cfg.embedding_dim,
                                                      cfg.projector_hidden),
                                                cfg.embedding_dim))
        bn(f"{head}.bn", cfg.projector_hidden)
        fc(f"{head}.fc2", cfg.projector_hidden, cfg.embedding_dim)

    if with_classifier:
        fc("classifier", cfg.embedding_dim, cfg.class_count)

    e["loss.w"] = nc.Tensor(np.float64(10.0))
    e["loss.b"] = nc.Tensor(np.float64(-5.0))
    return ParamSet(cfg, e, role)


# ---------------------------------------------------------------------------
# Graph building

class LeafCache:
    """Creates (and memoizes) parameter leaves with a role prefix.

    Leaves for a non-trainable role (the teacher) carry requires_grad=False,
    which structurally stops all gradients through that branch.
    """

    def __init__(self, prefix: str = "", trainable: bool = True):
        self.prefix = prefix
        self.trainable = trainable
        self.nodes: dict[str, nc.Node] = {}

    def __call__(self, name, shape, stat=False) -> nc.Node:
        full = self.prefix + name
        if full not in self.nodes:
            rg = self.trainable and not stat
            self.nodes[full] = nc.leaf(full, shape, requires_grad=rg)
        return self.nodes[full]


@dataclass
class BuildContext:
    L: LeafCache
    training: bool
    bn_nodes: list = field(default_factory=list)  # (param name prefix, Node)
    masks: dict = field(default_factory=dict)     # dropout mask leaves by name
    mask_tag: str = ""                            # disambiguates repeated passes


def _bn(ctx: BuildContext, prefix: str, x: nc.Node, c: int, axes) -> nc.Node:
    gamma = ctx.L(f"{prefix}.gamma", (c,))
    beta = ctx.L(f"{prefix}.beta", (c,))
    if ctx.training:
        node = nc.batchnorm_train(x, gamma, beta, axes, eps=BN_EPS, label=prefix)
        ctx.bn_nodes.append((prefix, node))
        return node
    rm = ctx.L(f"{prefix}.running_mean", (c,), stat=True)
    rv = ctx.L(f"{prefix}.running_var", (c,), stat=True)
    return nc.batchnorm_eval(x, gamma, beta, rm, rv, axes, eps=BN_EPS, label=prefix)


def _conv(ctx, prefix, x, cout, cin, k, stride=1, padding=0):
    w = ctx.L(f"{prefix}.weight", (cout, cin, k))
    b = ctx.L(f"{prefix}.bias", (cout,))
    return nc.conv1d(x, w, b, stride=stride, padding=padding, label=prefix)


def _res_block(ctx, prefix, x, cin, cout):
    h = nc.relu(_bn(ctx, f"{prefix}.bn1", x, cin, axes=(0, 2)))
    h = _conv(ctx, f"{prefix}.conv1", h, cout, cin, 3, padding=1)
    h = nc.relu(_bn(ctx, f"{prefix}.bn2", h, cout, axes=(0, 2)))
    h = _conv(ctx, f"{prefix}.conv2", h, cout, cout, 3, padding=1)
    skip = x if cin == cout else _conv(ctx, f"{prefix}.skip", x, cout, cin, 1)
    return nc.maxpool1d(nc.add(h, skip), 3)


def _asp(ctx, x: nc.Node) -> nc.Node:
    """Attentive statistics pooling: (B, C, T') -> (B, 2C)."""
    b, c, t = x.shape
    h = c  # scorer hidden width is tied to the channel count
    ht = nc.transpose(x, (0, 2, 1))
    flat = nc.reshape(ht, (b * t, c))
    s = nc.tanh(nc.add(nc.matmul(flat, ctx.L("encoder.asp.att1.weight", (c, h))),
                       ctx.L("encoder.asp.att1.bias", (h,))))
    s = nc.add(nc.matmul(s, ctx.L("encoder.asp.att2.weight", (h, 1))),
               ctx.L("encoder.asp.att2.bias", (1,)))
    att = nc.reshape(nc.softmax(nc.reshape(s, (b, t)), axis=1), (b, t, 1))
    wh = nc.mul(ht, att)
    mu = nc.sum_(wh, axis=1)
    ex2 = nc.sum_(nc.mul(wh, ht), axis=1)
    sigma = nc.sqrt(nc.add(nc.sub(ex2, nc.square(mu)), nc.const(ASP_EPS)),
                    label="asp.sigma")
    return nc.concat([mu, sigma], axis=1, label="asp.out")


def build_encoder(cfg: ModelConfig, ctx: BuildContext, x: nc.Node):
    """Waveforms (B, T) -> embeddings (B, D). Returns (node, landmarks)."""
    b, t = x.shape
    cfg.validate_input_length(t)
    landmarks = {}
    c0 = cfg.stem_channels
    h = _conv(ctx, "encoder.stem", nc.reshape(x, (b, 1, t)), c0, 1, 3, stride=3)
    landmarks["stem"] = h
    cin = c0
    for s, (cout, nblocks) in enumerate(zip(cfg.stage_channels, cfg.res_blocks), 1):
        for blk in range(nblocks):
            h = _res_block(ctx, f"encoder.res{s}.{blk}", h, cin, cout)
            cin = cout
        if ctx.training and cfg.dropout_rate > 0.0:
            mask_name = f"{ctx.L.prefix}input.mask{s}{ctx.mask_tag}"
            mask = nc.leaf(mask_name, h.shape, requires_grad=False)
            ctx.masks[mask_name] = mask
            h = nc.mul(h, mask)
        landmarks[f"stage{s}"] = h
    h = nc.relu(_bn(ctx, "encoder.post", h, cin, axes=(0, 2)))
    pooled = _asp(ctx, h)
    landmarks["asp"] = pooled
    emb = nc.add(nc.matmul(pooled, ctx.L("encoder.embed.weight",
                                         (2 * cin, cfg.embedding_dim))),
                 ctx.L("encoder.embed.bias", (cfg.embedding_dim,)),
                 label="encoder.out")
    landmarks["embedding"] = emb
    return emb, landmarks


def build_head(cfg: ModelConfig, ctx: BuildContext, which: str, x: nc.Node) -> nc.Node:
    d, h = cfg.embedding_dim, cfg.projector_hidden
    y = nc.matmul(x, ctx.L(f"{which}.fc1.weight", (d, h)))
    y = nc.relu(_bn(ctx, f"{which}.bn", y, h, axes=(0,)))
    return nc.add(nc.matmul(y, ctx.L(f"{which}.fc2.weight", (h, d))),
                  ctx.L(f"{which}.fc2.bias", (d,)), label=f"{which}.out")


def build_classifier(cfg: ModelConfig, ctx: BuildContext, emb: nc.Node) -> nc.Node:
    return nc.add(nc.matmul(emb, ctx.L("classifier.weight",
                                       (cfg.embedding_dim, cfg.class_count))),
                  ctx.L("classifier.bias", (cfg.class_count,)), label="classifier.out")


def build_embedding(cfg: ModelConfig, ctx: BuildContext, x: nc.Node, role: str):
    """Full embedding path: q(g(f(x))) for the student, g(f(x)) for the teacher."""
    emb, landmarks = build_encoder(cfg, ctx, x)
    z = build_head(cfg, ctx, "projector", emb)
    if role == "student":
        z = build_head(cfg, ctx, "predictor", z)
    landmarks["head_out"] = z
    return z, landmarks


# ---------------------------------------------------------------------------
# Spec-level convenience operations (build + evaluate in one call)

def _run(params: ParamSet, out_node, extra_bindings) -> nc.Tensor:
    graph = nc.ExprGraph(out_node)
    bindings = params.bindings()
    bindings.update(extra_bindings)
    return nc.evaluate(graph, bindings)


def encoder_forward(params: ParamSet, waveforms, training=False) -> nc.Tensor:
    """Per-utterance embeddings f(x) for a (B, T) waveform batch."""
    w = np.asarray(waveforms, dtype=np.float64)
    ctx = BuildContext(LeafCache(trainable=params.role == "student"),
                       training=training)
    x = nc.leaf("input.x", w.shape, requires_grad=False)
    emb, _ = build_encoder(params.config, ctx, x)
    extra = {"input.x": w}
    extra.update(_unit_masks(ctx))
    return _run(params, emb, extra)


def _unit_masks(ctx):
    # all-ones masks when a caller evaluates a dropout-bearing graph directly
    return {name: np.ones(node.shape) for name, node in ctx.masks.items()}


def asp_pool(frames, params: ParamSet) -> nc.Tensor:
    """Attentive statistics pooling of (B, T', C) frames to (B, 2C)."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"asp_pool expects (B, T', C) frames, got {f.shape}")
    if f.shape[1] < 2:
        raise ContractError(f"asp_pool needs at least 2 frames, got {f.shape[1]}")
    ctx = BuildContext(LeafCache(trainable=params.role == "student"), training=False)
    x = nc.leaf("input.frames", f.shape, requires_grad=False)
    out = _asp(ctx, nc.transpose(x, (0, 2, 1)))
    return _run(params, out, {"input.frames": f})


def head_forward(params: ParamSet, which: str, x, training=False) -> nc.Tensor:
    """Projector or predictor forward pass on (B, D) inputs."""
    if which not in ("projector", "predictor"):
        raise ContractError(f"unknown head {which!r}")
    if which == "predictor" and f"{which}.fc1.weight" not in params:
        raise ContractError(f"{params.role} ParamSet has no predictor head")
    arr = np.asarray(x, dtype=np.float64)
    ctx = BuildContext(LeafCache(trainable=params.role == "student"),
                       training=training)
    inp = nc.leaf("input.x", arr.shape, requires_grad=False)
    out = build_head(params.config, ctx, which, inp)
    return _run(params, out, {"input.x": arr})


def classify(params: ParamSet, embedding) -> nc.Tensor:
    """Affine speaker-identification logits; softmax is applied by the loss."""
    if "classifier.weight" not in params:
        raise ContractError(f"{params.role} ParamSet has no classifier head")
    arr = np.asarray(embedding, dtype=np.float64)
    ctx = BuildContext(LeafCache(trainable=params.role == "student"), training=False)
    inp = nc.leaf("input.x", arr.shape, requires_grad=False)
    out = build_classifier(params.config, ctx, inp)
    return _run(params, out, {"input.x": arr})

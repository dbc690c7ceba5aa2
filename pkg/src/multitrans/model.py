"""Attention-based multi-sensor fusion network.

Per frame, each sensor's feature vector is embedded by a shared
per-modality linear layer, tagged with a one-hot sensor identity, and the
resulting sensor-by-feature matrix is passed through stacked Transformer
blocks whose multi-head self-attention runs over the *sensor* axis. A
fusion head (sum / max / concat over sensors) and a sigmoid classifier
produce per-frame event probabilities. The baseline variant skips the
Transformer stack and goes straight from encoded embeddings to fusion.

Frames are independent: a clip forward is just the frame forward applied
with a leading batch axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

CHECKPOINT_SCHEMA = "multitrans-ckpt-v1"

FUSIONS = ("sum", "max", "concat")
VARIANTS = ("baseline", "multitrans")
MODALITIES = ("audio", "video")


def default_modalities(num_sensors: int) -> tuple[str, ...]:
    """Audio-heavy 2:1 split, mirroring a mics-plus-cameras deployment."""
    n_audio = min(max(1, round(2 * num_sensors / 3)), num_sensors - 1)
    return ("audio",) * n_audio + ("video",) * (num_sensors - n_audio)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``d_model`` is the embedding width after sensor encoding
    (``embed_dim + num_sensors`` when the encoding is enabled). Head width
    is ``d_model // num_heads``; when ``num_heads`` does not divide
    ``d_model`` the heads are simply narrower and the output projection
    maps the concatenated heads back to ``d_model``.
    """

    num_sensors: int = 6
    input_dim: int = 8
    embed_dim: int = 10
    num_heads: int = 4
    num_blocks: int = 2
    num_classes: int = 4
    fusion: str = "concat"
    variant: str = "multitrans"
    ffn_dim: int = 0  # 0 means the default 4 * d_model
    threshold: float = 0.5
    use_sensor_encoding: bool = True
    modalities: tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_sensors < 2:
            raise ContractError(f"need at least 2 sensors, got {self.num_sensors}")
        if self.num_classes < 1:
            raise ContractError(f"need at least 1 class, got {self.num_classes}")
        for name in ("input_dim", "embed_dim", "num_heads", "num_blocks"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fusion not in FUSIONS:
            raise ContractError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.modalities:
            object.__setattr__(self, "modalities", default_modalities(self.num_sensors))
        else:
            object.__setattr__(self, "modalities", tuple(self.modalities))
        if len(self.modalities) != self.num_sensors:
            raise ContractError(
                f"{len(self.modalities)} modality tags for {self.num_sensors} sensors"
            )
        for tag in self.modalities:
            if tag not in MODALITIES:
                raise ContractError(f"unknown modality tag {tag!r}")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)
        if self.ffn_dim < 1:
            raise ContractError(f"ffn_dim must be positive, got {self.ffn_dim}")
        if self.d_model < self.num_heads:
            raise ContractError(
                f"d_model={self.d_model} smaller than num_heads={self.num_heads}"
            )

    @property
    def d_model(self) -> int:
        if self.use_sensor_encoding:
            return self.embed_dim + self.num_sensors
        return self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def fused_dim(self) -> int:
        if self.fusion == "concat":
            return self.num_sensors * self.d_model
        return self.d_model

    def to_dict(self) -> dict:
        return {
            "num_sensors": self.num_sensors,
            "input_dim": self.input_dim,
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "num_blocks": self.num_blocks,
            "num_classes": self.num_classes,
            "fusion": self.fusion,
            "variant": self.variant,
            "ffn_dim": self.ffn_dim,
            "threshold": self.threshold,
            "use_sensor_encoding": self.use_sensor_encoding,
            "modalities": list(self.modalities),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "modalities" in d and d["modalities"] is not None:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)


@dataclass
class EmbedderParams:
    weight: Tensor  # input_dim x embed_dim
    bias: Tensor  # embed_dim


@dataclass
class BlockParams:
    wq: list[Tensor]  # per head, d_model x head_dim
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor  # (num_heads * head_dim) x d_model
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ModelParams:
    """All learnable weights as a named tree; every leaf tracks gradients."""

    embedders: dict[str, EmbedderParams]
    blocks: list[BlockParams]
    clf_weight: Tensor
    clf_bias: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        """Deterministically ordered (path, tensor) pairs over all leaves."""
        out: list[tuple[str, Tensor]] = []
        for tag in sorted(self.embedders):
            emb = self.embedders[tag]
            out.append((f"embedder.{tag}.weight", emb.weight))
            out.append((f"embedder.{tag}.bias", emb.bias))
        for layer, blk in enumerate(self.blocks):
            for i in range(len(blk.wq)):
                out.append((f"block{layer}.head{i}.wq", blk.wq[i]))
                out.append((f"block{layer}.head{i}.wk", blk.wk[i]))
                out.append((f"block{layer}.head{i}.wv", blk.wv[i]))
            out.append((f"block{layer}.wo", blk.wo))
            out.append((f"block{layer}.ln1.gain", blk.ln1_gain))
            out.append((f"block{layer}.ln1.bias", blk.ln1_bias))
            out.append((f"block{layer}.ffn.w1", blk.ffn_w1))
            out.append((f"block{layer}.ffn.b1", blk.ffn_b1))
            out.append((f"block{layer}.ffn.w2", blk.ffn_w2))
            out.append((f"block{layer}.ffn.b2", blk.ffn_b2))
            out.append((f"block{layer}.ln2.gain", blk.ln2_gain))
            out.append((f"block{layer}.ln2.bias", blk.ln2_bias))
        out.append(("classifier.weight", self.clf_weight))
        out.append(("classifier.bias", self.clf_bias))
        return out


@dataclass
class AttentionRecord:
    """One head's sensor-to-sensor attention matrix at one frame.

    ``weights[q, k]`` is how much query sensor ``q`` attends to key sensor
    ``k``; each row is nonnegative and sums to 1.
    """

    layer: int
    head: int
    frame: int
    weights: np.ndarray = field(repr=False)


def _build_params(config: ModelConfig, make) -> ModelParams:
    d, dk, h = config.d_model, config.head_dim, config.num_heads
    embedders = {}
    for tag in sorted(set(config.modalities)):
        embedders[tag] = EmbedderParams(
            weight=make(f"embedder.{tag}.weight", (config.input_dim, config.embed_dim), "weight"),
            bias=make(f"embedder.{tag}.bias", (config.embed_dim,), "bias"),
        )
    blocks = []
    if config.variant == "multitrans":
        for layer in range(config.num_blocks):
            p = f"block{layer}"
            blocks.append(
                BlockParams(
                    wq=[make(f"{p}.head{i}.wq", (d, dk), "weight") for i in range(h)],
                    wk=[make(f"{p}.head{i}.wk", (d, dk), "weight") for i in range(h)],
                    wv=[make(f"{p}.head{i}.wv", (d, dk), "weight") for i in range(h)],
                    wo=make(f"{p}.wo", (h * dk, d), "weight"),
                    ln1_gain=make(f"{p}.ln1.gain", (d,), "gain"),
                    ln1_bias=make(f"{p}.ln1.bias", (d,), "bias"),
                    ffn_w1=make(f"{p}.ffn.w1", (d, config.ffn_dim), "weight"),
                    ffn_b1=make(f"{p}.ffn.b1", (config.ffn_dim,), "bias"),
                    ffn_w2=make(f"{p}.ffn.w2", (config.ffn_dim, d), "weight"),
                    ffn_b2=make(f"{p}.ffn.b2", (d,), "bias"),
                    ln2_gain=make(f"{p}.ln2.gain", (d,), "gain"),
                    ln2_bias=make(f"{p}.ln2.bias", (d,), "bias"),
                )
            )
    return ModelParams(
        embedders=embedders,
        blocks=blocks,
        clf_weight=make("classifier.weight", (config.fused_dim, config.num_classes), "weight"),
        clf_bias=make("classifier.bias", (config.num_classes,), "bias"),
    )


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded Glorot-style initialization; biases zero, layer-norm gains one."""
    rng = np.random.default_rng(np.random.SeedSequence([0x6D74, seed]))

    def make(name: str, shape: tuple[int, ...], kind: str) -> Tensor:
        if kind == "weight":
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            data = rng.normal(0.0, std, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        return Tensor(data, requires_grad=True)

    return _build_params(config, make)


def param_count(config: ModelConfig) -> int:
    """Number of learnable scalars, as a closed form over the config."""
    d, dk, h = config.d_model, config.head_dim, config.num_heads
    n = len(set(config.modalities)) * (config.input_dim * config.embed_dim + config.embed_dim)
    if config.variant == "multitrans":
        per_block = (
            3 * h * d * dk
            + h * dk * d
            + 4 * d
            + d * config.ffn_dim
            + config.ffn_dim
            + config.ffn_dim * d
            + d
        )
        n += config.num_blocks * per_block
    n += config.fused_dim * config.num_classes + config.num_classes
    return n


# ---------------------------------------------------------------------------
# forward pieces


def sensor_encode(phi: Tensor, s: int, num_sensors: int) -> Tensor:
    """Append the one-hot identity of sensor ``s`` (1-based) to its feature."""
    if not 1 <= s <= num_sensors:
        raise ContractError(f"sensor index {s} outside 1..{num_sensors}")
    if phi.ndim != 1:
        raise ContractError(f"sensor_encode expects a vector, got shape {phi.shape}")
    onehot = np.zeros(num_sensors)
    onehot[s - 1] = 1.0
    return T.concat([phi, Tensor(onehot)], axis=0)


def _bias_add(x: Tensor, bias: Tensor) -> Tensor:
    # x: [..., m, n], bias: [n]; built from matmul so no broadcasting is needed
    rows = T.ones(x.shape[:-1] + (1,))
    return T.add(x, T.matmul(rows, T.reshape(bias, (1, bias.size))))


def _mhsa(x: Tensor, block: BlockParams, num_heads: int) -> tuple[Tensor, list[np.ndarray]]:
    d_k = block.wq[0].shape[1]
    inv_sqrt_dk = 1.0 / np.sqrt(d_k)
    heads = []
    weights = []
    for i in range(num_heads):
        q = T.matmul(x, block.wq[i])
        k = T.matmul(x, block.wk[i])
        v = T.matmul(x, block.wv[i])
        scores = T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_dk)
        attn = T.softmax(scores, axis=-1)
        weights.append(attn.numpy())
        heads.append(T.matmul(attn, v))
    stacked = heads[0] if num_heads == 1 else T.concat(heads, axis=-1)
    return T.matmul(stacked, block.wo), weights


def _records_from_weights(
    weights: list[np.ndarray], layer: int, first_frame: int
) -> list[AttentionRecord]:
    records = []
    for head, w in enumerate(weights):
        if w.ndim == 2:
            records.append(AttentionRecord(layer, head, first_frame, w))
        else:
            flat = w.reshape((-1,) + w.shape[-2:])
            for tau in range(flat.shape[0]):
                records.append(AttentionRecord(layer, head, first_frame + tau, flat[tau]))
    records.sort(key=lambda r: (r.frame, r.head))
    return records


def mhsa(
    x: Tensor, block: BlockParams, num_heads: int, layer: int = 0, frame: int = 0
) -> tuple[Tensor, list[AttentionRecord]]:
    """Multi-head self-attention over the sensor axis (queries = keys = values).

    ``x`` is [sensors x d_model], optionally with leading batch axes treated
    as extra frames. Returns the fused output and one attention record per
    head and frame.
    """
    out, weights = _mhsa(x, block, num_heads)
    return out, _records_from_weights(weights, layer, frame)


def _block_forward(
    x: Tensor, block: BlockParams, num_heads: int
) -> tuple[Tensor, list[np.ndarray]]:
    attn_out, weights = _mhsa(x, block, num_heads)
    x1 = T.layer_norm(T.add(x, attn_out), block.ln1_gain, block.ln1_bias)
    hidden = T.gelu(_bias_add(T.matmul(x1, block.ffn_w1), block.ffn_b1))
    ffn_out = _bias_add(T.matmul(hidden, block.ffn_w2), block.ffn_b2)
    x2 = T.layer_norm(T.add(x1, ffn_out), block.ln2_gain, block.ln2_bias)
    return x2, weights


def transformer_block(
    x: Tensor, block: BlockParams, num_heads: int, layer: int = 0, frame: int = 0
) -> tuple[Tensor, list[AttentionRecord]]:
    """Post-norm residual block: LN(x + MHSA(x)), then LN(· + FFN(·))."""
    out, weights = _block_forward(x, block, num_heads)
    return out, _records_from_weights(weights, layer, frame)


def _encode_stack(features: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Embed and sensor-encode raw features [..., S, input_dim] -> [..., S, d_model]."""
    s_count = config.num_sensors
    rows = []
    for s in range(s_count):
        x = Tensor(features[..., s : s + 1, :])  # [..., 1, input_dim]
        emb = params.embedders[config.modalities[s]]
        row = _bias_add(T.matmul(x, emb.weight), emb.bias)
        if config.use_sensor_encoding:
            onehot = np.zeros(features.shape[:-2] + (1, s_count))
            onehot[..., 0, s] = 1.0
            row = T.concat([row, Tensor(onehot)], axis=-1)
        rows.append(row)
    return T.concat(rows, axis=-2)


def _fuse(x: Tensor, config: ModelConfig) -> Tensor:
    """Collapse the sensor axis of [..., S, d_model] per the fusion head."""
    if config.fusion == "sum":
        return T.reduce_sum(x, axis=-2)
    if config.fusion == "max":
        return T.reduce_max(x, axis=-2)
    lead = x.shape[:-2]
    return T.reshape(x, lead + (config.num_sensors * config.d_model,))


def _classify(fused: Tensor, params: ModelParams) -> Tensor:
    if fused.ndim == 1:
        row = T.reshape(fused, (1, fused.size))
        logits = _bias_add(T.matmul(row, params.clf_weight), params.clf_bias)
        return T.reshape(logits, (params.clf_bias.size,))
    return _bias_add(T.matmul(fused, params.clf_weight), params.clf_bias)


def _forward_features(
    features: np.ndarray, params: ModelParams, config: ModelConfig
) -> tuple[Tensor, list[list[np.ndarray]]]:
    """Shared forward: [..., S, input_dim] -> ([..., C] probabilities, attention).

    The returned attention is one list of per-head weight arrays per block,
    empty for the baseline variant.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim < 2 or features.shape[-2:] != (config.num_sensors, config.input_dim):
        raise ContractError(
            f"features shape {features.shape} does not end in "
            f"(sensors, input_dim) = ({config.num_sensors}, {config.input_dim})"
        )
    x = _encode_stack(features, params, config)
    attention: list[list[np.ndarray]] = []
    if config.variant == "multitrans":
        for block in params.blocks:
            x, weights = _block_forward(x, block, config.num_heads)
            attention.append(weights)
    probs = T.sigmoid(_classify(_fuse(x, config), params))
    return probs, attention


def forward_frame(
    psi_tau, params: ModelParams, config: ModelConfig, frame: int = 0
) -> tuple[Tensor, list[AttentionRecord]]:
    """Per-frame forward: S feature vectors -> C event probabilities."""
    feats = np.asarray(psi_tau, dtype=np.float64)
    if feats.shape != (config.num_sensors, config.input_dim):
        raise ContractError(
            f"frame features must be (S, input_dim) = "
            f"({config.num_sensors}, {config.input_dim}), got {feats.shape}"
        )
    probs, attention = _forward_features(feats, params, config)
    records = []
    for layer, weights in enumerate(attention):
        records.extend(_records_from_weights(weights, layer, frame))
    return probs, records


def forward_clip(
    clip, params: ModelParams, config: ModelConfig, collect_attention: bool = True
) -> tuple[Tensor, list[AttentionRecord]]:
    """Forward a whole clip; frames share parameters and do not interact.

    ``clip`` is a FeatureClip or a [T, S, input_dim] array. Each frame is
    forwarded independently (so a duplicated frame yields a bit-identical
    output row). Returns [T, C] probabilities and, unless disabled,
    attention records for every (layer, head, frame).
    """
    feats = np.asarray(getattr(clip, "features", clip), dtype=np.float64)
    if feats.ndim != 3:
        raise ContractError(f"clip features must be rank 3, got shape {feats.shape}")
    if feats.shape[0] < 1:
        raise ContractError("empty clip: need at least one frame")
    rows = []
    records: list[AttentionRecord] = []
    for tau in range(feats.shape[0]):
        probs, recs = forward_frame(feats[tau], params, config, frame=tau)
        rows.append(T.reshape(probs, (1, config.num_classes)))
        if collect_attention:
            records.extend(recs)
    return T.concat(rows, axis=0), records


def forward_frames(features: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Vectorized forward over any leading batch axes: [..., S, input_dim] -> [..., C].

    Equivalent to applying :func:`forward_frame` slice by slice up to
    floating-point rounding (the batched matrix products may round
    differently). Used by the training loop, where only run-to-run
    determinism matters.
    """
    probs, _ = _forward_features(np.asarray(features, dtype=np.float64), params, config)
    return probs


def threshold_activity(probs, theta: float) -> np.ndarray:
    """Binary activity: 1 where the probability strictly exceeds ``theta``."""
    if not 0.0 < theta < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {theta}")
    values = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (values > theta).astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Write a self-describing JSON checkpoint (schema ``multitrans-ckpt-v1``)."""
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "config": config.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.named()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    doc = json.loads(Path(path).read_text())
    tag = doc.get("schema")
    if tag != CHECKPOINT_SCHEMA:
        raise ContractError(f"unsupported checkpoint schema {tag!r}, expected {CHECKPOINT_SCHEMA!r}")
    config = ModelConfig.from_dict(doc["config"])
    stored = doc["params"]

    def make(name: str, shape: tuple[int, ...], kind: str) -> Tensor:
        if name not in stored:
            raise ContractError(f"checkpoint is missing parameter {name!r}")
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise ShapeError(
                f"checkpoint parameter {name!r} has shape {tuple(entry['shape'])}, expected {shape}"
            )
        return Tensor(np.asarray(entry["data"]).reshape(shape), requires_grad=True)

    params = _build_params(config, make)
    expected = {name for name, _ in params.named()}
    extra = set(stored) - expected
    if extra:
        raise ContractError(f"checkpoint has unexpected parameters: {sorted(extra)}")
    return params, config

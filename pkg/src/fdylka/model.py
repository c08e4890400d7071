"""FDY-LKA-CRNN: stem, six FDY-LKA blocks, optional embedding fusion, Bi-GRU, heads."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import ContractError, DimensionError, FormatError, InputError
from .fdy import attention_hidden, fdy_forward, init_fdy
from .lka import LkaConfig, init_lka, lka_block
from .params import ParamSet, conv_fans, xavier_uniform
from .tensor import (
    Tensor,
    concat,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
    tsum,
)

FRAMES_IN = 1001
MEL_BANDS = 128


@dataclass
class ModelConfig:
    class_count: int = 10
    channels: tuple[int, ...] = (32, 64, 128, 256, 256, 256, 256)
    basis_count: int = 4
    stem_pool: tuple[int, int] = (2, 2)
    block_pools: tuple[tuple[int, int], ...] = ((2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2))
    rnn_hidden: int = 256
    rnn_layers: int = 2
    rnn_activation: str = "relu"
    embedding_dim: int | None = None
    dropout_rate: float = 0.5
    width_scale: float = 1.0
    fdy_temperature: float = 1.0
    lka_local_kernel: int = 5
    lka_dilated_kernel: int = 7
    lka_dilation: int = 3
    lka_ffn_expansion: int = 1
    lka_residual: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    input_frames: int = FRAMES_IN
    input_bands: int = MEL_BANDS

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.stem_pool = tuple(self.stem_pool)
        self.block_pools = tuple(tuple(p) for p in self.block_pools)
        if len(self.block_pools) != len(self.channels) - 1:
            raise ContractError(
                f"{len(self.channels) - 1} FDY-LKA blocks need as many pooling windows, "
                f"got {len(self.block_pools)}"
            )
        if self.width_scale <= 0 or min(self.scaled_channels) < 1:
            raise ContractError(f"width_scale {self.width_scale} leaves a layer with no channels")
        if self.rnn_activation not in ("relu", "none"):
            raise ContractError(f"unknown rnn_activation {self.rnn_activation!r}")

    def scale(self, n: int) -> int:
        return max(1, int(round(n * self.width_scale)))

    @property
    def scaled_channels(self) -> tuple[int, ...]:
        return tuple(self.scale(c) for c in self.channels)

    @property
    def hidden(self) -> int:
        return self.scale(self.rnn_hidden)

    @property
    def lka(self) -> LkaConfig:
        return LkaConfig(
            local_kernel=self.lka_local_kernel,
            dilated_kernel=self.lka_dilated_kernel,
            dilation=self.lka_dilation,
            ffn_expansion=self.lka_ffn_expansion,
            residual=self.lka_residual,
        )

    @property
    def output_frames(self) -> int:
        t = self.input_frames // self.stem_pool[0]
        for p in self.block_pools:
            t //= p[0]
        return t

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["stem_pool"] = list(self.stem_pool)
        d["block_pools"] = [list(p) for p in self.block_pools]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelOutput(NamedTuple):
    strong: Tensor  # (B, T, C) probabilities
    weak: Tensor  # (B, C) probabilities
    strong_logits: Tensor
    attention_logits: Tensor


@dataclass
class ClipPrediction:
    strong: np.ndarray  # (frames, classes)
    weak: np.ndarray  # (classes,)
    clip_id: str = ""
    extra: dict = field(default_factory=dict)


def _linear_param(params, rng, name, n_out, n_in):
    params.add(f"{name}.weight", xavier_uniform(rng, (n_out, n_in), n_in, n_out))
    params.add(f"{name}.bias", np.zeros(n_out))


def _bn_param(params, name, c):
    params.add(f"{name}.gamma", np.ones(c))
    params.add(f"{name}.beta", np.zeros(c))
    params.add_buffer(f"{name}.mean", np.zeros(c))
    params.add_buffer(f"{name}.var", np.ones(c))


def _conv_param(params, rng, name, shape):
    fi, fo = conv_fans(shape)
    params.add(f"{name}.weight", xavier_uniform(rng, shape, fi, fo))
    params.add(f"{name}.bias", np.zeros(shape[0]))


def build_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    """Xavier-uniform weights, zero biases, unit BN scales; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    p = ParamSet()
    ch = cfg.scaled_channels
    _conv_param(p, rng, "stem.conv", (ch[0], 1, 3, 3))
    _bn_param(p, "stem.bn", ch[0])
    _conv_param(p, rng, "stem.glu", (ch[0], ch[0], 1, 1))
    for i in range(1, len(ch)):
        pre = f"block{i}"
        init_fdy(
            p, f"{pre}.fdy", ch[i - 1], ch[i], cfg.basis_count,
            attention_hidden(ch[i - 1], cfg.basis_count), rng,
        )
        _bn_param(p, f"{pre}.bn", ch[i])
        _conv_param(p, rng, f"{pre}.glu", (ch[i], ch[i], 1, 1))
        init_lka(p, f"{pre}.lka", ch[i], cfg.lka, rng)
    feat = ch[-1]
    if cfg.embedding_dim:
        _linear_param(p, rng, "fusion.fc", feat, feat + cfg.embedding_dim)
    H = cfg.hidden
    d_in = feat
    for layer in range(cfg.rnn_layers):
        for direction in ("fwd", "bwd"):
            pre = f"rnn{layer}.{direction}"
            p.add(f"{pre}.w_ih", xavier_uniform(rng, (3 * H, d_in), d_in, 3 * H))
            p.add(f"{pre}.w_hh", xavier_uniform(rng, (3 * H, H), H, 3 * H))
            p.add(f"{pre}.b_ih", np.zeros(3 * H))
            p.add(f"{pre}.b_hh", np.zeros(3 * H))
        d_in = 2 * H
    _linear_param(p, rng, "head.strong", cfg.class_count, 2 * H)
    _linear_param(p, rng, "head.attention", cfg.class_count, 2 * H)
    return p


def attention_pool(strong: Tensor, attention_logits: Tensor) -> Tensor:
    """Clip-level probabilities ``(B, C)`` as an attention-weighted frame average.

    The weights are a softmax over frames per class, so each output lies
    between the minimum and maximum of that class's frame probabilities.
    """
    a = softmax(attention_logits, axis=1)
    return tsum(mul(a, strong), axis=1)


def _bn(x, params, name, cfg, training):
    return nn.batch_norm(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        params.buffer(f"{name}.mean"),
        params.buffer(f"{name}.var"),
        training,
        momentum=cfg.bn_momentum,
        eps=cfg.bn_eps,
    )


def _glu(x, params, name):
    return nn.glu_gate(x, params[f"{name}.weight"], params[f"{name}.bias"])


def forward(
    features,
    params: ParamSet,
    cfg: ModelConfig,
    embedding=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> ModelOutput:
    """Run the network on a batch of log-mel features.

    Args:
        features: ``(B, frames, bands)`` or a single ``(frames, bands)`` clip.
        embedding: aligned clip embeddings ``(B, frames_out, D)``; required
            when ``cfg.embedding_dim`` is set.
        training: batch statistics + running-stat updates, dropout on.
        rng: dropout randomness (required when training with dropout).
        trace: if given, ``(name, (frames, freq, channels))`` tuples are appended.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim == 2:
        x = reshape(x, (1, *x.shape))
    if x.ndim != 3 or x.shape[1:] != (cfg.input_frames, cfg.input_bands):
        raise DimensionError(
            f"feature shape {x.shape[-2:]} != ({cfg.input_frames}, {cfg.input_bands}) "
            "(frame, mel) expected"
        )
    if cfg.embedding_dim and embedding is None:
        raise InputError("model is configured with embedding fusion but no embedding was given")
    B = x.shape[0]

    def record(name, t):
        if trace is not None:
            if t.ndim == 4:
                trace.append((name, (t.shape[2], t.shape[3], t.shape[1])))
            else:
                trace.append((name, tuple(t.shape[1:])))

    rate = cfg.dropout_rate if training else 0.0
    h = reshape(x, (B, 1, cfg.input_frames, cfg.input_bands))
    record("input", h)
    h = nn.conv2d(h, params["stem.conv.weight"], params["stem.conv.bias"])
    h = _bn(h, params, "stem.bn", cfg, training)
    h = _glu(h, params, "stem.glu")
    h = nn.avg_pool2d(h, cfg.stem_pool)
    h = nn.dropout(h, rate, training, rng)
    record("stem", h)
    for i, pool in enumerate(cfg.block_pools, start=1):
        pre = f"block{i}"
        h = fdy_forward(
            h, params, f"{pre}.fdy", training, cfg.fdy_temperature, cfg.bn_momentum, cfg.bn_eps
        )
        h = _bn(h, params, f"{pre}.bn", cfg, training)
        h = _glu(h, params, f"{pre}.glu")
        h = lka_block(h, params, f"{pre}.lka", cfg.lka, training, cfg.bn_momentum, cfg.bn_eps)
        h = nn.avg_pool2d(h, pool)
        h = nn.dropout(h, rate, training, rng)
        record(pre, h)

    _, C, T, F = h.shape
    if F != 1:
        raise DimensionError(f"frequency axis: {F} bins remain after the last block, expected 1")
    seq = transpose(reshape(h, (B, C, T)), (0, 2, 1))  # (B, T, C)
    if cfg.embedding_dim:
        emb = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
        if emb.ndim == 2:
            emb = reshape(emb, (1, *emb.shape))
        if emb.shape != (B, T, cfg.embedding_dim):
            raise DimensionError(
                f"embedding shape {emb.shape} != ({B}, {T}, {cfg.embedding_dim})"
            )
        seq = concat([seq, emb], axis=-1)
        record("fusion.concat", seq)
        seq = nn.linear(seq, params["fusion.fc.weight"], params["fusion.fc.bias"])
        record("fusion.fc", seq)
    for layer in range(cfg.rnn_layers):
        seq = nn.gru_bidirectional(seq, params.leaves, f"rnn{layer}")
        if cfg.rnn_activation == "relu":
            seq = relu(seq)
        record(f"rnn{layer}", seq)
    seq = nn.dropout(seq, rate, training, rng)
    logits = nn.linear(seq, params["head.strong.weight"], params["head.strong.bias"])
    strong = sigmoid(logits)
    record("strong", strong)
    att = nn.linear(seq, params["head.attention.weight"], params["head.attention.bias"])
    weak = attention_pool(strong, att)
    return ModelOutput(strong, weak, logits, att)


def predict(features, params: ParamSet, cfg: ModelConfig, embedding=None) -> ModelOutput:
    """Eval-mode forward without graph recording."""
    from .tensor import no_grad

    with no_grad():
        return forward(features, params, cfg, embedding, training=False)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FLKC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamSet, cfg: ModelConfig, meta: dict | None = None) -> None:
    """Write ``FLKC | u32 version | u32 header len | JSON header | f64 LE payloads``."""
    entries = []
    offset = 0
    arrays = []
    for kind, items in (("leaf", params.leaves.items()), ("buffer", params.buffers.items())):
        for name, value in items:
            arr = value.data if isinstance(value, Tensor) else value
            entries.append(
                {"id": name, "kind": kind, "shape": list(arr.shape), "offset": offset}
            )
            offset += arr.size * 8
            arrays.append(arr)
    header = json.dumps(
        {"config": cfg.to_dict(), "leaves": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    payload = memoryview(raw)[12 + hlen :]
    params = ParamSet()
    for e in header["leaves"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        if start + 8 * n > len(payload):
            raise FormatError(f"{path}: payload truncated at leaf {e['id']}")
        arr = np.frombuffer(payload[start : start + 8 * n], dtype="<f8").reshape(e["shape"])
        if e["kind"] == "leaf":
            params.add(e["id"], arr)
        else:
            params.add_buffer(e["id"], arr)
    return params, ModelConfig.from_dict(header["config"]), header.get("meta", {})

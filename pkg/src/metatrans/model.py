"""Two-stream network with temporal-static subtraction.

The temporal stream runs the encoder stack on ``x + P``; the static stream runs
a stack on raw ``x`` and averages over time. Their difference ``F`` feeds the
frame aggregation network (FAN), the task head and two domain heads.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as tn
from .config import ModelConfig
from .tensor import DimensionError, Tensor

CHECKPOINT_MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1

# how the per-frame representation F is formed
SUBTRACT = "sub"            # F = M1(x + P) - M2(x)
NO_SUBTRACT = "none"        # F = M1(x + P)
FS_POOLING = "fs_pooling"   # F = M1(x + P) - mean_t M1(x + P)
FEATURE_MODES = (SUBTRACT, NO_SUBTRACT, FS_POOLING)


class CheckpointError(ValueError):
    pass


class MetaTransModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.encoder_stack = [nn.init_encoder_block(rng, c.d, c.n_heads, c.d_head, c.d_ff)
                              for _ in range(c.n_layers)]
        if c.share_encoder:
            self.static_stack = self.encoder_stack
        else:
            self.static_stack = [nn.init_encoder_block(rng, c.d, c.n_heads, c.d_head, c.d_ff)
                                 for _ in range(c.n_layers)]
        self._pos_table = Tensor(nn.positional_embedding(c.t_max, c.d))
        self.pos_emb_reads = 0
        self.fan = nn.init_mlp_head(rng, c.d, c.head_hidden, c.d_video)
        self.task_head = nn.init_mlp_head(rng, c.d_video, c.head_hidden, c.n_classes)
        self.domain_head_frame = nn.init_mlp_head(rng, c.d, c.head_hidden, 2)
        self.domain_head_video = nn.init_mlp_head(rng, c.d_video, c.head_hidden, 2)

    def positional(self, T: int) -> Tensor:
        if T > self.config.t_max:
            raise DimensionError(f"sequence length {T} exceeds t_max {self.config.t_max}")
        self.pos_emb_reads += 1
        return Tensor(self._pos_table.data[:T])

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, blk in enumerate(self.encoder_stack):
            for k, v in blk.named().items():
                out[f"encoder.{i}.{k}"] = v
        if self.static_stack is not self.encoder_stack:
            for i, blk in enumerate(self.static_stack):
                for k, v in blk.named().items():
                    out[f"static_encoder.{i}.{k}"] = v
        for prefix, head in (("fan", self.fan), ("task_head", self.task_head),
                             ("domain_head_frame", self.domain_head_frame),
                             ("domain_head_video", self.domain_head_video)):
            for k, v in head.named().items():
                out[f"{prefix}.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items()
                if k.startswith(("encoder.", "static_encoder.", "fan.", "task_head."))}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, arr in state.items():
            if params[k].shape != arr.shape:
                raise CheckpointError(f"{k}: shape {arr.shape}, expected {params[k].shape}")
            params[k].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "MetaTransModel":
        clone = MetaTransModel.__new__(MetaTransModel)
        clone.config = self.config
        clone.pos_emb_reads = 0
        clone._pos_table = self._pos_table

        def cp_block(b):
            return nn.EncoderBlockParams(**{k: Tensor(v.data.copy(), requires_grad=True)
                                            for k, v in b.named().items()})

        def cp_head(h):
            mk = lambda t: None if t is None else Tensor(t.data.copy(), requires_grad=True)  # noqa: E731
            return nn.MLPHead(mk(h.w1), mk(h.b1), mk(h.w2), mk(h.b2))

        clone.encoder_stack = [cp_block(b) for b in self.encoder_stack]
        clone.static_stack = (clone.encoder_stack if self.static_stack is self.encoder_stack
                              else [cp_block(b) for b in self.static_stack])
        clone.fan = cp_head(self.fan)
        clone.task_head = cp_head(self.task_head)
        clone.domain_head_frame = cp_head(self.domain_head_frame)
        clone.domain_head_video = cp_head(self.domain_head_video)
        return clone


def init_model(config: ModelConfig, seed: int = 0) -> MetaTransModel:
    return MetaTransModel(config, np.random.default_rng(seed))


def _check_input(x, model: MetaTransModel) -> Tensor:
    x = tn.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != model.config.d:
        raise DimensionError(f"expected [..., T, {model.config.d}] input, got {x.shape}")
    return x


def forward_temporal(x, model: MetaTransModel) -> Tensor:
    """Temporal stream: encoder stack on ``x + P``; returns ``[..., T, d]``."""
    x = _check_input(x, model)
    return nn.encoder_stack(x + model.positional(x.shape[-2]), model.encoder_stack,
                            model.config.ln_eps)


def forward_static(x, model: MetaTransModel) -> Tensor:
    """Static stream: encoder stack on raw ``x`` then a time average; ``[..., 1, d]``."""
    x = _check_input(x, model)
    if x.shape[-2] < 1:
        raise DimensionError("static stream needs at least one frame")
    return nn.mean_pool_time(nn.encoder_stack(x, model.static_stack, model.config.ln_eps))


def _fused_streams(x: Tensor, model: MetaTransModel) -> Tensor:
    """Both streams through the shared stack in one batched pass."""
    T = x.shape[-2]
    both = tn.concat([x + model.positional(T), x], axis=0)
    out = nn.encoder_stack(both, model.encoder_stack, model.config.ln_eps)
    n = x.shape[0]
    return out[:n] - nn.mean_pool_time(out[n:])


def subtract_features(x, model: MetaTransModel, mode: str = SUBTRACT,
                      fused: bool = False) -> Tensor:
    """Latent temporal embedding; the static row broadcasts over all T frames.

    ``fused`` evaluates the two streams as one batch when they share weights;
    the result equals the unfused path up to floating-point summation order.
    """
    if mode == SUBTRACT and fused and model.static_stack is model.encoder_stack:
        x = _check_input(x, model)
        if x.ndim == 3:
            return _fused_streams(x, model)
    z = forward_temporal(x, model)
    if mode == SUBTRACT:
        return z - forward_static(x, model)
    if mode == NO_SUBTRACT:
        return z
    if mode == FS_POOLING:
        return z - nn.mean_pool_time(z)
    raise ValueError(f"unknown feature mode {mode!r}")


def aggregate(F, model: MetaTransModel) -> Tensor:
    """FAN: per-frame affine + ReLU, mean over time, then affine -> ``[..., 1, d_video]``."""
    h = nn.mean_pool_time(nn.mlp_hidden(F, model.fan))
    return h @ model.fan.w2 + model.fan.b2


def model_forward(x, model: MetaTransModel, lam: float, mode: str = SUBTRACT,
                  with_domain: bool = True, fused: bool = False) -> dict[str, Tensor]:
    """Task logits ``[..., 1, K]`` plus frame ``[..., T, 2]`` / video ``[..., 1, 2]`` domain logits.

    Gradient reversal with scale ``lam`` sits between the features and both
    domain heads, so minimizing the summed loss trains the heads to separate
    domains and the feature extractor to confuse them.
    """
    F = subtract_features(x, model, mode, fused)
    video = aggregate(F, model)
    out = {"features": F, "video": video, "task_logits": nn.mlp_head(video, model.task_head)}
    if with_domain:
        out["frame_domain_logits"] = nn.mlp_head(nn.gradient_reversal(F, lam),
                                                 model.domain_head_frame)
        out["video_domain_logits"] = nn.mlp_head(nn.gradient_reversal(video, lam),
                                                 model.domain_head_video)
    return out


def predict(x: np.ndarray, model: MetaTransModel, mode: str = SUBTRACT,
            batch: int = 256) -> np.ndarray:
    """Task logits ``[N, K]`` without recording a graph."""
    outs = []
    with tn.no_grad():
        for i in range(0, len(x), batch):
            logits = model_forward(x[i:i + batch], model, 0.0, mode, with_domain=False,
                                   fused=True)
            outs.append(logits["task_logits"].data[:, 0, :])
    if not outs:
        return np.zeros((0, model.config.n_classes))
    return np.concatenate(outs, axis=0)


def predict_stream(x: np.ndarray, model: MetaTransModel, stream: str,
                   batch: int = 256) -> np.ndarray:
    """Raw ``temporal`` ([N, T, d]) or ``static`` ([N, 1, d]) stream output, no graph."""
    fn = {"temporal": forward_temporal, "static": forward_static}[stream]
    with tn.no_grad():
        outs = [fn(x[i:i + batch], model).data for i in range(0, len(x), batch)]
    if not outs:
        T = x.shape[1] if stream == "temporal" else 1
        return np.zeros((0, T, model.config.d))
    return np.concatenate(outs, axis=0)


# -- checkpoint file ---------------------------------------------------------

def encode_checkpoint(model: MetaTransModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, p in model.named_parameters().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8:
        raise CheckpointError("checkpoint truncated in header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"magic: expected {CHECKPOINT_MAGIC!r}, got {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"version: expected {CHECKPOINT_VERSION}, got {version}")
    pos, state = 8, {}

    def need(n, what):
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated in {what}")

    while pos < len(blob):
        need(4, "name length")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(n, "name")
        try:
            name = blob[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("name: invalid UTF-8") from exc
        pos += n
        need(4, f"{name} rank")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(4 * rank, f"{name} dims")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(8 * count, f"{name} payload")
        state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return state


def save_checkpoint(model: MetaTransModel, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path: str | Path, model: MetaTransModel) -> MetaTransModel:
    model.load_state_dict(decode_checkpoint(Path(path).read_bytes()))
    return model

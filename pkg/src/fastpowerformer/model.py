"""Full forecaster assembly and its ablation variants.

Pipeline for the full model: LSTM over time -> transpose so channels become
tokens -> embed each trajectory -> reversible LSH-attention encoder -> DCT
channel attention -> per-token horizon projection -> channel combination.
Disabled components are replaced by the simplest trainable stand-in so every
ablation row is a working forecaster.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .fecam import Fecam
from .lstm import LstmEmbedding, embed_project
from .nn import Module, glorot
from .revnet import AttentionSublayer, FeedForward, RevLayer, reversible_stack
from .tensor import ShapeError, Tensor, add, matmul, reshape, transpose_axes
from .variate import tokenize_trajectories, transpose_input

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ForecastOutput",
    "Model",
    "build_model",
    "ablation_grid",
    "ABLATION_ROWS",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1

# (transpose, fecam, lstm) per ablation row
ABLATION_ROWS: dict[str, tuple[bool, bool, bool]] = {
    "I": (False, False, False),
    "II": (True, True, False),
    "III": (True, False, True),
    "IV": (False, True, True),
    "V": (True, True, True),
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 288
    pred_len: int = 288
    n_channels: int = 16
    d_model: int = 128
    d_h: int = 32
    n_layers: int = 2
    n_buckets: int = 4
    lsh_rounds: int = 4
    d_int: Optional[int] = None
    d_ff: Optional[int] = None
    chunk: int = 16
    use_transpose: bool = True
    use_fecam: bool = True
    use_lstm: bool = True
    attention: str = "lsh"
    reversible: bool = True
    transpose_source: str = "lstm_output"
    fecam_position: str = "post_encoder"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("seq_len", "pred_len", "n_channels", "d_model", "d_h", "n_layers", "lsh_rounds", "chunk"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.d_model % 2:
            raise ConfigError("d_model", f"must be even for the reversible split, got {self.d_model}")
        if self.n_buckets < 1 or (self.n_buckets != 1 and self.n_buckets % 2):
            raise ConfigError("n_buckets", f"must be 1 (dense pool) or an even count, got {self.n_buckets}")
        for name in ("d_int", "d_ff"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, (int, np.integer)) or v < 1):
                raise ConfigError(name, f"must be a positive integer or unset, got {v!r}")
        for name in ("use_transpose", "use_fecam", "use_lstm", "reversible"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(name, f"must be a boolean, got {getattr(self, name)!r}")
        if self.attention not in ("lsh", "dense"):
            raise ConfigError("attention", f"must be 'lsh' or 'dense', got {self.attention!r}")
        if self.transpose_source not in ("lstm_output", "raw_input"):
            raise ConfigError("transpose_source", f"must be 'lstm_output' or 'raw_input', got {self.transpose_source!r}")
        if self.fecam_position not in ("post_encoder", "pre_encoder"):
            raise ConfigError("fecam_position", f"must be 'post_encoder' or 'pre_encoder', got {self.fecam_position!r}")
        if self.use_transpose and self.token_count > self.seq_len:
            raise ConfigError("d_h", f"{self.token_count} channel tokens exceed seq_len {self.seq_len}")

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.use_transpose, self.use_fecam, self.use_lstm)

    @property
    def ablation_id(self) -> Optional[str]:
        for label, flags in ABLATION_ROWS.items():
            if flags == self.flags:
                return label
        return None

    @property
    def token_count(self) -> int:
        if not self.use_transpose:
            return self.seq_len
        if self.use_lstm and self.transpose_source == "lstm_output":
            return self.d_h
        return self.n_channels

    @property
    def d_int_eff(self) -> int:
        return self.d_int if self.d_int is not None else max(self.d_model // 4, 8)

    @property
    def d_ff_eff(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model setting")
        return cls(**d)


@dataclass
class ForecastOutput:
    y_hat: Tensor  # (B, P), normalised units
    power_mean: Optional[float] = None
    power_std: Optional[float] = None

    def denormalized(self) -> np.ndarray:
        if self.power_mean is None or self.power_std is None:
            raise ValueError("no normaliser statistics attached to this forecast")
        return self.y_hat.data * self.power_std + self.power_mean


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, width, 2) * (-np.log(10000.0) / width))
    pe = np.zeros((length, width))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : width // 2]
    return pe


class Model(Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        T, V, D = cfg.seq_len, cfg.n_channels, cfg.d_model
        self.lstm = self.w_e = self.b_e = None
        self.fecam = None
        if cfg.use_lstm:
            self.lstm = self.add_child("lstm", LstmEmbedding(V, cfg.d_h, rng))
            if not cfg.use_transpose:
                self.w_e = self.add_param("embed.W_e", glorot(rng, cfg.d_h, D))
                self.b_e = self.add_param("embed.b_e", np.zeros(D))
            elif cfg.transpose_source == "raw_input":
                self.w_e = self.add_param("embed.W_e", 0.1 * glorot(rng, cfg.d_h, V))
                self.b_e = self.add_param("embed.b_e", np.zeros(V))
        if cfg.use_transpose:
            self.w_tok = self.add_param("tokens.W", glorot(rng, T, D))
            self.b_tok = self.add_param("tokens.b", np.zeros(D))
        else:
            if not cfg.use_lstm:
                self.w_val = self.add_param("value.W", glorot(rng, V, D))
                self.b_val = self.add_param("value.b", np.zeros(D))
            self.positions = Tensor(sinusoidal_positions(T, D))
        if cfg.use_fecam:
            length = T if cfg.fecam_position == "pre_encoder" else D
            self.fecam = self.add_child("fecam", Fecam(length, cfg.d_int_eff, rng))
        half = D // 2
        self.layers: list[RevLayer] = []
        for i in range(cfg.n_layers):
            attn = AttentionSublayer(
                half, rng, kind=cfg.attention, n_buckets=cfg.n_buckets,
                n_rounds=cfg.lsh_rounds, seed=cfg.seed * 1009 + i,
            )
            ffn = FeedForward(half, cfg.d_ff_eff, rng, chunk=cfg.chunk)
            self.layers.append(self.add_child(f"blocks.{i}", RevLayer(attn, ffn)))
        C = cfg.token_count
        self.w_p = self.add_param("head.W_p", glorot(rng, D, cfg.pred_len))
        self.b_p = self.add_param("head.b_p", np.zeros(cfg.pred_len))
        self.w_c = self.add_param("head.w_c", np.full((C, 1), 1.0 / C))
        self.b_c = self.add_param("head.b_c", np.zeros(1))

    # -- pieces -----------------------------------------------------------
    def _fecam_over_time(self, seq: Tensor) -> Tensor:
        # seq is (B, T, C); transform each channel's length-T trajectory
        return transpose_axes(self.fecam(transpose_input(seq)), (0, 2, 1))

    def embed(self, x: Tensor) -> Tensor:
        cfg = self.config
        pre_fecam = cfg.use_fecam and cfg.fecam_position == "pre_encoder"
        if cfg.use_transpose:
            if cfg.use_lstm and cfg.transpose_source == "lstm_output":
                src = self.lstm(x)
            elif cfg.use_lstm:
                src = add(x, embed_project(self.lstm(x), self.w_e, self.b_e))
            else:
                src = x
            traj = transpose_input(src)
            if pre_fecam:
                traj = self.fecam(traj)
            return tokenize_trajectories(traj, self.w_tok, self.b_tok).tokens
        if pre_fecam:
            x = self._fecam_over_time(x)
        if cfg.use_lstm:
            e = embed_project(self.lstm(x), self.w_e, self.b_e)
        else:
            e = add(matmul(x, self.w_val), self.b_val)
        return add(e, self.positions)

    def encode(self, tokens: Tensor) -> Tensor:
        z = reversible_stack(tokens, self.layers, reconstruct=self.config.reversible)
        if self.config.use_fecam and self.config.fecam_position == "post_encoder":
            z = self.fecam(z)
        return z

    def head(self, z: Tensor) -> Tensor:
        per_token = add(matmul(z, self.w_p), self.b_p)  # (B, C, P)
        combined = add(matmul(transpose_axes(per_token, (0, 2, 1)), self.w_c), self.b_c)
        return reshape(combined, (z.shape[0], self.config.pred_len))

    def forward(self, x) -> ForecastOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.n_channels):
            raise ShapeError(f"model expects (B, {cfg.seq_len}, {cfg.n_channels}) input, got {x.shape}")
        return ForecastOutput(self.head(self.encode(self.embed(x))))

    __call__ = forward

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            p.assign(state[name])


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def ablation_grid(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The five transpose/FECAM/LSTM combinations, labelled I..V."""
    return [
        (label, replace(base, use_transpose=t, use_fecam=f, use_lstm=l))
        for label, (t, f, l) in ABLATION_ROWS.items()
    ]


def save_checkpoint(path, model: Model, extra: Optional[dict] = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = build_model(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta.get("extra", {})

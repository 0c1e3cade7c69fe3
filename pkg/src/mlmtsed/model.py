"""The multi-label multi-task CRNN and its checkpoint format.

Layout of one forward pass (batch-first, time-major after the conv block)::

    spec [B, 1, M, T]
      -> 3 x (conv 5x5 SAME -> BN -> ReLU -> spectral max-pool -> dropout)
      -> X [B, T, F]
      -> bidirectional GRU, z_t = [h_b ; h_f] W_z + b_z        -> Z [B, T, 2H]
      -> a_t = ReLU(BN(x_t W_x + b_x)) ; z_t                   -> A [B, T, 4H]
      -> sigmoid(a_t W_a + b_a), unflattened class-major       -> [B, T, C, 3]
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_features import Standardizer
from .errors import ConfigMismatch, CorruptFile, InvalidConfig, MissingInput, ShapeMismatch, VersionMismatch

CHECKPOINT_MAGIC = b"PAED"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_classes: int = 16
    M: int = 40
    T: int = 512
    F: int = 256
    H: int = 256
    pool_sizes: tuple[int, ...] = (5, 4, 2)
    kernel_size: int = 5
    dropout: float = 0.25

    def __post_init__(self):
        self.pool_sizes = tuple(int(k) for k in self.pool_sizes)

    def validate(self) -> None:
        if min(self.n_classes, self.F, self.H, self.T) < 1:
            raise InvalidConfig("n_classes, F, H and T must all be >= 1")
        if math.prod(self.pool_sizes) != self.M:
            raise InvalidConfig(f"pool sizes {self.pool_sizes} do not reduce M={self.M} to 1")
        if self.kernel_size % 2 == 0:
            raise InvalidConfig("kernel_size must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_sizes"] = list(self.pool_sizes)
        return d


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    buffers: dict[str, ad.BatchNormState] = field(default_factory=dict)

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            {
                k: ad.BatchNormState(b.mean.copy(), b.var.copy(), b.count, b.momentum, b.eps)
                for k, b in self.buffers.items()
            },
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, H, C, k = cfg.F, cfg.H, cfg.n_classes, cfg.kernel_size
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for i in range(1, len(cfg.pool_sizes) + 1):
        shapes[f"conv{i}.kernel"] = (F, cin, k, k)
        shapes[f"conv{i}.bias"] = (F,)
        shapes[f"bn{i}.gamma"] = (F,)
        shapes[f"bn{i}.beta"] = (F,)
        cin = F
    for d in ("fwd", "bwd"):
        shapes[f"gru_{d}.W"] = (F, 3 * H)
        shapes[f"gru_{d}.U"] = (H, 3 * H)
        shapes[f"gru_{d}.b"] = (3 * H,)
    shapes["W_z"] = (2 * H, 2 * H)
    shapes["b_z"] = (2 * H,)
    shapes["W_x"] = (F, 2 * H)
    shapes["b_x"] = (2 * H,)
    shapes["bn_res.gamma"] = (2 * H,)
    shapes["bn_res.beta"] = (2 * H,)
    # a_t concatenates two 2H-vectors
    shapes["W_a"] = (4 * H, 3 * C)
    shapes["b_a"] = (3 * C,)
    return shapes


def _bn_names(cfg: ModelConfig) -> list[str]:
    return [f"bn{i}" for i in range(1, len(cfg.pool_sizes) + 1)] + ["bn_res"]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, BN gamma 1 / beta 0."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            weights[name] = np.ones(shape)
        elif len(shape) == 1:
            weights[name] = np.zeros(shape)
        else:
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights[name] = rng.uniform(-limit, limit, size=shape)
    buffers = {}
    for bn in _bn_names(cfg):
        n = cfg.F if bn != "bn_res" else 2 * cfg.H
        buffers[bn] = ad.BatchNormState.zeros(n)
    return ModelParams(weights, buffers)


def conv_block_forward(spec, p, buffers, cfg: ModelConfig, mode="infer", rng=None):
    """``[B, 1, M, T]`` -> ``X [B, T, F]``."""
    h = ad.as_tensor(spec)
    if h.ndim == 3:
        h = ad.reshape(h, (1,) + h.shape)
    if h.shape[1:] != (1, cfg.M, cfg.T):
        raise ShapeMismatch(f"expected input [B, 1, {cfg.M}, {cfg.T}], got {h.shape}")
    for i, k in enumerate(cfg.pool_sizes, 1):
        h = ad.conv2d_same(h, p[f"conv{i}.kernel"], p[f"conv{i}.bias"])
        h = ad.batchnorm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], buffers[f"bn{i}"], mode, axis=1)
        h = ad.relu(h)
        h = ad.maxpool_spectral(h, k)
        h = ad.dropout(h, cfg.dropout, rng, mode)
    B = h.shape[0]
    return ad.transpose(ad.reshape(h, (B, cfg.F, cfg.T)), (0, 2, 1))


def _run_gru(xproj, W_U, H, reverse=False):
    B, T = xproj.shape[:2]
    U_gates, U_cand = W_U[:, : 2 * H], W_U[:, 2 * H :]
    h = ad.Tensor(np.zeros((B, H)))
    states = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = ad.gru_step(xproj[:, t], h, U_gates, U_cand, H)
        states[t] = h
    return ad.stack(states, axis=1)


def bigru_forward(X, p, H: int):
    """``X [B, T, F]`` -> ``Z [B, T, 2H]``; zero initial state in both directions."""
    X = ad.as_tensor(X)
    hf = _run_gru(ad.dense(X, p["gru_fwd.W"], p["gru_fwd.b"]), p["gru_fwd.U"], H)
    hb = _run_gru(ad.dense(X, p["gru_bwd.W"], p["gru_bwd.b"]), p["gru_bwd.U"], H, reverse=True)
    return ad.dense(ad.concat([hb, hf], axis=-1), p["W_z"], p["b_z"])


def residual_combine(X, Z, p, buffers, mode="infer", rng=None, dropout=0.0, use_bn=True):
    proj = ad.dense(X, p["W_x"], p["b_x"])
    if use_bn:
        proj = ad.batchnorm(proj, p["bn_res.gamma"], p["bn_res.beta"], buffers["bn_res"], mode, axis=-1)
    res = ad.dropout(ad.relu(proj), dropout, rng, mode)
    return ad.concat([res, Z], axis=-1)


def output_head(A, p, n_classes: int):
    """Sigmoid head; ``[..., 3C]`` unflattened to ``[..., C, 3]`` (class-major)."""
    o = ad.sigmoid(ad.dense(A, p["W_a"], p["b_a"]))
    return ad.reshape(o, o.shape[:-1] + (n_classes, 3))


class CRNN:
    """Holds config and parameters; each :meth:`forward` builds a fresh tape."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.leaves: dict[str, ad.Tensor] = {}

    def forward(self, spec, mode="infer", rng=None) -> ad.Tensor:
        cfg = self.cfg
        self.leaves = p = {
            k: ad.Tensor(v, requires_grad=(mode == "train"), name=k) for k, v in self.params.weights.items()
        }
        bufs = self.params.buffers
        X = conv_block_forward(spec, p, bufs, cfg, mode, rng)
        Z = ad.dropout(bigru_forward(X, p, cfg.H), cfg.dropout, rng, mode)
        A = residual_combine(X, Z, p, bufs, mode, rng, cfg.dropout)
        return output_head(A, p, cfg.n_classes)

    def gradients(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.leaves.items()}

    def predict(self, spec) -> np.ndarray:
        """Infer-mode outputs ``[B, T, C, 3]`` as a plain array."""
        spec = np.asarray(spec, dtype=np.float64)
        if spec.ndim == 2:
            spec = spec[None, None]
        elif spec.ndim == 3:
            spec = spec[:, None]
        out = self.forward(spec, mode="infer").data
        self.leaves = {}
        return out


# checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ModelParams
    standardizer: Standardizer | None = None
    thresholds: dict = field(default_factory=dict)
    class_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _blocks(ckpt: Checkpoint):
    for name in sorted(ckpt.params.weights):
        yield f"param.{name}", ckpt.params.weights[name]
    for name in sorted(ckpt.params.buffers):
        b = ckpt.params.buffers[name]
        yield f"buffer.{name}.mean", b.mean
        yield f"buffer.{name}.var", b.var
    if ckpt.standardizer is not None:
        yield "standardizer.mean", ckpt.standardizer.mean
        yield "standardizer.std", ckpt.standardizer.std


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest, payload, offset = [], [], 0
    for name, arr in _blocks(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.model_cfg.to_dict(),
        "manifest": manifest,
        "buffers": {
            k: {"count": b.count, "momentum": b.momentum, "eps": b.eps}
            for k, b in sorted(ckpt.params.buffers.items())
        },
        "standardizer": None if ckpt.standardizer is None else {"min_std": ckpt.standardizer.min_std},
        "thresholds": ckpt.thresholds,
        "class_names": ckpt.class_names,
        "meta": ckpt.meta,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hdr)) + hdr + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` given, refuse a different model config."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: bad magic or truncated")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    try:
        header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    data = body[12 + hlen :]
    arrays = {}
    for entry in header["manifest"]:
        n = math.prod(entry["shape"]) * 8
        chunk = data[entry["offset"] : entry["offset"] + n]
        if len(chunk) != n:
            raise CorruptFile(f"{path}: block {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()

    cfg = ModelConfig(**header["config"])
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise ConfigMismatch(f"{path}: checkpoint config {cfg.to_dict()} != expected {expect.to_dict()}")
    weights = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    buffers = {
        k: ad.BatchNormState(
            arrays[f"buffer.{k}.mean"], arrays[f"buffer.{k}.var"], b["count"], b["momentum"], b["eps"]
        )
        for k, b in header["buffers"].items()
    }
    std = None
    if header["standardizer"] is not None:
        std = Standardizer(
            arrays["standardizer.mean"], arrays["standardizer.std"], header["standardizer"]["min_std"]
        )
    return Checkpoint(
        model_cfg=cfg,
        params=ModelParams(weights, buffers),
        standardizer=std,
        thresholds=header["thresholds"],
        class_names=header["class_names"],
        meta=header["meta"],
    )

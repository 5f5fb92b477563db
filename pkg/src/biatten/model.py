"""BiAtten-Net: two-branch encoder, bi-directional attention blocks, fusion head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import metrics
from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    adaptive_avg_pool,
    add,
    batch_norm,
    concat,
    conv2d,
    flatten,
    linear,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    softmax_rows,
    transpose_last,
)

MODES = ("NoBAB", "HRtoSR", "SRtoHR", "Bidirectional")
MODE_LABELS = {
    "NoBAB": "w/o BAB",
    "HRtoSR": "HR→SR",
    "SRtoHR": "SR→HR",
    "Bidirectional": "with BAB",
}
VARIANCE_FLOOR = 1e-8
PROBE_STAGES = ("bab1_before", "bab1_after", "bab2_before", "bab2_after")


@dataclass
class ModelConfig:
    channels: int = 32
    depth: int = 2
    hidden: int = 512
    pool_out: tuple = (4, 4)
    mode: str = "Bidirectional"
    patch_size: int = 32
    in_channels: int = 3
    shared_branches: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.pool_out = tuple(int(v) for v in self.pool_out)
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")
        if self.channels < 1 or self.depth < 1 or self.hidden < 1:
            raise ValueError("channels, depth and hidden must be positive")
        if len(self.pool_out) != 2 or not all(1 <= v <= self.patch_size for v in self.pool_out):
            raise ValueError(f"pool_out {self.pool_out} must fit inside the {self.patch_size}px patch")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_out"] = list(self.pool_out)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor


@dataclass
class EncoderParams:
    convs: list
    norms: list

    @property
    def depth(self) -> int:
        return len(self.convs)

    @property
    def channels(self) -> int:
        return self.convs[-1].weight.shape[0]


@dataclass
class QKV:
    q: Conv
    k: Conv
    v: Conv


@dataclass
class BABParams:
    hr: QKV
    sr: QKV


@dataclass
class ModelParams:
    config: ModelConfig
    encoder_hr: EncoderParams
    encoder_sr: EncoderParams
    bab1: BABParams
    bab2: BABParams
    fc1: Dense
    fc2: Dense
    scaler: Optional[object] = None  # MOS normalisation fitted by the trainer

    @property
    def mode(self) -> str:
        return self.config.mode

    def _walk(self):
        """Yield (name, tensor-or-state) for every parameter slot, shared slots repeated."""
        for prefix, enc in (("encoder_hr", self.encoder_hr), ("encoder_sr", self.encoder_sr)):
            for i, (conv, norm) in enumerate(zip(enc.convs, enc.norms)):
                yield f"{prefix}.{i}.conv.weight", conv.weight
                yield f"{prefix}.{i}.conv.bias", conv.bias
                yield f"{prefix}.{i}.bn.gamma", norm.gamma
                yield f"{prefix}.{i}.bn.beta", norm.beta
                yield f"{prefix}.{i}.bn", norm.state
        for bname, bab in (("bab1", self.bab1), ("bab2", self.bab2)):
            for branch in ("hr", "sr"):
                qkv = getattr(bab, branch)
                for proj in ("q", "k", "v"):
                    conv = getattr(qkv, proj)
                    yield f"{bname}.{branch}.{proj}.weight", conv.weight
                    yield f"{bname}.{branch}.{proj}.bias", conv.bias
        for hname, dense in (("head.fc1", self.fc1), ("head.fc2", self.fc2)):
            yield f"{hname}.weight", dense.weight
            yield f"{hname}.bias", dense.bias

    def _unique(self):
        seen = set()
        for name, obj in self._walk():
            if id(obj) in seen:
                continue
            seen.add(id(obj))
            yield name, obj

    def named_parameters(self) -> dict:
        return {n: t for n, t in self._unique() if isinstance(t, Tensor)}

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict:
        out = {}
        for name, obj in self._unique():
            if isinstance(obj, BatchNormState):
                out[f"{name}.running_mean"] = obj.running_mean
                out[f"{name}.running_var"] = obj.running_var
        return out

    def state_dict(self) -> dict:
        sd = {n: t.data for n, t in self.named_parameters().items()}
        sd.update(self.named_buffers())
        return sd

    def load_state_dict(self, sd: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(sd))
        unexpected = sorted(set(sd) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, arr in sd.items():
            if own[name].shape != np.shape(arr):
                raise ShapeError(f"{name}: expected shape {own[name].shape}, got {np.shape(arr)}")
        for name, t in self.named_parameters().items():
            t.data = np.array(sd[name], dtype=t.dtype)
        for name, buf in self.named_buffers().items():
            buf[...] = sd[name]

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelParams":
        other = self.copy()
        for t in other.named_parameters().values():
            t.data = t.data.astype(dtype)
        for name, obj in other._unique():
            if isinstance(obj, BatchNormState):
                obj.running_mean = obj.running_mean.astype(dtype)
                obj.running_var = obj.running_var.astype(dtype)
        return other


# ---------------------------------------------------------------------------
# initialisation


def _uniform(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _conv(rng, c_in, c_out, dtype) -> Conv:
    fan_in = c_in * 9
    return Conv(_uniform(rng, (c_out, c_in, 3, 3), fan_in, dtype), _uniform(rng, (c_out,), fan_in, dtype))


def _dense(rng, f_in, f_out, dtype) -> Dense:
    return Dense(_uniform(rng, (f_out, f_in), f_in, dtype), _uniform(rng, (f_out,), f_in, dtype))


def _encoder(rng, cfg: ModelConfig, dtype) -> EncoderParams:
    convs, norms = [], []
    c_in = cfg.in_channels
    for _ in range(cfg.depth):
        convs.append(_conv(rng, c_in, cfg.channels, dtype))
        norms.append(
            Norm(
                Tensor(np.ones(cfg.channels, dtype=dtype), requires_grad=True),
                Tensor(np.zeros(cfg.channels, dtype=dtype), requires_grad=True),
                BatchNormState(cfg.channels, dtype=dtype),
            )
        )
        c_in = cfg.channels
    return EncoderParams(convs, norms)


def _qkv(rng, channels, dtype) -> QKV:
    return QKV(*(_conv(rng, channels, channels, dtype) for _ in range(3)))


def _bab(rng, cfg: ModelConfig, dtype) -> BABParams:
    hr = _qkv(rng, cfg.channels, dtype)
    sr = hr if cfg.shared_branches else _qkv(rng, cfg.channels, dtype)
    return BABParams(hr, sr)


def init_model(config: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform weights, BN gamma=1 / beta=0; deterministic in ``seed``."""
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    enc_hr = _encoder(rng, cfg, dtype)
    enc_sr = enc_hr if cfg.shared_branches else _encoder(rng, cfg, dtype)
    bab1 = _bab(rng, cfg, dtype)
    bab2 = _bab(rng, cfg, dtype)
    head_in = 2 * cfg.channels * cfg.pool_out[0] * cfg.pool_out[1]
    fc1 = _dense(rng, head_in, cfg.hidden, dtype)
    fc2 = _dense(rng, cfg.hidden, 1, dtype)
    return ModelParams(cfg, enc_hr, enc_sr, bab1, bab2, fc1, fc2)


# ---------------------------------------------------------------------------
# forward pieces


def _as_batch(x, dtype) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.ndim == 3:
        t = reshape(t, (1,) + t.shape)
    if t.dtype != dtype:
        t = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
    return t


def encode(x: Tensor, enc: EncoderParams, training: bool, cfg: ModelConfig) -> Tensor:
    """Stack of Conv3x3 -> BatchNorm -> ReLU; spatial size preserved."""
    if x.ndim != 4 or x.shape[2:] != (cfg.patch_size, cfg.patch_size):
        raise ShapeError(f"encoder expects (N, C, {cfg.patch_size}, {cfg.patch_size}) input, got {x.shape}")
    h = x
    for conv, norm in zip(enc.convs, enc.norms):
        h = conv2d(h, conv.weight, conv.bias, stride=1, padding=1)
        h = batch_norm(h, norm.gamma, norm.beta, norm.state, training, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        h = relu(h)
    return h


def bab_project(x_hr: Tensor, x_sr: Tensor, params: BABParams) -> tuple:
    """Q, K, V for each branch via channel-preserving 3x3 convolutions.

    Returns ``(q_hr, k_hr, v_hr, q_sr, k_sr, v_sr)``.
    """
    if x_hr.shape != x_sr.shape:
        raise ShapeError(f"BAB inputs differ in shape: {x_hr.shape} vs {x_sr.shape}")
    out = []
    for x, qkv in ((x_hr, params.hr), (x_sr, params.sr)):
        for conv in (qkv.q, qkv.k, qkv.v):
            out.append(conv2d(x, conv.weight, conv.bias, stride=1, padding=1))
    return tuple(out)


def attention_scale(scores: np.ndarray) -> np.ndarray:
    """sqrt(max(Var(S), floor)) per (sample, channel), shaped to broadcast over S."""
    d = scores.var(axis=(-2, -1), keepdims=True)
    return np.sqrt(np.maximum(d, VARIANCE_FLOOR)).astype(scores.dtype)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: Optional[np.ndarray] = None) -> tuple:
    """Per-channel ``softmax(Q K^T / sqrt(D)) V`` treating each channel's map as a matrix.

    ``D`` is the population variance of the score matrix and carries no
    gradient; pass ``scale`` to reuse a previously computed value.
    Returns ``(output, attention_map, scale)``.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4 or q.shape[-1] != q.shape[-2]:
        raise ShapeError(f"attention expects equal (N, C, M, M) inputs, got {q.shape}, {k.shape}, {v.shape}")
    scores = matmul(q, transpose_last(k))
    if scale is None:
        scale = attention_scale(scores.data)
    weights = softmax_rows(mul(scores, Tensor((1.0 / scale).astype(scores.dtype))))
    return matmul(weights, v), weights, scale


def attention_apply(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return attention(q, k, v)[0]


def _keys_for(mode: str, k_hr: Tensor, k_sr: Tensor) -> tuple:
    if mode == "Bidirectional":
        return k_sr, k_hr
    if mode == "NoBAB":
        return k_hr, k_sr
    if mode == "HRtoSR":
        return k_hr, k_hr
    if mode == "SRtoHR":
        return k_sr, k_sr
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {MODES}")


def bab_forward(
    x_hr: Tensor,
    x_sr: Tensor,
    params: BABParams,
    mode: str = "Bidirectional",
    scales: Optional[dict] = None,
    tag: str = "bab",
) -> tuple:
    """One attention block with shortcut.

    ``mode`` picks which key each branch attends with (see ``MODES``). When a
    ``scales`` dict is given, attention scales are read from it if present
    under ``f"{tag}.hr"``/``f"{tag}.sr"`` and stored otherwise, which lets a
    caller hold them fixed across repeated evaluations.

    Returns ``(y_hr, y_sr, attention_hr, attention_sr)``.
    """
    q_hr, k_hr, v_hr, q_sr, k_sr, v_sr = bab_project(x_hr, x_sr, params)
    key_hr, key_sr = _keys_for(mode, k_hr, k_sr)
    outs = []
    for branch, q, k, v, x in (("hr", q_hr, key_hr, v_hr, x_hr), ("sr", q_sr, key_sr, v_sr, x_sr)):
        name = f"{tag}.{branch}"
        fixed = scales.get(name) if scales is not None else None
        y, a, s = attention(q, k, v, fixed)
        if scales is not None and fixed is None:
            scales[name] = s
        outs.append((add(x, y), a))
    (y_hr, a_hr), (y_sr, a_sr) = outs
    return y_hr, y_sr, a_hr, a_sr


def _run(hr, sr, params: ModelParams, training: bool, scales: Optional[dict], trace: Optional[dict]) -> Tensor:
    cfg = params.config
    dtype = params.fc1.weight.dtype
    hr, sr = _as_batch(hr, dtype), _as_batch(sr, dtype)
    if hr.shape != sr.shape:
        raise ShapeError(f"HR batch {hr.shape} and SR batch {sr.shape} differ")
    f_hr = encode(hr, params.encoder_hr, training, cfg)
    f_sr = encode(sr, params.encoder_sr, training, cfg)
    for tag, bab in (("bab1", params.bab1), ("bab2", params.bab2)):
        y_hr, y_sr, a_hr, a_sr = bab_forward(f_hr, f_sr, bab, cfg.mode, scales, tag)
        if trace is not None:
            trace[f"{tag}_before"] = (f_hr, f_sr)
            trace[f"{tag}_after"] = (y_hr, y_sr)
            trace[f"{tag}_attention"] = (a_hr, a_sr)
        f_hr, f_sr = y_hr, y_sr
    pooled = [flatten(adaptive_avg_pool(f, cfg.pool_out)) for f in (f_hr, f_sr)]
    h = relu(linear(concat(pooled, axis=1), params.fc1.weight, params.fc1.bias))
    out = linear(h, params.fc2.weight, params.fc2.bias)
    return reshape(out, (out.shape[0],))


def forward(hr, sr, params: ModelParams, training: bool = False, scales: Optional[dict] = None) -> Tensor:
    """Quality score per sample for HR/SR batches of shape (N, 3, P, P).

    ``training`` selects batch statistics (and updates the running ones) in
    the encoders' batch-norm layers. ``scales`` is forwarded to
    :func:`bab_forward`.
    """
    return _run(hr, sr, params, training, scales, None)


def predict(hr, sr, params: ModelParams) -> np.ndarray:
    """Eval-mode scores without recording a graph."""
    with no_grad():
        return forward(hr, sr, params, training=False).data.copy()


# ---------------------------------------------------------------------------
# feature probe


@dataclass
class ProbeDump:
    inputs: dict  # branch -> (H, W) luminance of the input patch
    maps: dict  # (branch, stage) -> (M, M) channel-mean feature map
    attention: dict  # (branch, bab) -> (M, M) channel-mean attention map
    rows: list  # dicts with branch, stage, ssim_vs_input, ssim_cross_branch, ssim_vs_other_input

    CSV_COLUMNS = ("branch", "stage", "ssim_vs_input", "ssim_cross_branch")

    def csv_rows(self) -> list:
        return [[r[c] if isinstance(r[c], str) else repr(r[c]) for c in self.CSV_COLUMNS] for r in self.rows]


def probe_features(hr_patch, sr_patch, params: ModelParams) -> ProbeDump:
    """Feature maps around each attention block and their SSIM similarities.

    Uses the first sample of the batch. Maps are averaged over channels and
    min-max normalised before SSIM (dynamic range 1).
    """
    trace: dict = {}
    with no_grad():
        _run(hr_patch, sr_patch, params, False, None, trace)
    dtype = params.fc1.weight.dtype
    hr_in = _as_batch(hr_patch, dtype).data[0]
    sr_in = _as_batch(sr_patch, dtype).data[0]
    inputs = {"hr": metrics.to_luminance(hr_in), "sr": metrics.to_luminance(sr_in)}
    maps, attn = {}, {}
    for stage in PROBE_STAGES:
        f_hr, f_sr = trace[stage]
        maps[("hr", stage)] = f_hr.data[0].mean(axis=0).astype(np.float64)
        maps[("sr", stage)] = f_sr.data[0].mean(axis=0).astype(np.float64)
    for tag in ("bab1", "bab2"):
        a_hr, a_sr = trace[f"{tag}_attention"]
        attn[("hr", tag)] = a_hr.data[0].mean(axis=0).astype(np.float64)
        attn[("sr", tag)] = a_sr.data[0].mean(axis=0).astype(np.float64)

    def sim(a, b):
        return metrics.ssim(metrics.minmax(a), metrics.minmax(b), data_range=1.0)

    rows = []
    for branch, other in (("hr", "sr"), ("sr", "hr")):
        for stage in PROBE_STAGES:
            m = maps[(branch, stage)]
            rows.append(
                {
                    "branch": branch,
                    "stage": stage,
                    "ssim_vs_input": sim(inputs[branch], m),
                    "ssim_cross_branch": sim(maps[("hr", stage)], maps[("sr", stage)]),
                    "ssim_vs_other_input": sim(inputs[other], m),
                }
            )
    return ProbeDump(inputs, maps, attn, rows)

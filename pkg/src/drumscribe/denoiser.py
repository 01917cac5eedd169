"""Audio-conditioned denoising network and its training loop.

A transformer decoder over noisy-grid frame tokens; each block runs
self-attention, cross-attention over the spectrogram stream, cross-attention
over the semantic stream, then a FiLM-modulated MLP driven by the noise-level
embedding. Dropped-out condition frames are replaced by learned null
embeddings so the absence of audio is distinguishable from silence.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import config as configmod
from .diffusion import DiffusionConfig, precond_coeffs, sample_training_sigma
from .loss import AnnealState, training_loss
from .tensor import Adam, Tensor, dump_tensors, gelu, layernorm, no_grad, parse_tensors, softmax


class DenoiserError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DenoiserConfig:
    n_frames: int = 500
    n_components: int = 7
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    spec_bins: int = 128
    sem_dim: int = 64
    p_complete_spec: float = 0.30
    p_complete_sem: float = 0.15
    p_partial: float = 0.5
    # storage dtype for weights and activations; reductions and matmul
    # contractions accumulate in 64-bit either way
    precision: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise DenoiserError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.precision not in ("f32", "f64"):
            raise DenoiserError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        for name in ("p_complete_spec", "p_complete_sem", "p_partial"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DenoiserError(f"{name}={p} outside [0, 1]")


@dataclass
class LossConfig:
    objective: str = "aph"
    c_max: float = 1.0
    c_min: float = 1e-4
    norm: str = "elementwise"


@dataclass
class ConditionBundle:
    """Dual conditioning streams with per-frame validity flags."""

    spec_features: np.ndarray   # (T_s, spec_bins)
    sem_features: np.ndarray    # (T_m, sem_dim)
    spec_valid: np.ndarray      # (T_s,) bool
    sem_valid: np.ndarray       # (T_m,) bool

    @classmethod
    def full(cls, spec_features: np.ndarray, sem_features: np.ndarray) -> "ConditionBundle":
        return cls(spec_features, sem_features,
                   np.ones(len(spec_features), dtype=bool),
                   np.ones(len(sem_features), dtype=bool))


def _drop_interval(valid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Invalidate one contiguous interval, length uniform in [10%, 90%] of frames."""
    n = len(valid)
    length = int(round(rng.uniform(0.1, 0.9) * n))
    length = max(1, min(n, length))
    start = int(rng.integers(0, n - length + 1))
    out = valid.copy()
    out[start : start + length] = False
    return out


def apply_feature_dropout(cond: ConditionBundle, rng: np.random.Generator,
                          cfg: DenoiserConfig, mode: str = "train",
                          mask_seconds: Optional[tuple[float, float]] = None,
                          duration: Optional[float] = None) -> ConditionBundle:
    """Return a bundle with validity flags updated for the requested mode.

    train: per stream, complete dropout with its stream probability, else
    partial dropout of a random contiguous interval with p_partial.
    inpaint: drop the caller-given [start, end) second interval in both
    streams. unconditional: drop everything. full: drop nothing.
    """
    spec_valid = cond.spec_valid.copy()
    sem_valid = cond.sem_valid.copy()
    if mode == "full":
        pass
    elif mode == "unconditional":
        spec_valid[:] = False
        sem_valid[:] = False
    elif mode == "train":
        for valid, p_complete in ((spec_valid, cfg.p_complete_spec),
                                  (sem_valid, cfg.p_complete_sem)):
            if rng.random() < p_complete:
                valid[:] = False
            elif rng.random() < cfg.p_partial:
                valid[:] = _drop_interval(valid, rng)
    elif mode == "inpaint":
        if mask_seconds is None:
            raise DenoiserError("inpaint mode requires mask_seconds=(start, end)")
        if duration is None:
            duration = cfg.n_frames / 100.0
        start_s, end_s = mask_seconds
        if not 0.0 <= start_s < end_s <= duration:
            raise DenoiserError(
                f"inpaint mask [{start_s}, {end_s}) outside [0, {duration}]")
        for valid in (spec_valid, sem_valid):
            rate = len(valid) / duration
            lo = int(math.floor(start_s * rate))
            hi = int(math.ceil(end_s * rate))
            valid[lo:hi] = False
    else:
        raise DenoiserError(f"unknown dropout mode {mode!r}")
    return ConditionBundle(cond.spec_features, cond.sem_features, spec_valid, sem_valid)


@dataclass
class BatchedCondition:
    spec: np.ndarray        # (B, T_s, spec_bins)
    spec_valid: np.ndarray  # (B, T_s)
    sem: np.ndarray         # (B, T_m, sem_dim)
    sem_valid: np.ndarray   # (B, T_m)

    @classmethod
    def stack(cls, bundles: Sequence[ConditionBundle]) -> "BatchedCondition":
        return cls(
            spec=np.stack([np.asarray(b.spec_features, dtype=np.float64) for b in bundles]),
            spec_valid=np.stack([b.spec_valid for b in bundles]),
            sem=np.stack([np.asarray(b.sem_features, dtype=np.float64) for b in bundles]),
            sem_valid=np.stack([b.sem_valid for b in bundles]),
        )


_POSENC_CACHE: dict[tuple[int, int], np.ndarray] = {}
_ALIGN_BIAS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def alignment_bias(n_q: int, n_k: int, n_heads: int) -> np.ndarray:
    """Per-head additive attention bias favoring time-aligned key frames.

    Queries and keys cover the same clip at possibly different frame rates;
    the penalty is the absolute offset in query-frame units, scaled by a
    per-head slope halving from 1 (so heads see windows of roughly 1, 2, 4,
    ... frames). Without this prior, attention over hundreds of frames starts
    near-uniform and the conditioning pathway takes far too long to sharpen.
    """
    cached = _ALIGN_BIAS_CACHE.get((n_q, n_k, n_heads))
    if cached is not None:
        return cached
    q_pos = np.arange(n_q)[:, None]
    k_pos = np.arange(n_k)[None, :] * (n_q / n_k)
    dist = np.abs(q_pos - k_pos)
    slopes = 2.0 ** -np.arange(n_heads)
    bias = -slopes[:, None, None] * dist[None, :, :]
    _ALIGN_BIAS_CACHE[(n_q, n_k, n_heads)] = bias
    return bias


def positional_encoding(n: int, d: int) -> np.ndarray:
    cached = _POSENC_CACHE.get((n, d))
    if cached is not None:
        return cached
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / (10000.0 ** (2.0 * i / d))
    enc = np.zeros((n, d))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    _POSENC_CACHE[(n, d)] = enc
    return enc


def noise_embedding(c_noise: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal features of the scalar noise embedding input."""
    half = d // 2
    # c_noise = ln(sigma)/4 spans roughly [-1.6, 1.1]; keep the highest
    # frequency low enough that the embedding varies smoothly in sigma.
    freqs = np.exp(np.linspace(math.log(0.5), math.log(20.0), half))
    angles = np.asarray(c_noise)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class Denoiser:
    """Network weights plus optimizer and training progress."""

    def __init__(self, cfg: DenoiserConfig,
                 diff_cfg: Optional[DiffusionConfig] = None,
                 loss_cfg: Optional[LossConfig] = None,
                 seed: int = 0, lr: float = 3e-4):
        self.cfg = cfg
        self.dtype = np.float32 if cfg.precision == "f32" else np.float64
        self.diff_cfg = diff_cfg or DiffusionConfig()
        self.loss_cfg = loss_cfg or LossConfig()
        self.lr = lr
        self.step = 0
        self.total_steps = 0
        self.rng = np.random.default_rng(seed)
        self.use_positional = True
        self.use_film = True
        self.call_count = 0  # denoiser evaluations, for sampler assertions
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        self.adam = Adam(self.params, lr=lr)

    # -- parameter construction ------------------------------------------------

    def _param(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               scale: Optional[float] = None):
        if scale is None:
            fan_in = shape[0] if len(shape) > 1 else 1
            scale = 1.0 / math.sqrt(fan_in)
        self.params[name] = Tensor(
            (scale * rng.standard_normal(shape)).astype(self.dtype), requires_grad=True)

    def _zeros(self, name: str, shape: tuple[int, ...]):
        self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def _ones(self, name: str, shape: tuple[int, ...]):
        self.params[name] = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

    def _init_attn(self, prefix: str, rng: np.random.Generator):
        d = self.cfg.d_model
        for w in ("wq", "wk", "wv", "wo"):
            self._param(f"{prefix}.{w}", (d, d), rng)
        for b in ("bq", "bk", "bv", "bo"):
            self._zeros(f"{prefix}.{b}", (d,))

    def _init_mlp(self, prefix: str, rng: np.random.Generator):
        d, ff = self.cfg.d_model, self.cfg.d_ff
        self._param(f"{prefix}.w1", (d, ff), rng)
        self._zeros(f"{prefix}.b1", (ff,))
        self._param(f"{prefix}.w2", (ff, d), rng)
        self._zeros(f"{prefix}.b2", (d,))

    def _init_ln(self, prefix: str):
        self._ones(f"{prefix}.g", (self.cfg.d_model,))
        self._zeros(f"{prefix}.b", (self.cfg.d_model,))

    def _init_params(self, rng: np.random.Generator):
        cfg = self.cfg
        d = cfg.d_model
        self._param("in.w", (2 * cfg.n_components, d), rng)
        self._zeros("in.b", (d,))
        # noise-level MLP; its output head starts at zero so FiLM begins
        # as the identity modulation
        self._param("time.w1", (d, d), rng)
        self._zeros("time.b1", (d,))
        self._zeros("time.w2", (d, cfg.n_layers * 2 * d))
        self._zeros("time.b2", (cfg.n_layers * 2 * d,))
        for stream, width in (("spec", cfg.spec_bins), ("sem", cfg.sem_dim)):
            self._param(f"{stream}.proj.w", (width, d), rng)
            self._zeros(f"{stream}.proj.b", (d,))
            self._param(f"{stream}.null", (d,), rng, scale=0.02)
            self._init_ln(f"{stream}.ln1")
            self._init_attn(f"{stream}.attn", rng)
            self._init_ln(f"{stream}.ln2")
            self._init_mlp(f"{stream}.mlp", rng)
        for layer in range(cfg.n_layers):
            p = f"dec{layer}"
            self._init_ln(f"{p}.ln_self")
            self._init_attn(f"{p}.self", rng)
            self._init_ln(f"{p}.ln_cspec")
            self._init_attn(f"{p}.cspec", rng)
            self._init_ln(f"{p}.ln_csem")
            self._init_attn(f"{p}.csem", rng)
            self._init_ln(f"{p}.ln_ff")
            self._init_mlp(f"{p}.mlp", rng)
        self._init_ln("out.ln")
        self._param("out.w", (d, 2 * cfg.n_components), rng)
        self._zeros("out.b", (2 * cfg.n_components,))

    # -- building blocks ---------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, prefix: str, w: str = "w", b: str = "b") -> Tensor:
        return x @ self._p(f"{prefix}.{w}") + self._p(f"{prefix}.{b}")

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return layernorm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _heads(self, x: Tensor, batch: int, frames: int) -> Tensor:
        h, dh = self.cfg.n_heads, self.cfg.d_model // self.cfg.n_heads
        return x.reshape(batch, frames, h, dh).transpose((0, 2, 1, 3))

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str,
                   aligned: bool = False) -> Tensor:
        batch, t_q = q_in.shape[0], q_in.shape[1]
        t_k = kv_in.shape[1]
        dh = self.cfg.d_model // self.cfg.n_heads
        q = self._heads(self._linear(q_in, prefix, "wq", "bq"), batch, t_q)
        k = self._heads(self._linear(kv_in, prefix, "wk", "bk"), batch, t_k)
        v = self._heads(self._linear(kv_in, prefix, "wv", "bv"), batch, t_k)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if aligned:
            scores = scores + alignment_bias(t_q, t_k, self.cfg.n_heads)
        mixed = softmax(scores, axis=-1) @ v
        merged = mixed.transpose((0, 2, 1, 3)).reshape(batch, t_q, self.cfg.d_model)
        return self._linear(merged, prefix, "wo", "bo")

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(gelu(self._linear(x, prefix, "w1", "b1")), prefix, "w2", "b2")

    # fixed affine bringing log-mel magnitudes near unit scale; the semantic
    # stream is already tanh-bounded
    SPEC_SHIFT = 8.0
    SPEC_SCALE = 1.0 / 3.0

    def _encode_stream(self, feats, valid: np.ndarray, stream: str) -> Tensor:
        """Project a feature stream, swap in null embeddings, run one encoder layer."""
        feats = np.asarray(feats, dtype=np.float64)
        if stream == "spec":
            feats = (feats + self.SPEC_SHIFT) * self.SPEC_SCALE
        batch, frames = feats.shape[0], feats.shape[1]
        mask = valid.astype(np.float64)[:, :, None]
        # zero invalid frames before entering the graph: no gradient reaches
        # them, and garbage values (even NaN) behind the mask cannot leak
        feats = Tensor(np.where(mask > 0, feats, 0.0))
        h = self._linear(feats, f"{stream}.proj")
        h = h * mask + self._p(f"{stream}.null") * (1.0 - mask)
        if self.use_positional:
            h = h + positional_encoding(frames, self.cfg.d_model)
        normed = self._ln(h, f"{stream}.ln1")
        h = h + self._attention(normed, normed, f"{stream}.attn")
        h = h + self._mlp(self._ln(h, f"{stream}.ln2"), f"{stream}.mlp")
        return h

    # -- forward --------------------------------------------------------------------

    def forward(self, x_in, c_noise, cond) -> Tensor:
        """Raw network F: noisy tokens + noise embedding + condition -> grid estimate.

        x_in: (B, N, D, 2) or (N, D, 2); c_noise: scalar or (B,);
        cond: ConditionBundle or BatchedCondition.
        """
        cfg = self.cfg
        if isinstance(cond, ConditionBundle):
            cond = BatchedCondition.stack([cond])
        if not isinstance(x_in, Tensor):
            x_in = Tensor(np.asarray(x_in, dtype=np.float64))
        squeeze = len(x_in.shape) == 3
        if squeeze:
            x_in = x_in.reshape(1, *x_in.shape)
        batch, n_frames = x_in.shape[0], x_in.shape[1]
        if (n_frames, x_in.shape[2]) != (cfg.n_frames, cfg.n_components):
            raise DenoiserError(
                f"grid shape {x_in.shape[1:]} does not match config "
                f"({cfg.n_frames}, {cfg.n_components}, 2)")
        if cond.spec.shape[2] != cfg.spec_bins or cond.sem.shape[2] != cfg.sem_dim:
            raise DenoiserError(
                f"condition dims ({cond.spec.shape[2]}, {cond.sem.shape[2]}) do not "
                f"match config ({cfg.spec_bins}, {cfg.sem_dim})")

        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (batch,))
        temb = Tensor(noise_embedding(c_noise, cfg.d_model))
        temb = self._linear(gelu(self._linear(temb, "time", "w1", "b1")), "time", "w2", "b2")

        spec_mem = self._encode_stream(cond.spec, cond.spec_valid, "spec")
        sem_mem = self._encode_stream(cond.sem, cond.sem_valid, "sem")

        h = self._linear(x_in.reshape(batch, n_frames, 2 * cfg.n_components), "in")
        if self.use_positional:
            h = h + positional_encoding(n_frames, cfg.d_model)

        d = cfg.d_model
        for layer in range(cfg.n_layers):
            p = f"dec{layer}"
            normed = self._ln(h, f"{p}.ln_self")
            h = h + self._attention(normed, normed, f"{p}.self")
            h = h + self._attention(self._ln(h, f"{p}.ln_cspec"), spec_mem,
                                    f"{p}.cspec", aligned=True)
            h = h + self._attention(self._ln(h, f"{p}.ln_csem"), sem_mem,
                                    f"{p}.csem", aligned=True)
            m = self._ln(h, f"{p}.ln_ff")
            if self.use_film:
                gamma = 1.0 + temb[:, 2 * layer * d : (2 * layer + 1) * d].reshape(batch, 1, d)
                beta = temb[:, (2 * layer + 1) * d : (2 * layer + 2) * d].reshape(batch, 1, d)
                m = m * gamma + beta
            h = h + self._mlp(m, f"{p}.mlp")

        out = self._linear(self._ln(h, "out.ln"), "out")
        out = out.reshape(batch, n_frames, cfg.n_components, 2)
        return out.reshape(*out.shape[1:]) if squeeze else out

    def denoise(self, x_noisy: np.ndarray, sigma: float, cond) -> np.ndarray:
        """Preconditioned single evaluation D(x; sigma, cond), inference only."""
        self.call_count += 1
        c_skip, c_out, c_in, c_noise = precond_coeffs(self.diff_cfg, sigma)
        with no_grad():
            raw = self.forward(c_in * np.asarray(x_noisy), c_noise, cond)
        return c_out * raw.data + c_skip * np.asarray(x_noisy)

    # -- training ---------------------------------------------------------------------

    @property
    def alpha(self) -> float:
        if self.total_steps <= 0:
            return 0.0
        return min(1.0, self.step / self.total_steps)

    def anneal_state(self) -> AnnealState:
        return AnnealState(alpha=self.alpha, c_max=self.loss_cfg.c_max,
                           c_min=self.loss_cfg.c_min)

    def train_step(self, batch: Sequence[tuple[np.ndarray, ConditionBundle]],
                   rng: Optional[np.random.Generator] = None) -> float:
        """One optimizer update; returns the (pre-update) loss value."""
        rng = self.rng if rng is None else rng
        grids = np.stack([np.asarray(g, dtype=np.float64) for g, _ in batch])
        dropped = [apply_feature_dropout(c, rng, self.cfg, "train") for _, c in batch]
        cond = BatchedCondition.stack(dropped)
        sigmas = np.array([sample_training_sigma(self.diff_cfg, rng) for _ in batch])
        noise = rng.standard_normal(grids.shape)
        x_noisy = grids + sigmas[:, None, None, None] * noise

        coeffs = np.array([precond_coeffs(self.diff_cfg, s) for s in sigmas])
        c_skip = coeffs[:, 0][:, None, None, None]
        c_out = coeffs[:, 1][:, None, None, None]
        c_in = coeffs[:, 2][:, None, None, None]
        c_noise = coeffs[:, 3]

        state = self.anneal_state()
        raw = self.forward(c_in * x_noisy, c_noise, cond)
        x0_hat = raw * c_out + c_skip * x_noisy
        loss = training_loss(Tensor(grids), x0_hat, self.loss_cfg.objective, state,
                             norm=self.loss_cfg.norm)
        value = float(loss.data)
        if not np.isfinite(value):
            stats = {k: (float(np.abs(p.data).max()), bool(np.isfinite(p.data).all()))
                     for k, p in self.params.items()}
            raise TrainingDiverged(
                f"non-finite loss {value} at step {self.step}; sigmas={sigmas.tolist()}; "
                f"param (max_abs, finite): {stats}")
        self.adam.zero_grad()
        loss.backward()
        self.adam.step()
        self.step += 1
        return value

    # -- persistence ---------------------------------------------------------------------

    def save(self, path: str):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str) -> "Denoiser":
        return load_checkpoint(path)


# --- checkpoint file format ----------------------------------------------------

_CKPT_MAGIC = b"DSCP"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_text(model: Denoiser) -> str:
    return configmod.dumps_config({
        "denoiser": asdict(model.cfg),
        "diffusion": asdict(model.diff_cfg),
        "loss": asdict(model.loss_cfg),
        "progress": {
            "step": model.step,
            "total_steps": model.total_steps,
            "adam_t": model.adam.t,
            "lr": model.lr,
        },
    })


def save_checkpoint(model: Denoiser, path: str):
    """Atomic write: magic, version, config text, rng state, tensor blob, crc."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        arrays[f"p/{name}"] = p.data
        arrays[f"m/{name}"] = model.adam.m[name]
        arrays[f"v/{name}"] = model.adam.v[name]
    config_blob = _config_text(model).encode("utf-8")
    rng_blob = json.dumps(model.rng.bit_generator.state).encode("utf-8")
    tensor_blob = dump_tensors(arrays)
    body = bytearray(_CKPT_MAGIC)
    body += struct.pack("<I", _CKPT_VERSION)
    for blob in (config_blob, rng_blob, tensor_blob):
        body += struct.pack("<Q", len(blob)) + blob
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(body))
    os.replace(tmp, path)


def load_checkpoint(path: str, expect_cfg: Optional[DenoiserConfig] = None) -> Denoiser:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    blobs = []
    for _ in range(3):
        (length,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        blobs.append(data[pos : pos + length])
        pos += length
    sections = configmod.loads_config(blobs[0].decode("utf-8"))
    cfg = DenoiserConfig(**sections["denoiser"])
    if expect_cfg is not None and cfg != expect_cfg:
        raise CheckpointError(f"{path}: config mismatch: {cfg} != {expect_cfg}")
    model = Denoiser(cfg,
                     DiffusionConfig(**sections["diffusion"]),
                     LossConfig(**sections["loss"]),
                     lr=sections["progress"]["lr"])
    model.step = sections["progress"]["step"]
    model.total_steps = sections["progress"]["total_steps"]
    model.adam.t = sections["progress"]["adam_t"]
    model.rng.bit_generator.state = json.loads(blobs[1].decode("utf-8"))
    arrays = parse_tensors(blobs[2])
    for name, p in model.params.items():
        p.data = arrays[f"p/{name}"]
        model.adam.m[name] = arrays[f"m/{name}"]
        model.adam.v[name] = arrays[f"v/{name}"]
    return model


# --- training driver -------------------------------------------------------------


def scheduled_lr(base: float, final: Optional[float], alpha: float) -> float:
    """Learning rate at progress alpha: constant, then linear decay to `final`
    over the second half of the plan. Deterministic in alpha, so resumed runs
    recompute the same rate."""
    if final is None:
        return base
    frac = min(1.0, max(0.0, 2.0 * (alpha - 0.5)))
    return base + frac * (final - base)


def train(model: Denoiser, records: Sequence, epochs: int,
          batch_size: int = 8,
          total_planned_steps: Optional[int] = None,
          checkpoint_dir: Optional[str] = None,
          checkpoint_every: int = 1,
          lr_final: Optional[float] = None,
          log: Optional[list[str]] = None) -> Denoiser:
    """Shuffled epochs of train_step; alpha sweeps 0 -> 1 over the plan.

    `records` holds synthdata ClipRecord-like items (grid + features).
    Pass total_planned_steps when resuming so the anneal schedule matches
    the uninterrupted run.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    items = [
        (r.grid.values, ConditionBundle.full(r.spec_features, r.sem_features))
        for r in records
    ]
    if not items and epochs > 0:
        raise ValueError("empty dataset")
    steps_per_epoch = max(1, math.ceil(len(items) / batch_size)) if items else 0
    if total_planned_steps is not None:
        model.total_steps = total_planned_steps
    elif model.total_steps == 0:
        model.total_steps = model.step + epochs * steps_per_epoch
    if log is not None and not log:
        log.append("step,alpha,c,loss")
    for epoch in range(epochs):
        order = model.rng.permutation(len(items))
        for lo in range(0, len(items), batch_size):
            batch = [items[i] for i in order[lo : lo + batch_size]]
            state = model.anneal_state()
            model.adam.lr = scheduled_lr(model.lr, lr_final, model.alpha)
            loss = model.train_step(batch)
            if log is not None:
                from .loss import anneal_c
                log.append(f"{model.step},{model.alpha:.6f},{anneal_c(state):.6e},{loss:.8e}")
        if checkpoint_dir and (epoch + 1) % checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            model.save(os.path.join(checkpoint_dir, f"ckpt_{model.step:06d}.dsck"))
    return model

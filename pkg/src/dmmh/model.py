"""The multi-modal hashing network, its objective, training loop and checkpoints.

Pipeline per sample::

    per modality:  MLP -> dilation to L tokens -> selective SSM block(s)
    then:          additive fusion -> conv1d stack -> mean-pool -> tanh hash layer
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .hamming import CodeBank, pack
from .nn import (Activation, Adam, Conv1d, GradCheckReport, LayerNorm, Linear, NonFiniteError,
                 ShapeError, grad_check, make_rng, sigmoid, softplus)
from .ssm import SsmBlock

CODE_LENGTHS = (16, 32, 64, 128)
CKPT_MAGIC = b"DMMHCKPT"
CKPT_VERSION = 1
ENCODE_CHUNK = 256


class ConfigError(ValueError):
    pass


class MissingModalityError(KeyError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    modalities: list = field(default_factory=list)  # [(name, input_dim), ...]
    d_model: int = 32
    seq_len: int = 8
    bits: int = 16
    mlp_hidden: int | None = None
    cnn_layers: int = 2
    cnn_kernel: int = 3
    cnn_channels: int | None = None
    d_state: int = 8
    ssm_blocks: int = 1
    num_classes: int = 0
    lambda_sim: float = 1.0
    lambda_quant: float = 0.25
    lambda_cls: float = 0.0
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.modalities = [(str(n), int(d)) for n, d in self.modalities]
        self.validate()

    def validate(self) -> None:
        if self.bits not in CODE_LENGTHS:
            raise ConfigError(f"bits must be one of {CODE_LENGTHS}, got {self.bits}")
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        names = [n for n, _ in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names {names}")
        if any(d < 1 for _, d in self.modalities):
            raise ConfigError("modality input dims must be >= 1")
        for key in ("d_model", "seq_len", "cnn_layers", "d_state", "epochs", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.ssm_blocks < 0:
            raise ConfigError("ssm_blocks must be >= 0")
        if self.cnn_kernel < 1 or self.cnn_kernel % 2 == 0:
            raise ConfigError(f"cnn_kernel must be odd, got {self.cnn_kernel}")
        if min(self.lambda_sim, self.lambda_quant, self.lambda_cls) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lambda_cls > 0 and self.num_classes < 1:
            raise ConfigError("lambda_cls > 0 needs num_classes >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [list(m) for m in self.modalities]
        return d

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.d_model

    @property
    def channels(self) -> int:
        return self.cnn_channels or self.d_model

    @property
    def use_classifier(self) -> bool:
        return self.lambda_cls > 0


def fuse_additive(tokens: list[np.ndarray]) -> np.ndarray:
    if not tokens:
        raise ShapeError("fusion needs at least one modality")
    shape = tokens[0].shape
    for t in tokens[1:]:
        if t.shape != shape:
            raise ShapeError(f"modality token shapes differ: {shape} vs {t.shape}")
    out = tokens[0].copy()
    for t in tokens[1:]:
        out += t
    return out


def binarize(h: np.ndarray) -> np.ndarray:
    return np.where(h >= 0, 1, -1).astype(np.int8)


@dataclass
class ForwardResult:
    h_relaxed: np.ndarray
    h_bin: np.ndarray
    logits: np.ndarray | None
    cache: dict = field(repr=False, default_factory=dict)


class DMMH:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 init: bool = True):
        self.config = cfg = config
        dt = np.dtype(cfg.dtype)
        if init and rng is None:
            rng = make_rng(cfg.seed)
        r = rng if init else None
        D, H, L = cfg.d_model, cfg.hidden, cfg.seq_len
        self.mlp: dict[str, tuple[Linear, Activation, LayerNorm, Linear]] = {}
        self.dilation: dict[str, Linear] = {}
        self.ssm: dict[str, list[SsmBlock]] = {}
        for name, d_in in cfg.modalities:
            self.mlp[name] = (Linear(d_in, H, r, f"mlp.{name}.fc1", dt),
                              Activation("relu", f"mlp.{name}.relu"),
                              LayerNorm(H, f"mlp.{name}.norm", dt),
                              Linear(H, D, r, f"mlp.{name}.fc2", dt))
            self.dilation[name] = Linear(D, L * D, r, f"dilation.{name}", dt)
            self.ssm[name] = [SsmBlock(D, cfg.d_state, r, f"ssm.{name}.{i}", dt)
                              for i in range(cfg.ssm_blocks)]
        C = cfg.channels
        self.cnn = []
        for i in range(cfg.cnn_layers):
            c_in = D if i == 0 else C
            c_out = D if i == cfg.cnn_layers - 1 else C
            self.cnn.append(Conv1d(c_in, c_out, cfg.cnn_kernel, r, f"cnn.{i}", dt))
        self.hash = Linear(D, cfg.bits, r, "hash", dt)
        self.classifier = (Linear(D, cfg.num_classes, r, "classifier", dt)
                           if cfg.use_classifier else None)

    @property
    def modality_names(self) -> list[str]:
        return [n for n, _ in self.config.modalities]

    def layers(self):
        for name in self.modality_names:
            yield from self.mlp[name]
            yield self.dilation[name]
            yield from self.ssm[name]
        yield from self.cnn
        yield self.hash
        if self.classifier is not None:
            yield self.classifier

    def named_parameters(self):
        for layer in self.layers():
            yield from layer.named_parameters()

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    # ------------------------------------------------------------------ stages
    def _inputs(self, feats: dict) -> dict[str, np.ndarray]:
        missing = [n for n in self.modality_names if n not in feats]
        if missing:
            raise MissingModalityError(f"missing modalities {missing}")
        dt = np.dtype(self.config.dtype)
        out, batch = {}, None
        for name, d_in in self.config.modalities:
            x = np.asarray(feats[name], dtype=dt)
            if x.ndim != 2 or x.shape[1] != d_in:
                raise ShapeError(f"modality {name!r} expects [batch, {d_in}], got {x.shape}")
            if batch is not None and x.shape[0] != batch:
                raise ShapeError(f"modality {name!r} has batch {x.shape[0]}, expected {batch}")
            batch = x.shape[0]
            out[name] = x
        return out

    def mlp_normalize(self, x: np.ndarray, name: str, cache: dict | None = None) -> np.ndarray:
        fc1, relu, norm, fc2 = self.mlp[name]
        a = fc1(x)
        r = relu(a)
        n = norm(r)
        if cache is not None:
            cache.update(x=x, a=a, r=r, n=n)
        return fc2(n)

    def dilate(self, z: np.ndarray, name: str) -> np.ndarray:
        L, D = self.config.seq_len, self.config.d_model
        return self.dilation[name](z).reshape(z.shape[0], L, D)

    def enhance(self, t: np.ndarray, name: str, cache: dict | None = None) -> np.ndarray:
        ins = []
        for blk in self.ssm[name]:
            ins.append(t)
            t = blk(t)
        if cache is not None:
            cache["ssm_in"] = ins
        return t

    def cnn_fuse(self, fused: np.ndarray, cache: dict | None = None) -> np.ndarray:
        ins, pre = [], []
        c = fused
        for i, conv in enumerate(self.cnn):
            ins.append(c)
            c = conv(c)
            if i < len(self.cnn) - 1:
                pre.append(c)
                c = np.maximum(c, 0.0)
        if cache is not None:
            cache.update(cnn_in=ins, cnn_pre=pre)
        return c.mean(axis=1)

    def hash_layer(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.tanh(self.hash(z))
        return h, binarize(h)

    def forward(self, feats: dict) -> ForwardResult:
        xs = self._inputs(feats)
        cache: dict = {"mod": {}}
        tokens = {}
        for name in self.modality_names:
            mc = cache["mod"][name] = {}
            z = self.mlp_normalize(xs[name], name, mc)
            mc["z"] = z
            tokens[name] = self.enhance(self.dilate(z, name), name, mc)
        # canonical order keeps fusion bit-identical under modality reordering
        fused = fuse_additive([tokens[n] for n in sorted(tokens)])
        pooled = self.cnn_fuse(fused, cache)
        cache["pooled"] = pooled
        h, hb = self.hash_layer(pooled)
        logits = self.classifier(pooled) if self.classifier is not None else None
        return ForwardResult(h, hb, logits, cache)

    def cnn_backward(self, cache: dict, dpooled: np.ndarray) -> np.ndarray:
        L = self.config.seq_len
        dc = np.repeat(dpooled[:, None, :] / L, L, axis=1)
        for i in reversed(range(len(self.cnn))):
            if i < len(self.cnn) - 1:
                dc = dc * (cache["cnn_pre"][i] > 0)
            dc = self.cnn[i].backward(cache["cnn_in"][i], dc)
        return dc

    def mlp_backward(self, name: str, cache: dict, dz: np.ndarray, need_dx: bool = False):
        fc1, relu, norm, fc2 = self.mlp[name]
        dn = fc2.backward(cache["n"], dz)
        dr = norm.backward(cache["r"], dn)
        return fc1.backward(cache["x"], relu.backward(cache["a"], dr), need_dx=need_dx)

    def backward(self, out: ForwardResult, dh: np.ndarray,
                 dlogits: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients for cotangents on ``h_relaxed``/``logits``."""
        cache = out.cache
        pooled = cache["pooled"]
        dpooled = self.hash.backward(pooled, dh * (1.0 - out.h_relaxed ** 2))
        if self.classifier is not None and dlogits is not None:
            dpooled = dpooled + self.classifier.backward(pooled, dlogits)
        dfused = self.cnn_backward(cache, dpooled)
        # additive fusion hands the same cotangent to every modality
        for name in self.modality_names:
            mc = cache["mod"][name]
            dt = dfused
            for blk, t_in in zip(reversed(self.ssm[name]), reversed(mc["ssm_in"])):
                dt = blk.backward(t_in, dt)
            dz = self.dilation[name].backward(mc["z"], dt.reshape(dt.shape[0], -1))
            self.mlp_backward(name, mc, dz)

    # ------------------------------------------------------------------ objective
    def loss(self, feats: dict, labels: np.ndarray) -> float:
        out = self.forward(feats)
        return hash_loss(out.h_relaxed, labels, self.config, out.logits)[0]

    def loss_and_backward(self, feats: dict, labels: np.ndarray) -> float:
        out = self.forward(feats)
        value, dh, dlogits = hash_loss(out.h_relaxed, labels, self.config, out.logits)
        self.backward(out, dh, dlogits)
        return value

    def encode(self, feats: dict, threads: int = 1) -> np.ndarray:
        """±1 codes for a feature batch, computed in fixed-size chunks."""
        xs = self._inputs(feats)
        n = next(iter(xs.values())).shape[0]
        starts = list(range(0, n, ENCODE_CHUNK))

        def run(s):
            return self.forward({k: v[s:s + ENCODE_CHUNK] for k, v in xs.items()}).h_bin

        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(threads) as ex:
                parts = list(ex.map(run, starts))
        else:
            parts = [run(s) for s in starts]
        if not parts:
            return np.zeros((0, self.config.bits), dtype=np.int8)
        return np.concatenate(parts, axis=0)


def hash_loss(h: np.ndarray, labels: np.ndarray, cfg: ModelConfig,
              logits: np.ndarray | None = None):
    """Pairwise similarity + quantization (+ optional BCE) loss and its gradients.

    Returns ``(loss, d_loss/d_h, d_loss/d_logits)``.
    """
    B, k = h.shape
    labels = np.asarray(labels, dtype=h.dtype)
    dh = np.zeros_like(h)
    total = 0.0
    if B >= 2 and cfg.lambda_sim:
        target = np.where(labels @ labels.T > 0, 1.0, -1.0)
        mask = np.triu(np.ones((B, B), dtype=h.dtype), 1)
        n_pairs = B * (B - 1) / 2
        resid = (h @ h.T / k - target) * mask
        total += cfg.lambda_sim * float(np.sum(resid ** 2)) / n_pairs
        ds = 2.0 * cfg.lambda_sim * resid / n_pairs
        dh += (ds + ds.T) @ h / k
    if B >= 1 and cfg.lambda_quant:
        gap = np.abs(h) - 1.0
        total += cfg.lambda_quant * float(np.mean(gap ** 2))
        dh += cfg.lambda_quant * 2.0 * gap * np.sign(h) / h.size
    dlogits = None
    if logits is not None and B >= 1 and cfg.lambda_cls:
        total += cfg.lambda_cls * float(np.mean(softplus(logits) - labels * logits))
        dlogits = cfg.lambda_cls * (sigmoid(logits) - labels) / logits.size
    return total, dh, dlogits


# ---------------------------------------------------------------------- training

@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)


def train(config: ModelConfig, feats: dict, labels: np.ndarray,
          on_epoch: Callable[[int, float], None] | None = None) -> tuple[DMMH, TrainLog]:
    """Mini-batch Adam on :func:`hash_loss`; deterministic for a given seed."""
    rng = make_rng(config.seed)
    model = DMMH(config, rng)
    xs = model._inputs(feats)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise TrainingError("training split is empty")
    opt = Adam(list(model.named_parameters()), lr=config.lr)
    log = TrainLog()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            value = model.loss_and_backward({k: v[idx] for k, v in xs.items()}, labels[idx])
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                opt.step()
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch}, batch {b}: {e}") from e
            losses.append(value)
        mean = float(np.mean(losses))
        log.epoch_loss.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return model, log


def encode_bank(model: DMMH, feats: dict, labels, ids, threads: int = 1) -> CodeBank:
    codes = model.encode(feats, threads)
    return CodeBank(model.config.bits, pack(codes).reshape(len(codes), -1), labels, ids)


def randomize_for_check(model: DMMH, rng: np.random.Generator) -> DMMH:
    """Move the SSM blocks to a point where every gradient is measurable.

    At init ``delta`` is ~0.01-0.1 and the state path ``C(x) . delta B(x) x``
    is cubic in small projections, which leaves the dt / a_log gradients
    around 1e-9.  Central differences with ``h=1e-5`` on an O(1) loss carry
    roughly 1e-11 of rounding noise, so those tensors would be checked
    against noise.  Step sizes, decay rates and the B/C projections are
    therefore spread out.
    """
    for blocks in model.ssm.values():
        for blk in blocks:
            blk.proj_dt.params["bias"][:] = rng.uniform(-1.0, 1.0, blk.d_model)
            blk.proj_dt.params["weight"] *= 10.0
            blk.proj_b.params["weight"] *= 5.0
            blk.proj_c.params["weight"] *= 5.0
            blk.params["a_log"] += rng.uniform(-0.5, 0.5, blk.params["a_log"].shape)
    return model


def kink_margin(model: DMMH, feats: dict) -> float:
    """Distance of the current point from the loss's non-differentiable set.

    The loss is piecewise smooth: relu units in the MLPs and between CNN
    layers, and ``|h|`` in the quantization term, have kinks at zero.  The
    smallest absolute pre-activation over all of them is returned.
    """
    xs = model._inputs(feats)
    parts = []
    fused = []
    for name in sorted(xs):
        mc: dict = {}
        z = model.mlp_normalize(xs[name], name, mc)
        parts.append(mc["a"])
        fused.append(model.enhance(model.dilate(z, name), name))
    cc: dict = {}
    pooled = model.cnn_fuse(fuse_additive(fused), cc)
    parts.extend(cc["cnn_pre"])
    parts.append(model.hash_layer(pooled)[0])
    return float(min(np.min(np.abs(p)) for p in parts if p.size))


@dataclass
class CheckInstance:
    model: DMMH
    feats: dict
    labels: np.ndarray
    rejected: int  # draws skipped before this one


def resolution(model: DMMH, feats: dict, labels, h: float = 1e-5) -> float:
    """Smallest ratio of a tensor's largest gradient to central-difference noise.

    Rounding in two loss evaluations leaves about ``eps * |loss| / h`` of
    noise in each numeric derivative; a ratio of R bounds the noise-limited
    relative error near 1/R.
    """
    model.zero_grad()
    loss = model.loss_and_backward(feats, labels)
    noise = np.finfo(np.float64).eps * max(abs(loss), 1e-300) / h
    return min(float(np.max(np.abs(g))) for _, _, g in model.named_parameters()) / noise


def check_instance(config: ModelConfig, rng: np.random.Generator, batch: int | None = None,
                   margin: float = 1e-4, h: float = 1e-5, min_resolution: float = 2e3,
                   max_tries: int = 1000) -> CheckInstance:
    """A random model and batch on which central differences are meaningful.

    Draws pass through :func:`randomize_for_check` and are skipped when a
    kink lies within ``margin`` (a probe straddling it measures a one-sided
    slope) or when some tensor's gradient is within ``min_resolution`` of the
    rounding noise of a step of ``h``.
    """
    batch = batch or config.batch_size
    n_cls = max(config.num_classes, 1)
    for tries in range(max_tries):
        model = randomize_for_check(DMMH(config, rng), rng)
        feats = {name: rng.standard_normal((batch, dim)) for name, dim in config.modalities}
        labels = np.eye(n_cls)[rng.integers(0, n_cls, batch)]
        if (kink_margin(model, feats) >= margin
                and resolution(model, feats, labels, h) >= min_resolution):
            model.zero_grad()
            return CheckInstance(model, feats, labels, tries)
    raise RuntimeError(f"no checkable instance in {max_tries} draws")


def model_grad_check(model: DMMH, feats: dict, labels, tolerance: float = 1e-3,
                     h: float = 1e-5, max_entries: int | None = 20,
                     rng: np.random.Generator | None = None,
                     corrupt: str | None = None) -> GradCheckReport:
    """End-to-end central-difference check of every parameter tensor.

    ``corrupt`` names a tensor whose analytic gradient is doubled before the
    comparison (negative control).
    """
    if model.config.dtype != "float64":
        raise ConfigError("gradient checks need dtype float64")
    model.zero_grad()
    model.loss_and_backward(feats, labels)
    params = {name: p for name, p, _ in model.named_parameters()}
    analytic = {name: g.copy() for name, _, g in model.named_parameters()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"unknown parameter {corrupt!r}")
        analytic[corrupt] *= 2.0
    return grad_check(lambda: model.loss(feats, labels), params, analytic, tolerance, h,
                      max_entries, rng or make_rng(0))


# ---------------------------------------------------------------------- checkpoints

def checkpoint_bytes(model: DMMH) -> bytes:
    blob = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for _, p, _ in model.named_parameters():
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(raw: bytes) -> DMMH:
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError("not a DMMHCKPT checkpoint")
    try:
        version, size = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        config = ModelConfig.from_dict(json.loads(raw[off:off + size].decode()))
        off += size
        model = DMMH(config, init=False)
        for name, p, _ in model.named_parameters():
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            if tuple(shape) != p.shape:
                raise CheckpointError(f"{name}: stored shape {shape} != expected {p.shape}")
            nbytes = 8 * p.size
            if off + nbytes > len(raw):
                raise CheckpointError(f"{name}: truncated tensor data")
            p[...] = np.frombuffer(raw, "<f8", p.size, off).reshape(p.shape)
            off += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes in checkpoint")
    return model


def save_checkpoint(path, model: DMMH) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> DMMH:
    return model_from_bytes(Path(path).read_bytes())

"""Hand-written MLP stack: encoder, projector, predictor, optimizer, EMA.

Every head is a chain of fully connected layers, each followed by batch
normalization (when enabled) and a rectifier on all but the head's last
layer. Forward and backward passes are written out explicitly so gradients
can be checked against finite differences without an autograd framework.

Mode contract: the online branch runs batch-norm in training mode (batch
statistics, cached for backward); the target branch and all probe
embeddings use running statistics. Forward and backward are pure; running
statistics change only when the trainer commits them via commit_bn_stats.

The predictor consumes the projector's raw output; the normalized z1/q1
returned by forward_online are what the losses and the bank consume, and
backward chains gradients through those normalizations using cached norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import _binio
from .numerics import RngState, l2_normalize_rows

_CKPT_MAGIC = b"PSMC"
_CKPT_VERSION = 1

HEADS = ("encoder", "projector", "predictor")


@dataclass
class NetworkConfig:
    in_dim: int
    encoder: tuple[int, ...] = (128, 64)
    projector: tuple[int, ...] = (128, 64)
    predictor: tuple[int, ...] = (128, 64)
    bn: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def head_sizes(self, head: str) -> tuple[int, ...]:
        if head == "encoder":
            return (self.in_dim, *self.encoder)
        if head == "projector":
            return (self.encoder[-1], *self.projector)
        if head == "predictor":
            return (self.projector[-1], *self.predictor)
        raise ValueError(f"unknown head {head!r}")


@dataclass
class Layer:
    w: NDArray[np.float64]
    b: NDArray[np.float64]
    gamma: NDArray[np.float64] | None = None
    beta: NDArray[np.float64] | None = None
    run_mean: NDArray[np.float64] | None = None
    run_var: NDArray[np.float64] | None = None


@dataclass
class NetworkParams:
    config: NetworkConfig
    encoder: list[Layer]
    projector: list[Layer]
    predictor: list[Layer]

    def head(self, name: str) -> list[Layer]:
        return getattr(self, name)


def init_params(cfg: NetworkConfig, rng: RngState) -> NetworkParams:
    """He-normal weights, zero biases, identity batch-norm."""
    heads: dict[str, list[Layer]] = {}
    for hi, head in enumerate(HEADS):
        sizes = cfg.head_sizes(head)
        layers = []
        for li in range(len(sizes) - 1):
            fan_in, fan_out = sizes[li], sizes[li + 1]
            sub = rng.split("init", hi, li)
            w = sub.normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)
            layer = Layer(w=w, b=np.zeros(fan_out))
            if cfg.bn:
                layer.gamma = np.ones(fan_out)
                layer.beta = np.zeros(fan_out)
                layer.run_mean = np.zeros(fan_out)
                layer.run_var = np.ones(fan_out)
            layers.append(layer)
        heads[head] = layers
    return NetworkParams(config=cfg, **heads)


def copy_params(params: NetworkParams) -> NetworkParams:
    def cp(layer: Layer) -> Layer:
        return Layer(
            w=layer.w.copy(),
            b=layer.b.copy(),
            gamma=None if layer.gamma is None else layer.gamma.copy(),
            beta=None if layer.beta is None else layer.beta.copy(),
            run_mean=None if layer.run_mean is None else layer.run_mean.copy(),
            run_var=None if layer.run_var is None else layer.run_var.copy(),
        )

    return NetworkParams(
        config=params.config,
        encoder=[cp(l) for l in params.encoder],
        projector=[cp(l) for l in params.projector],
        predictor=[cp(l) for l in params.predictor],
    )


def iter_trainable(params: NetworkParams):
    """Yield (key, array) for every trainable tensor, declaration order."""
    for head in HEADS:
        for li, layer in enumerate(params.head(head)):
            yield f"{head}.{li}.w", layer.w
            yield f"{head}.{li}.b", layer.b
            if layer.gamma is not None:
                yield f"{head}.{li}.gamma", layer.gamma
                yield f"{head}.{li}.beta", layer.beta


def _head_forward(cfg, layers, x, head, train):
    """Run one head; returns (output, per-layer cache or None)."""
    cache = [] if train else None
    h = x
    last = len(layers) - 1
    for li, layer in enumerate(layers):
        a = h @ layer.w.T + layer.b
        if layer.gamma is not None:
            if train:
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                std = np.sqrt(var + cfg.bn_eps)
                xhat = (a - mu) / std
            else:
                std = np.sqrt(layer.run_var + cfg.bn_eps)
                xhat = (a - layer.run_mean) / std
                mu = var = None
            y = layer.gamma * xhat + layer.beta
        else:
            xhat = mu = var = std = None
            y = a
        out = np.maximum(y, 0.0) if li != last else y
        if not np.all(np.isfinite(out)):
            raise ValueError(f"non-finite activations in {head} layer {li}")
        if train:
            cache.append(
                {"x": h, "xhat": xhat, "mu": mu, "var": var, "std": std, "y": y}
            )
        h = out
    return h, cache


def _head_backward(cfg, layers, cache, grad_out):
    """Reverse one head; returns (grad wrt head input, {key: grad})."""
    grads = {}
    g = grad_out
    last = len(layers) - 1
    for li in range(last, -1, -1):
        layer, c = layers[li], cache[li]
        if li != last:
            g = g * (c["y"] > 0.0)
        if layer.gamma is not None:
            xhat = c["xhat"]
            grads[f"{li}.beta"] = g.sum(axis=0)
            grads[f"{li}.gamma"] = (g * xhat).sum(axis=0)
            gx = g * layer.gamma
            # batch-stat backward for xhat = (a - mean(a)) / sqrt(var(a) + eps)
            ga = (
                gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0)
            ) / c["std"]
        else:
            ga = g
        grads[f"{li}.w"] = ga.T @ c["x"]
        grads[f"{li}.b"] = ga.sum(axis=0)
        g = ga @ layer.w
    return g, grads


def forward_online(params: NetworkParams, x: np.ndarray, train: bool = True):
    """Online pass: x -> encoder -> projector -> z1, predictor -> q1.

    Returns (z1, q1, cache) with z1 and q1 row-normalized. Rows whose
    pre-normalization output is exactly zero stay zero; their flags live in
    cache["z1_zero"] / cache["q1_zero"]. With train=False no cache is built
    and batch norm uses running statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg = params.config
    h, enc_cache = _head_forward(cfg, params.encoder, x, "encoder", train)
    u, proj_cache = _head_forward(cfg, params.projector, h, "projector", train)
    v, pred_cache = _head_forward(cfg, params.predictor, u, "predictor", train)
    z1, z1_zero = l2_normalize_rows(u, return_flags=True)
    q1, q1_zero = l2_normalize_rows(v, return_flags=True)
    cache = None
    if train:
        cache = {
            "x": x,
            "encoder": enc_cache,
            "projector": proj_cache,
            "predictor": pred_cache,
            "u": u,
            "v": v,
            "z1": z1,
            "q1": q1,
            "z1_zero": z1_zero,
            "q1_zero": q1_zero,
        }
    return z1, q1, cache


def forward_target(params: NetworkParams, x: np.ndarray) -> NDArray[np.float64]:
    """Target pass: encoder + projector with running-stat batch norm.

    The result is normalized and carries no cache; nothing computed here
    ever receives gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg = params.config
    h, _ = _head_forward(cfg, params.encoder, x, "encoder", False)
    u, _ = _head_forward(cfg, params.projector, h, "projector", False)
    return l2_normalize_rows(u)


def embed(params: NetworkParams, x: np.ndarray) -> NDArray[np.float64]:
    """Normalized encoder features in evaluation mode (probe input)."""
    x = np.asarray(x, dtype=np.float64)
    h, _ = _head_forward(params.config, params.encoder, x, "encoder", False)
    return l2_normalize_rows(h)


def _norm_backward(grad_unit, raw, unit, zero_mask):
    """Chain a gradient w.r.t. a unit row back to the raw row."""
    norms = np.sqrt(np.einsum("ij,ij->i", raw, raw))
    norms = np.where(zero_mask, 1.0, norms)
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    out = (grad_unit - radial[:, None] * unit) / norms[:, None]
    out[zero_mask] = 0.0
    return out


def backward(
    params: NetworkParams,
    cache: dict,
    grad_q1: np.ndarray | None = None,
    grad_z1: np.ndarray | None = None,
) -> dict[str, NDArray[np.float64]]:
    """Backpropagate loss gradients into every online parameter.

    grad_q1 is with respect to the normalized q1 rows that forward_online
    returned; grad_z1 (used by the baseline mode, which has no predictor in
    the loss path) is with respect to normalized z1. Target parameters
    receive nothing.
    """
    if grad_q1 is None and grad_z1 is None:
        raise ValueError("nothing to backpropagate")
    cfg = params.config
    grads: dict[str, NDArray[np.float64]] = {}
    if grad_q1 is not None:
        gv = _norm_backward(
            np.asarray(grad_q1, dtype=np.float64),
            cache["v"],
            cache["q1"],
            cache["q1_zero"],
        )
        gu, pred_grads = _head_backward(cfg, params.predictor, cache["predictor"], gv)
        for key, val in pred_grads.items():
            grads[f"predictor.{key}"] = val
    else:
        gu = np.zeros_like(cache["u"])
        for li, layer in enumerate(params.predictor):
            grads[f"predictor.{li}.w"] = np.zeros_like(layer.w)
            grads[f"predictor.{li}.b"] = np.zeros_like(layer.b)
            if layer.gamma is not None:
                grads[f"predictor.{li}.gamma"] = np.zeros_like(layer.gamma)
                grads[f"predictor.{li}.beta"] = np.zeros_like(layer.beta)
    if grad_z1 is not None:
        gu = gu + _norm_backward(
            np.asarray(grad_z1, dtype=np.float64),
            cache["u"],
            cache["z1"],
            cache["z1_zero"],
        )
    gh, proj_grads = _head_backward(cfg, params.projector, cache["projector"], gu)
    for key, val in proj_grads.items():
        grads[f"projector.{key}"] = val
    _, enc_grads = _head_backward(cfg, params.encoder, cache["encoder"], gh)
    for key, val in enc_grads.items():
        grads[f"encoder.{key}"] = val
    return grads


def commit_bn_stats(params: NetworkParams, cache: dict) -> None:
    """Fold the cached batch statistics into the running estimates.

    Running variance uses the unbiased batch variance, matching the usual
    train/eval convention. Called once per optimizer step by the trainer;
    forward passes themselves never touch running state.
    """
    if not params.config.bn:
        return
    m = params.config.bn_momentum
    for head in HEADS:
        for layer, c in zip(params.head(head), cache[head]):
            if layer.run_mean is None or c["mu"] is None:
                continue
            bsz = c["x"].shape[0]
            var = c["var"] * (bsz / (bsz - 1)) if bsz > 1 else c["var"]
            layer.run_mean *= 1.0 - m
            layer.run_mean += m * c["mu"]
            layer.run_var *= 1.0 - m
            layer.run_var += m * var


@dataclass
class OptimizerState:
    """SGD-with-momentum buffers plus the warmup/cosine schedule."""

    momentum: float = 0.9
    weight_decay: float = 0.001
    warmup_epochs: int = 20
    total_epochs: int = 100
    base_lr: float = 0.0001
    peak_lr: float = 0.1
    floor_lr: float = 0.0
    step_count: int = 0
    buffers: dict[str, NDArray[np.float64]] = field(default_factory=dict)


def lr_at(opt: OptimizerState, epoch: float) -> float:
    """Learning rate at a fractional epoch: linear warmup, then cosine.

    Warmup runs base_lr -> peak_lr over warmup_epochs; the cosine branch
    decays peak_lr -> floor_lr over the remaining epochs. The two branches
    agree at the boundary.
    """
    if epoch < 0 or epoch > opt.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {opt.total_epochs}]")
    if opt.warmup_epochs > 0 and epoch < opt.warmup_epochs:
        frac = epoch / opt.warmup_epochs
        return opt.base_lr + (opt.peak_lr - opt.base_lr) * frac
    span = opt.total_epochs - opt.warmup_epochs
    progress = (epoch - opt.warmup_epochs) / span if span > 0 else 0.0
    return opt.floor_lr + 0.5 * (opt.peak_lr - opt.floor_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


def sgd_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
) -> NetworkParams:
    """In-place momentum SGD: buf <- mom*buf + (grad + wd*param); param -= lr*buf."""
    for key, tensor in iter_trainable(params):
        if key not in grads:
            raise ValueError(f"missing gradient for {key}")
        g = grads[key]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        buf = opt.buffers.get(key)
        if buf is None:
            buf = np.zeros_like(tensor)
            opt.buffers[key] = buf
        buf *= opt.momentum
        buf += g + opt.weight_decay * tensor
        tensor -= lr * buf
    opt.step_count += 1
    return params


def ema_update(
    target: NetworkParams, online: NetworkParams, m: float
) -> NetworkParams:
    """target <- m*target + (1-m)*online for every tensor, stats included."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    for head in HEADS:
        t_layers, o_layers = target.head(head), online.head(head)
        if len(t_layers) != len(o_layers):
            raise ValueError("target/online architecture mismatch")
        for tl, ol in zip(t_layers, o_layers):
            for name in ("w", "b", "gamma", "beta", "run_mean", "run_var"):
                tv, ov = getattr(tl, name), getattr(ol, name)
                if (tv is None) != (ov is None):
                    raise ValueError("target/online batch-norm mismatch")
                if tv is None:
                    continue
                if tv.shape != ov.shape:
                    raise ValueError(f"shape mismatch in {head}.{name}")
                tv *= m
                tv += (1.0 - m) * ov
    return target


def _iter_all_tensors(params: NetworkParams):
    for head in HEADS:
        for layer in params.head(head):
            yield layer.w
            yield layer.b
            if layer.gamma is not None:
                yield layer.gamma
                yield layer.beta
                yield layer.run_mean
                yield layer.run_var


def save_checkpoint(
    params: NetworkParams,
    opt: OptimizerState,
    target: NetworkParams,
    path: str | Path,
) -> None:
    """Write architecture, online params, optimizer state, target params."""
    cfg = params.config
    with open(path, "wb") as fh:
        _binio.write_magic(fh, _CKPT_MAGIC, _CKPT_VERSION)
        _binio.write_u64(fh, cfg.in_dim)
        _binio.write_u8(fh, 1 if cfg.bn else 0)
        _binio.write_f64_array(fh, np.array([cfg.bn_eps, cfg.bn_momentum]))
        for head in ("encoder", "projector", "predictor"):
            widths = getattr(cfg, head)
            _binio.write_u64(fh, len(widths))
            for w in widths:
                _binio.write_u64(fh, w)
        _binio.write_f64_array(
            fh,
            np.array(
                [
                    opt.momentum,
                    opt.weight_decay,
                    opt.base_lr,
                    opt.peak_lr,
                    opt.floor_lr,
                ]
            ),
        )
        _binio.write_u64(fh, opt.warmup_epochs)
        _binio.write_u64(fh, opt.total_epochs)
        _binio.write_u64(fh, opt.step_count)
        for tensor in _iter_all_tensors(params):
            _binio.write_f64_array(fh, tensor)
        for key, tensor in iter_trainable(params):
            buf = opt.buffers.get(key)
            _binio.write_f64_array(
                fh, buf if buf is not None else np.zeros_like(tensor)
            )
        for tensor in _iter_all_tensors(target):
            _binio.write_f64_array(fh, tensor)


def load_checkpoint(
    path: str | Path,
) -> tuple[NetworkParams, OptimizerState, NetworkParams]:
    with open(path, "rb") as fh:
        version = _binio.read_magic(fh, _CKPT_MAGIC)
        if version != _CKPT_VERSION:
            raise _binio.FormatError(f"unsupported checkpoint version {version}")
        in_dim = _binio.read_u64(fh)
        bn = bool(_binio.read_u8(fh))
        bn_eps, bn_momentum = _binio.read_f64_array(fh, (2,))
        widths = {}
        for head in ("encoder", "projector", "predictor"):
            n = _binio.read_u64(fh)
            widths[head] = tuple(_binio.read_u64(fh) for _ in range(n))
        cfg = NetworkConfig(
            in_dim=in_dim,
            encoder=widths["encoder"],
            projector=widths["projector"],
            predictor=widths["predictor"],
            bn=bn,
            bn_eps=float(bn_eps),
            bn_momentum=float(bn_momentum),
        )
        mom, wd, base, peak, floor = _binio.read_f64_array(fh, (5,))
        opt = OptimizerState(
            momentum=float(mom),
            weight_decay=float(wd),
            base_lr=float(base),
            peak_lr=float(peak),
            floor_lr=float(floor),
            warmup_epochs=_binio.read_u64(fh),
            total_epochs=_binio.read_u64(fh),
            step_count=_binio.read_u64(fh),
        )

        def read_into(p: NetworkParams):
            for tensor in _iter_all_tensors(p):
                tensor[...] = _binio.read_f64_array(fh, tensor.shape)

        params = init_params(cfg, RngState(0))
        read_into(params)
        for key, tensor in iter_trainable(params):
            opt.buffers[key] = _binio.read_f64_array(fh, tensor.shape)
        target = init_params(cfg, RngState(0))
        read_into(target)
    return params, opt, target

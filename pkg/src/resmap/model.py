"""Probabilistic U-Net over 5-channel field tiles.

A plain U-Net produces per-pixel features; a global latent z, drawn from an
image-conditioned Gaussian prior (or, during training, from a posterior that
also sees the label), is broadcast over the plane and fused through 1x1
convolutions into the class logits. Sampling z yields plausible whole-map
segmentations rather than independent per-pixel noise, which is what lets
several draws reproduce annotator disagreement.

Input stacks are always (5, H, W): R, G, B, NIR, normalized elevation.
The fusion mode decides how the elevation channel enters the segmentation
trunk: ``early`` feeds all five channels in together, ``late`` runs
elevation through a small side encoder joined at the bottleneck, ``none``
ignores it (the 4-channel control model).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .field import N_LEVELS
from .tensor import (
    Tape,
    Tensor,
    add,
    broadcast_chw,
    clamp,
    concat_channels,
    conv2d,
    cross_entropy,
    exp,
    kl_diag_gaussian,
    leaky_relu,
    mul,
    pool_max2x,
    scale,
    slice_vec,
    softmax_channels,
    spatial_mean,
    upsample_nearest2x,
)

FUSION_MODES = ("early", "late", "none")
_AUX_CH = 8
_LOGVAR_LIMIT = 10.0


class NumericalError(RuntimeError):
    """Training or inference produced a non-finite value."""


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    latent_dim: int = 6
    fusion: str = "early"
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in [0, 1), got {self.leaky_slope}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    beta: float = 1.0
    batch_size: int = 1
    seed: int = 0
    deterministic: bool = True
    # optional KL warm-up: beta stays at 0 for `beta_delay_steps`, then rises
    # linearly to `beta` over `beta_ramp_steps`; both 0 means fixed beta
    beta_delay_steps: int = 0
    beta_ramp_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.beta_delay_steps < 0 or self.beta_ramp_steps < 0:
            raise ValueError("beta schedule steps must be >= 0")

    def beta_at(self, step: int) -> float:
        """KL weight in effect at a given 0-based optimizer step."""
        if step < self.beta_delay_steps:
            return 0.0
        if self.beta_ramp_steps > 0:
            frac = (step - self.beta_delay_steps) / self.beta_ramp_steps
            if frac < 1.0:
                return self.beta * frac
        return self.beta


def _he_init(g: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (g.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)).astype(np.float32)


class ProbUNet:
    """Parameter container plus pure-functional forward passes.

    ``params`` maps name -> float32 array and is the single mutable state;
    each forward pass wraps the current arrays as leaves on a caller-owned
    tape, so gradients come back through ``Tensor.grad`` after backward.
    """

    def __init__(self, config: UNetConfig, params: dict):
        self.config = config
        self.params = params

    # ---- construction ----

    @classmethod
    def build(cls, config: UNetConfig, seed: int = 0) -> "ProbUNet":
        g = rng.stream(seed, rng.INIT)
        cfg = config
        p: dict[str, np.ndarray] = {}

        def conv_param(name: str, cout: int, cin: int, k: int, zero: bool = False):
            shape = (cout, cin, k, k)
            p[f"{name}.w"] = np.zeros(shape, np.float32) if zero else _he_init(g, shape)
            p[f"{name}.b"] = np.zeros(cout, np.float32)

        chans = [cfg.base_channels * (2**i) for i in range(cfg.depth)]
        main_in = 5 if cfg.fusion == "early" else 4

        for i in range(cfg.depth):
            cin = main_in if i == 0 else chans[i - 1]
            if cfg.fusion == "late" and i == cfg.depth - 1:
                cin += _AUX_CH
            conv_param(f"enc{i}.c1", chans[i], cin, 3)
            conv_param(f"enc{i}.c2", chans[i], chans[i], 3)

        if cfg.fusion == "late":
            for j in range(cfg.depth - 1):
                conv_param(f"aux{j}", _AUX_CH, 1 if j == 0 else _AUX_CH, 3)

        for i in range(cfg.depth - 2, -1, -1):
            conv_param(f"dec{i}.c1", chans[i], chans[i + 1] + chans[i], 3)
            conv_param(f"dec{i}.c2", chans[i], chans[i], 3)

        latent_in = 4 if cfg.fusion == "none" else 5
        half = max(cfg.base_channels // 2, 2)
        for prefix, cin in (("prior", latent_in), ("post", latent_in + N_LEVELS)):
            conv_param(f"{prefix}.c1", half, cin, 3)
            conv_param(f"{prefix}.c2", cfg.base_channels, half, 3)
            conv_param(f"{prefix}.c3", cfg.base_channels, cfg.base_channels, 3)
            conv_param(f"{prefix}.head", 2 * cfg.latent_dim, cfg.base_channels, 1)

        conv_param("fcomb.c1", chans[0], chans[0] + cfg.latent_dim, 1)
        conv_param("fcomb.c2", chans[0], chans[0], 1)
        # zero-init final head: a fresh model emits uniform class probabilities
        conv_param("fcomb.out", N_LEVELS, chans[0], 1, zero=True)

        return cls(cfg, p)

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def wrap(self, tape: Tape) -> dict:
        """Register every parameter as a tracked leaf on ``tape``."""
        return {k: tape.leaf(v) for k, v in self.params.items()}

    # ---- forward pieces ----

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 3 or x.shape[0] != 5:
            raise ValueError(f"model input must be (5, H, W), got {x.shape}")
        h, w = x.shape[1:]
        need = 2 ** (self.config.depth - 1)
        if h % need or w % need:
            raise ValueError(f"input plane {h}x{w} must be divisible by {need}")

    def _convblock(self, w: dict, name: str, t: Tensor) -> Tensor:
        out = conv2d(t, w[f"{name}.w"], w[f"{name}.b"], stride=1, padding=(w[f"{name}.w"].shape[2] // 2))
        return leaky_relu(out, self.config.leaky_slope)

    def features(self, tape: Tape, w: dict, x: np.ndarray) -> Tensor:
        """U-Net trunk: (5, H, W) input array -> (base, H, W) feature tensor."""
        self._check_input(x)
        cfg = self.config
        xt = tape.const(x if cfg.fusion == "early" else x[:4])

        aux = None
        if cfg.fusion == "late":
            aux = tape.const(x[4:5])
            for j in range(cfg.depth - 1):
                aux = pool_max2x(self._convblock(w, f"aux{j}", aux))

        skips = []
        h = xt
        for i in range(cfg.depth):
            if i > 0:
                h = pool_max2x(h)
            if aux is not None and i == cfg.depth - 1:
                h = concat_channels(h, aux)
            h = self._convblock(w, f"enc{i}.c1", h)
            h = self._convblock(w, f"enc{i}.c2", h)
            if i < cfg.depth - 1:
                skips.append(h)

        for i in range(cfg.depth - 2, -1, -1):
            h = upsample_nearest2x(h)
            h = concat_channels(skips[i], h)
            h = self._convblock(w, f"dec{i}.c1", h)
            h = self._convblock(w, f"dec{i}.c2", h)
        return h

    def _latent_net(self, tape: Tape, w: dict, prefix: str, inp: Tensor) -> tuple[Tensor, Tensor]:
        h = pool_max2x(self._convblock(w, f"{prefix}.c1", inp))
        h = pool_max2x(self._convblock(w, f"{prefix}.c2", h))
        h = self._convblock(w, f"{prefix}.c3", h)
        h = conv2d(h, w[f"{prefix}.head.w"], w[f"{prefix}.head.b"])
        v = spatial_mean(h)
        ld = self.config.latent_dim
        mu = slice_vec(v, 0, ld)
        logvar = clamp(slice_vec(v, ld, 2 * ld), -_LOGVAR_LIMIT, _LOGVAR_LIMIT)
        return mu, logvar

    def _latent_input(self, x: np.ndarray) -> np.ndarray:
        return x if self.config.fusion != "none" else x[:4]

    def prior(self, tape: Tape, w: dict, x: np.ndarray) -> tuple[Tensor, Tensor]:
        self._check_input(x)
        return self._latent_net(tape, w, "prior", tape.const(self._latent_input(x)))

    def posterior(self, tape: Tape, w: dict, x: np.ndarray, y: np.ndarray) -> tuple[Tensor, Tensor]:
        self._check_input(x)
        if y.shape != x.shape[1:]:
            raise ValueError(f"label shape {y.shape} does not match input plane {x.shape[1:]}")
        onehot = np.eye(N_LEVELS, dtype=x.dtype)[y].transpose(2, 0, 1)
        stacked = np.concatenate([self._latent_input(x), onehot], axis=0)
        return self._latent_net(tape, w, "post", tape.const(stacked))

    @staticmethod
    def sample_latent(tape: Tape, mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
        """Reparameterized draw z = mu + exp(logvar / 2) * eps."""
        return add(mu, mul(exp(scale(logvar, 0.5)), tape.const(eps)))

    def decode(self, tape: Tape, w: dict, features: Tensor, z: Tensor) -> Tensor:
        """Broadcast z over the plane and fuse into class logits."""
        zc = broadcast_chw(z, features.shape[1], features.shape[2])
        h = concat_channels(features, zc)
        h = self._convblock(w, "fcomb.c1", h)
        h = self._convblock(w, "fcomb.c2", h)
        return conv2d(h, w["fcomb.out.w"], w["fcomb.out.b"])

    # ---- objectives ----

    def elbo_loss(
        self,
        tape: Tape,
        w: dict,
        x: np.ndarray,
        y: np.ndarray,
        beta: float,
        eps: np.ndarray,
        features: Tensor | None = None,
    ) -> tuple[Tensor, float, float]:
        """Single-sample ELBO pieces: (total tensor, recon value, kl value).

        total = cross-entropy under a posterior latent draw + beta * KL(q||p).
        With beta = 0 the KL node still evaluates (for reporting) but its
        contribution to the loss is exactly zero.
        """
        if features is None:
            features = self.features(tape, w, x)
        mu_q, logvar_q = self.posterior(tape, w, x, y)
        mu_p, logvar_p = self.prior(tape, w, x)
        z = self.sample_latent(tape, mu_q, logvar_q, eps)
        logits = self.decode(tape, w, features, z)
        recon = cross_entropy(logits, y)
        kl = kl_diag_gaussian(mu_q, logvar_q, mu_p, logvar_p)
        total = add(recon, scale(kl, beta)) if beta != 0.0 else recon
        return total, float(recon.data), float(kl.data)

    def predict_logits(self, tape: Tape, w: dict, x: np.ndarray, z_eps: np.ndarray) -> Tensor:
        feats = self.features(tape, w, x)
        mu_p, logvar_p = self.prior(tape, w, x)
        z = self.sample_latent(tape, mu_p, logvar_p, z_eps)
        return self.decode(tape, w, feats, z)


def predict_samples(model: ProbUNet, x: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Draw ``m`` segmentation maps from the prior; (m, H, W) uint8.

    One forward pass computes features and the prior once; each sample costs
    only a latent draw and the fusion head.
    """
    if m < 1:
        raise ValueError(f"sample count must be >= 1, got {m}")
    tape = Tape()
    w = model.wrap(tape)
    feats = model.features(tape, w, x)
    mu_p, logvar_p = model.prior(tape, w, x)
    g = rng.stream(seed, rng.PREDICT)
    out = np.empty((m, x.shape[1], x.shape[2]), dtype=np.uint8)
    for i in range(m):
        eps = g.standard_normal(model.config.latent_dim).astype(np.float32)
        z = model.sample_latent(tape, mu_p, logvar_p, eps)
        logits = model.decode(tape, w, feats, z)
        if not np.isfinite(logits.data).all():
            raise NumericalError("non-finite logits during sampling")
        out[i] = np.argmax(logits.data, axis=0).astype(np.uint8)
    return out


def predict_dist_logits(model: ProbUNet, x: np.ndarray) -> np.ndarray:
    """Mean-latent logits (z = prior mean), the deterministic single map."""
    tape = Tape()
    w = model.wrap(tape)
    logits = model.predict_logits(tape, w, x, np.zeros(model.config.latent_dim, np.float32))
    return softmax_channels(logits).data


# ---- training ----


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)  # (step, total, recon, kl)

    def append(self, step: int, total: float, recon: float, kl: float) -> None:
        self.steps.append((step, total, recon, kl))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,total,recon,kl\n")
            for step, total, recon, kl in self.steps:
                fh.write(f"{step},{total:.6f},{recon:.6f},{kl:.6f}\n")

    @property
    def final_total(self) -> float:
        return self.steps[-1][1]


def train(
    model: ProbUNet,
    tiles: list,
    cfg: TrainConfig,
    checkpoint_path=None,
) -> TrainReport:
    """Optimize in place over ``tiles``: each entry is a dict with ``x``
    (5, H, W) float32 and ``labels``, a non-empty list of (H, W) uint8 maps.

    Every step draws one annotator label per tile uniformly at random, so
    over an epoch the model sees the label distribution, not a single
    consensus map. Failing fast on a non-finite loss keeps a diverging run
    from writing a poisoned checkpoint.
    """
    from .optim import AdamState, adam_step

    if not tiles:
        raise ValueError("training requires at least one tile")
    for i, tile in enumerate(tiles):
        if not tile.get("labels"):
            raise ValueError(f"tile {i} has no annotator labels")

    g = rng.stream(cfg.seed, rng.TRAIN)
    state = AdamState(lr=cfg.lr)
    report = TrainReport()
    ld = model.config.latent_dim
    step = 0
    n = len(tiles)
    for _epoch in range(cfg.epochs):
        order = g.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            tape = Tape()
            w = model.wrap(tape)
            total = None
            recon_sum = 0.0
            kl_sum = 0.0
            for ti in batch:
                tile = tiles[int(ti)]
                labels = tile["labels"]
                y = labels[int(g.integers(0, len(labels)))]
                eps = g.standard_normal(ld).astype(np.float32)
                loss, recon, kl = model.elbo_loss(
                    tape, w, tile["x"], y, cfg.beta_at(step), eps
                )
                recon_sum += recon
                kl_sum += kl
                total = loss if total is None else add(total, loss)
            if len(batch) > 1:
                total = scale(total, 1.0 / len(batch))
            tval = float(total.data)
            if not np.isfinite(tval):
                raise NumericalError(f"non-finite loss at step {step}: {tval}")
            tape.backward(total)
            grads = {k: w[k].grad for k in model.params}
            adam_step(model.params, grads, state)
            step += 1
            report.append(step, tval, recon_sum / len(batch), kl_sum / len(batch))

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, step=step, seed=cfg.seed)
    return report


# ---- checkpoints ----

_CKPT_MAGIC = b"FCPT"
_CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def save_checkpoint(path, model: ProbUNet, step: int = 0, seed: int = 0) -> None:
    names = sorted(model.params)
    header = {
        "format_version": _CKPT_VERSION,
        "config": dataclasses.asdict(model.config),
        "step": int(step),
        "seed": int(seed),
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(_CKPT_MAGIC, _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ProbUNet, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < _CKPT_HEAD.size + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint metadata")
    try:
        header = json.loads(raw[_CKPT_HEAD.size : _CKPT_HEAD.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint metadata: {e}") from e
    config = UNetConfig(**header["config"])
    params = {}
    offset = _CKPT_HEAD.size + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor payload at {spec['name']}")
        params[spec["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        )
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    model = ProbUNet(config, params)
    meta = {"step": header.get("step", 0), "seed": header.get("seed", 0)}
    return model, meta

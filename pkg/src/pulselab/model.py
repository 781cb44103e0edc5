"""PULSE encoder/decoder on top of the numpy autodiff engine."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .seeding import make_rng


@dataclass
class PulseConfig:
    channels: int = 3
    window: int = 100
    depth: int = 6
    width: int = 64
    kernel_size: int = 3
    init_kernel: int = 5
    init_dilation: int = 1
    init_hidden: int = 64
    decoder_layers: int = 2
    decoder_hidden: int = 64
    tv_dim: int = 1
    tv_hidden: int = 16
    tv_segments: int = 4
    pseudo_pairs: int = 3
    use_tv: bool = True
    shared_encoders: bool = False

    def __post_init__(self):
        if self.tv_dim != 1:
            raise ValueError("the time-varying component is one-dimensional")
        if not 1 <= self.pseudo_pairs <= 4:
            raise ValueError(f"pseudo_pairs must be in 1..4, got {self.pseudo_pairs}")
        if self.tv_segments > self.window:
            raise ValueError("more time-varying segments than time steps")
        for name in ("channels", "window", "depth", "width", "init_hidden",
                     "decoder_layers", "decoder_hidden", "tv_segments"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        rf = 1 + (self.kernel_size - 1) * (2**self.depth - 1)
        if self.window < rf:
            warnings.warn(f"window {self.window} shorter than encoder receptive field {rf}")

    @property
    def theta_dim(self):
        return self.width + (1 if self.use_tv else 0)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SystemRepresentation:
    theta: Tensor  # [B, D]
    theta_tv: Tensor | None  # [B, 1, W]
    features: Tensor  # [B, D, W]

    def per_step(self):
        """Theta_t = [theta, theta_tv_t] as [B, D(+1), W]."""
        B, D, W = self.features.shape
        th = ad.broadcast_to(ad.reshape(self.theta, (B, D, 1)), (B, D, W))
        if self.theta_tv is None:
            return th
        return ad.concat([th, self.theta_tv], axis=1)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class PulseModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.input_mean = np.zeros(config.channels)
        self.input_std = np.ones(config.channels)
        self.params = self._init_params(make_rng(seed, "model-init"))

    def _init_params(self, rng):
        c = self.config
        M, D, K = c.channels, c.width, c.kernel_size
        p = {}
        p["fsys.input.weight"] = _uniform(rng, (D, M), M)
        p["fsys.input.bias"] = _uniform(rng, (D,), M)
        for l in range(c.depth):
            p[f"fsys.block{l}.kernel"] = _uniform(rng, (D, D, K), D * K)
            p[f"fsys.block{l}.bias"] = _uniform(rng, (D,), D * K)
        if c.use_tv:
            p["fsys.tv1.kernel"] = _uniform(rng, (c.tv_hidden, D, 1), D)
            p["fsys.tv1.bias"] = _uniform(rng, (c.tv_hidden,), D)
            p["fsys.tv2.kernel"] = _uniform(rng, (1, c.tv_hidden, 1), c.tv_hidden)
            p["fsys.tv2.bias"] = _uniform(rng, (1,), c.tv_hidden)
        if c.shared_encoders:
            x0_dim = D
        else:
            Hi, Ki = c.init_hidden, c.init_kernel
            p["finit.conv1.kernel"] = _uniform(rng, (Hi, M, Ki), M * Ki)
            p["finit.conv1.bias"] = _uniform(rng, (Hi,), M * Ki)
            p["finit.conv2.kernel"] = _uniform(rng, (Hi, Hi, Ki), Hi * Ki)
            p["finit.conv2.bias"] = _uniform(rng, (Hi,), Hi * Ki)
            x0_dim = Hi
        H, L = c.decoder_hidden, c.decoder_layers
        p["bridge.weight"] = _uniform(rng, (L * H, x0_dim), x0_dim)
        p["bridge.bias"] = _uniform(rng, (L * H,), x0_dim)
        for l in range(L):
            n_in = c.theta_dim if l == 0 else H
            p[f"decoder{l}.w_ih"] = _uniform(rng, (3 * H, n_in), H)
            p[f"decoder{l}.w_hh"] = _uniform(rng, (3 * H, H), H)
            p[f"decoder{l}.b_ih"] = _uniform(rng, (3 * H,), H)
            p[f"decoder{l}.b_hh"] = _uniform(rng, (3 * H,), H)
        p["gy.weight"] = _uniform(rng, (M, H), H)
        p["gy.bias"] = _uniform(rng, (M,), H)
        return p

    @property
    def decoder_input_dim(self):
        return self.params["decoder0.w_ih"].shape[1]

    def n_parameters(self):
        return sum(t.data.size for t in self.params.values())

    # ---------------------------------------------------------- inputs

    def standardize(self, Y):
        return (np.asarray(Y, dtype=np.float64) - self.input_mean) / self.input_std

    def _check(self, Y):
        Y = ad.as_tensor(Y)
        if Y.ndim != 3 or Y.shape[2] != self.config.channels:
            raise DimensionError(
                f"expected [batch, time, {self.config.channels}] input, got {Y.shape}"
            )
        return Y

    # ---------------------------------------------------------- encoders

    def encoder_features(self, Y):
        p, c = self.params, self.config
        Y = self._check(Y)
        h = ad.linear(Y, p["fsys.input.weight"], p["fsys.input.bias"])
        h = ad.transpose(h, (0, 2, 1))
        for l in range(c.depth):
            z = ad.conv1d(ad.gelu(h), p[f"fsys.block{l}.kernel"], p[f"fsys.block{l}.bias"],
                          dilation=2**l)
            h = ad.add(h, z)
        return h

    def f_sys(self, Y):
        p, c = self.params, self.config
        feats = self.encoder_features(Y)
        theta = ad.max_pool_time(feats)
        tv = None
        if c.use_tv:
            z = ad.gelu(ad.conv1d(feats, p["fsys.tv1.kernel"], p["fsys.tv1.bias"]))
            z = ad.conv1d(z, p["fsys.tv2.kernel"], p["fsys.tv2.bias"])
            tv = ad.adaptive_max_pool_assign(z, c.tv_segments)
        return SystemRepresentation(theta, tv, feats)

    def init_sequence(self, Y, features=None):
        """Per-step initial-condition latents ``[B, latent, W]``."""
        p, c = self.params, self.config
        if c.shared_encoders:
            return features if features is not None else self.encoder_features(Y)
        Y = self._check(Y)
        x = ad.transpose(Y, (0, 2, 1))
        h = ad.gelu(ad.conv1d(x, p["finit.conv1.kernel"], p["finit.conv1.bias"],
                              dilation=c.init_dilation))
        return ad.conv1d(h, p["finit.conv2.kernel"], p["finit.conv2.bias"],
                         dilation=c.init_dilation)

    def f_init(self, Y, t0, features=None):
        W = ad.as_tensor(Y).shape[1]
        if not 1 <= t0 <= W:
            raise IndexError(f"t0={t0} outside [1, {W}]")
        seq = self.init_sequence(Y, features)
        return ad.getitem(seq, (slice(None), slice(None), t0 - 1))

    # ---------------------------------------------------------- decoder

    def decode(self, x0, theta_seq):
        """Generate ``L`` observations from ``x0 [B, latent]`` and ``theta_seq [B, D', L]``."""
        p, c = self.params, self.config
        x0, theta_seq = ad.as_tensor(x0), ad.as_tensor(theta_seq)
        B, _, L = theta_seq.shape
        if L == 0:
            return Tensor(np.zeros((B, 0, c.channels)))
        H = c.decoder_hidden
        h0 = ad.linear(x0, p["bridge.weight"], p["bridge.bias"])
        seq = ad.transpose(theta_seq, (0, 2, 1))
        for l in range(c.decoder_layers):
            hl = ad.getitem(h0, (slice(None), slice(l * H, (l + 1) * H)))
            seq = ad.gru_sequence(seq, hl, p[f"decoder{l}.w_ih"], p[f"decoder{l}.w_hh"],
                                  p[f"decoder{l}.b_ih"], p[f"decoder{l}.b_hh"])
        return ad.linear(seq, p["gy.weight"], p["gy.bias"])

    # ---------------------------------------------------------- losses

    @staticmethod
    def _reconstruction(pred, target):
        B, L, _ = pred.shape
        return ad.mse_sum(pred, target) / float(B * L)

    def loss_cross(self, Y_i, Y_j, target=None):
        """Reconstruct ``Y_j`` (or ``target``) from Theta of ``Y_i`` and x0 of ``Y_j``."""
        Y_i, Y_j = self._check(Y_i), self._check(Y_j)
        if Y_i.shape != Y_j.shape:
            raise DimensionError(f"pair shapes differ: {Y_i.shape} vs {Y_j.shape}")
        target = Y_j if target is None else ad.as_tensor(target)
        rep = self.f_sys(Y_i)
        feats_j = None
        if self.config.shared_encoders:
            feats_j = self.encoder_features(Y_j)
        x0 = self.f_init(Y_j, 1, features=feats_j)
        pred = self.decode(x0, rep.per_step())
        return self._reconstruction(pred, target)

    def loss_pulse(self, Y, t0_draws, target=None):
        """Average pseudo-pair loss over ``t0_draws``.

        ``target`` defaults to ``Y``; the random-pairs ablation passes another
        window here.
        """
        Y = self._check(Y)
        W = Y.shape[1]
        if len(t0_draws) == 0:
            raise ContractError("loss_pulse needs at least one t0 draw")
        for t0 in t0_draws:
            if not 1 <= t0 <= W // 2:
                raise IndexError(f"t0={t0} outside [1, {W // 2}]")
        target = Y if target is None else ad.as_tensor(target)
        rep = self.f_sys(Y)
        theta = rep.per_step()
        init = self.init_sequence(target, rep.features if target is Y else None)
        total = None
        for t0 in t0_draws:
            x0 = ad.getitem(init, (slice(None), slice(None), t0 - 1))
            pred = self.decode(x0, ad.getitem(theta, (slice(None), slice(None), slice(t0, W))))
            term = self._reconstruction(pred, ad.getitem(target, (slice(None), slice(t0, W))))
            total = term if total is None else ad.add(total, term)
        return total / float(len(t0_draws))

    # ---------------------------------------------------------- inference

    def embed(self, Y, batch_size=256):
        """Max-pooled encoder features for raw (unstandardized) windows."""
        Y = self.standardize(Y)
        out = [self.f_sys(Y[s : s + batch_size]).theta.data for s in range(0, len(Y), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.width))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(model, directory, extra=None, moments=None):
    """Manifest JSON plus one little-endian f64 blob per parameter path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, t in model.params.items():
        fname = f"{name}.f64"
        (directory / fname).write_bytes(t.data.astype("<f8").tobytes())
        blobs[name] = {"file": fname, "shape": list(t.shape)}
    if moments is not None:
        for kind, store in moments.items():
            for name, arr in store.items():
                fname = f"{kind}.{name}.f64"
                (directory / fname).write_bytes(arr.astype("<f8").tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "params": blobs,
        "has_moments": moments is not None,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def _read_blob(path, shape):
    return np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(directory, with_moments=False):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = PulseModel(PulseConfig.from_dict(manifest["config"]))
    model.input_mean = np.array(manifest["input_mean"])
    model.input_std = np.array(manifest["input_std"])
    for name, info in manifest["params"].items():
        if name not in model.params:
            raise ValueError(f"checkpoint parameter {name!r} not in model")
        model.params[name].data = _read_blob(directory / info["file"], info["shape"])
    if not with_moments:
        return model, manifest
    moments = None
    if manifest.get("has_moments"):
        moments = {
            kind: {n: _read_blob(directory / f"{kind}.{n}.f64", i["shape"])
                   for n, i in manifest["params"].items()}
            for kind in ("m", "v")
        }
    return model, manifest, moments

"""ODE-constrained VAE: encoder, decoder, ODE-net and the training loss.

Parameters live in :class:`ModelParams` as plain numpy arrays keyed by
name (``enc.*``, ``dec.*``, ``ode.*``).  Forward functions take a
:class:`BoundParams`, i.e. the same arrays wrapped as tensors that are
either watched on a tape or constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffmath as dm
from .datagen import Individual
from .diffmath import Tape, Tensor, backward, constant
from .odecore import OdeSystem, SolverConfig, solve_sequence

__all__ = [
    "KL_WEIGHT",
    "DECODER_PENALTY",
    "ModelSpec",
    "ModelParams",
    "BoundParams",
    "LatentPosterior",
    "LossBreakdown",
    "spec_for_scenario",
    "init_params",
    "encode",
    "ode_net",
    "decode",
    "reparam_sample",
    "kl_gaussian",
    "gaussian_nll",
    "posterior",
    "compute_loss",
    "loss_and_grad",
    "save_checkpoint",
    "load_checkpoint",
]

KL_WEIGHT = 0.5
DECODER_PENALTY = 0.01
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelSpec:
    """Layer sizes and the output range of the ODE-net's sigmoid layer."""

    p: int
    q: int
    n_eta: int
    latent: int = 2
    decoder_hidden: int = 10
    eta_low: float = -0.5
    eta_high: float = 0.5
    init_scale: float = 1.0

    def shapes(self) -> dict[str, tuple[int, ...]]:
        p, q, m, h, k = self.p, self.q, self.latent, self.decoder_hidden, self.n_eta
        return {
            "enc.W1": (p, p), "enc.b1": (p,),
            "enc.Wmu": (m, p), "enc.bmu": (m,),
            "enc.Wlv": (m, p), "enc.blv": (m,),
            "dec.W1": (h, m), "dec.b1": (h,),
            "dec.Wmu": (p, h), "dec.bmu": (p,),
            "dec.Wlv": (p, h), "dec.blv": (p,),
            "ode.W1": (q, q), "ode.b1": (q,),
            "ode.W2": (k, q), "ode.b2": (k,),
            "ode.diag": (k,), "ode.shift": (k,),
        }


def spec_for_scenario(scenario: str, p: int = 10, q: int = 50) -> ModelSpec:
    if scenario == "linear2":
        return ModelSpec(p, q, n_eta=2)
    if scenario == "linear4":
        return ModelSpec(p, q, n_eta=4)
    if scenario == "lotka-volterra":
        # sigmoid output in [0, 2]; smaller initial weights keep early solves stable
        return ModelSpec(p, q, n_eta=2, eta_low=0.0, eta_high=2.0, init_scale=0.1)
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass
class BoundParams:
    spec: ModelSpec
    t: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.t[name]


@dataclass
class ModelParams:
    spec: ModelSpec
    values: dict[str, np.ndarray]
    scenario: str = ""

    def __post_init__(self):
        shapes = self.spec.shapes()
        if set(shapes) != set(self.values):
            raise ValueError(f"parameter names do not match spec: {sorted(set(shapes) ^ set(self.values))}")
        for k, shape in shapes.items():
            arr = np.asarray(self.values[k], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{k}: expected shape {shape}, got {arr.shape}")
            self.values[k] = arr

    def copy(self) -> ModelParams:
        return ModelParams(self.spec, {k: v.copy() for k, v in self.values.items()}, self.scenario)

    def bind(self, tape: Tape | None = None) -> BoundParams:
        if tape is None:
            return BoundParams(self.spec, {k: constant(v) for k, v in self.values.items()})
        return BoundParams(self.spec, tape.watch_all(self.values))

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values.values())


def init_params(spec: ModelSpec, rng: np.random.Generator, scenario: str = "") -> ModelParams:
    """Weights uniform in ``±init_scale/sqrt(fan_in)``, biases zero; the
    ODE-net's diagonal output layer starts as the identity."""
    values = {}
    for name, shape in spec.shapes().items():
        if name == "ode.diag":
            values[name] = np.ones(shape)
        elif len(shape) == 2:
            s = spec.init_scale / math.sqrt(shape[1])
            values[name] = rng.uniform(-s, s, size=shape)
        else:
            values[name] = np.zeros(shape)
    return ModelParams(spec, values, scenario)


def _as_bound(params) -> BoundParams:
    return params.bind() if isinstance(params, ModelParams) else params


def _affine(W: Tensor, x, b: Tensor) -> Tensor:
    return dm.add(dm.matmul(W, x), b)


def encode(x, params) -> tuple[Tensor, Tensor]:
    """Posterior mean and standard deviation for one observation vector."""
    P = _as_bound(params)
    h = dm.add(dm.tanh(_affine(P["enc.W1"], x, P["enc.b1"])), 1.0)
    mu = _affine(P["enc.Wmu"], h, P["enc.bmu"])
    logvar = _affine(P["enc.Wlv"], h, P["enc.blv"])
    sigma = dm.exp(dm.scale(logvar, 0.5))
    if not (mu.is_finite() and sigma.is_finite()):
        raise FloatingPointError("encoder produced non-finite activations")
    return mu, sigma


def ode_net(x_star, params) -> Tensor:
    """Individual ODE parameters from baseline variables."""
    P = _as_bound(params)
    spec = P.spec
    h1 = dm.tanh(_affine(P["ode.W1"], x_star, P["ode.b1"]))
    h2 = dm.sigmoid(_affine(P["ode.W2"], h1, P["ode.b2"]))
    h2 = dm.add(dm.scale(h2, spec.eta_high - spec.eta_low), spec.eta_low)
    return dm.add(dm.mul(P["ode.diag"], h2), P["ode.shift"])


def decode(z, params) -> tuple[Tensor, Tensor]:
    """Mean and variance of the Gaussian observation model."""
    P = _as_bound(params)
    h = dm.tanh(_affine(P["dec.W1"], z, P["dec.b1"]))
    mean = _affine(P["dec.Wmu"], h, P["dec.bmu"])
    var = dm.exp(_affine(P["dec.Wlv"], h, P["dec.blv"]))
    return mean, var


def reparam_sample(mu_tilde, sigma, eps) -> Tensor:
    return dm.add(mu_tilde, dm.mul(sigma, eps))


def kl_gaussian(mu, sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions."""
    sigma = dm._lift(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("posterior standard deviation must be positive")
    s2 = dm.square(sigma)
    inner = dm.sub(dm.add(s2, dm.square(mu)), dm.add(dm.log(s2), 1.0))
    return dm.scale(dm.tsum(inner), 0.5)


def gaussian_nll(x, mean, var) -> Tensor:
    """Negative log density of ``x`` under independent normals."""
    var = dm._lift(var)
    if np.any(var.data <= 0):
        raise ValueError("observation variance must be positive")
    resid = dm.square(dm.sub(x, mean))
    inner = dm.add(dm.add(dm.log(var), _LOG_2PI), dm.div(resid, var))
    return dm.scale(dm.tsum(inner), 0.5)


@dataclass
class LatentPosterior:
    times: np.ndarray
    mu: list[Tensor]
    sigma: list[Tensor]
    mu_smooth: list[Tensor]
    eta: Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    kl_term: Tensor
    recon_term: Tensor
    match_term: Tensor
    weight_penalty: Tensor

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "kl": self.kl_term.item(),
            "recon": self.recon_term.item(),
            "match": self.match_term.item(),
            "penalty": self.weight_penalty.item(),
        }


def posterior(ind: Individual, params, sys: OdeSystem, solver: SolverConfig | None = None) -> LatentPosterior:
    """Encode every time point and integrate the ODE from the first encoding.

    The smooth mean at the first time point is the encoder mean itself.
    """
    P = _as_bound(params)
    solver = solver or SolverConfig()
    mus, sigmas = [], []
    for x in ind.values:
        mu, sigma = encode(x, P)
        mus.append(mu)
        sigmas.append(sigma)
    eta = ode_net(ind.baseline, P)
    smooth = solve_sequence(sys, eta, mus[0], ind.times, solver)
    return LatentPosterior(ind.times, mus, sigmas, smooth, eta)


def compute_loss(
    ind: Individual,
    params,
    sys: OdeSystem,
    alpha: float,
    epsilon,
    solver: SolverConfig | None = None,
) -> LossBreakdown:
    """Per-individual loss.

    ``total = 0.5*KL + NLL + alpha*match + 0.01*sum(decoder params^2)``,
    where KL uses the ODE-smoothed means, NLL is evaluated with a single
    reparameterised sample per time point (``epsilon`` has shape
    ``(latent, n_times)``) and match sums the squared gaps between encoder
    and smoothed means at all follow-up times.
    """
    P = _as_bound(params)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    K = len(ind.times)
    if epsilon.shape != (P.spec.latent, K):
        raise ValueError(f"epsilon must have shape {(P.spec.latent, K)}, got {epsilon.shape}")
    post = posterior(ind, P, sys, solver)

    kl_parts, nll_parts, match_parts = [], [], []
    for k in range(K):
        kl_parts.append(kl_gaussian(post.mu_smooth[k], post.sigma[k]))
        z = reparam_sample(post.mu_smooth[k], post.sigma[k], epsilon[:, k])
        mean, var = decode(z, P)
        nll_parts.append(gaussian_nll(ind.values[k], mean, var))
        if k > 0:
            match_parts.append(dm.tsum(dm.square(dm.sub(post.mu[k], post.mu_smooth[k]))))
    ones = lambda xs: [1.0] * len(xs)  # noqa: E731
    kl = dm.lincomb(kl_parts, ones(kl_parts))
    recon = dm.lincomb(nll_parts, ones(nll_parts))
    match = dm.lincomb(match_parts, ones(match_parts))
    dec = [dm.tsum(dm.square(v)) for k, v in P.t.items() if k.startswith("dec.")]
    penalty = dm.lincomb(dec, ones(dec))
    total = dm.lincomb([kl, recon, match, penalty], [KL_WEIGHT, 1.0, float(alpha), DECODER_PENALTY])
    return LossBreakdown(total, kl, recon, match, penalty)


def loss_and_grad(
    ind: Individual,
    params: ModelParams,
    sys: OdeSystem,
    alpha: float,
    epsilon,
    solver: SolverConfig | None = None,
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    with Tape() as tape:
        P = params.bind(tape)
        parts = compute_loss(ind, P, sys, alpha, epsilon, solver)
    return parts.values(), backward(parts.total, P.t).grads


# -- checkpoints -------------------------------------------------------------

_MAGIC = "odevae-checkpoint"
_VERSION = 1


def save_checkpoint(params: ModelParams, path, meta: Mapping[str, object] | None = None) -> None:
    """Plain-text checkpoint: header, spec, then each array with its shape."""
    s = params.spec
    lines = [f"{_MAGIC} {_VERSION}"]
    lines.append(f"scenario {params.scenario or '-'}")
    for key in ("p", "q", "n_eta", "latent", "decoder_hidden"):
        lines.append(f"spec {key} {getattr(s, key)}")
    for key in ("eta_low", "eta_high", "init_scale"):
        lines.append(f"spec {key} {getattr(s, key):.17g}")
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    for name in s.shapes():
        arr = params.values[name]
        lines.append(f"param {name} {' '.join(map(str, arr.shape))}")
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        for row in rows:
            lines.append(" ".join(f"{x:.17g}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != [_MAGIC, str(_VERSION)]:
        raise ValueError(f"{path}: not a version-{_VERSION} checkpoint")
    scenario = ""
    spec_kw: dict = {}
    values = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        tag = parts[0]
        if tag == "scenario":
            scenario = "" if parts[1] == "-" else parts[1]
        elif tag == "spec":
            key, val = parts[1], parts[2]
            spec_kw[key] = float(val) if key in ("eta_low", "eta_high", "init_scale") else int(val)
        elif tag == "meta":
            continue
        elif tag == "param":
            name, shape = parts[1], tuple(int(x) for x in parts[2:])
            nrows = 1 if len(shape) == 1 else shape[0]
            data = [float(x) for line in lines[i : i + nrows] for x in line.split()]
            i += nrows
            values[name] = np.array(data, dtype=np.float64).reshape(shape)
        else:
            raise ValueError(f"{path}:{i}: unexpected record {tag!r}")
    return ModelParams(ModelSpec(**spec_kw), values, scenario)

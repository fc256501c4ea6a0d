"""VAE assembly and likelihood objectives.

The evidence lower bound here is the usual one: expected reconstruction
log-likelihood under the approximate posterior minus the analytic KL to
the unit Gaussian prior. The importance-weighted bound tightens it with
K' weighted samples; with K' = 1 the two coincide and this module makes
that identity exact by sharing the single-sample code path.

Any object with ``encode/decode`` (tensor) and ``encode_np/decode_np``
(plain arrays) plus ``latent_dim``, ``data_dim``, ``likelihood`` and
``normalize_recon`` attributes can be scored by these functions; the
expansion-graph nodes reuse them unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .nn import (
    InvalidSpecError,
    Mlp,
    MlpSpec,
    ShapeError,
    Tensor,
    as_tensor,
    build_mlp,
    no_grad,
)

LIKELIHOODS = ("bernoulli", "gaussian_half", "gaussian_identity")

# Keeps |log p| and |log(1-p)| below ~16.2 for saturated outputs.
BERNOULLI_CLAMP = 1e-7

_LOG_PI = math.log(math.pi)
_LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Input values violate the likelihood's support."""


@dataclass
class ElboEstimate:
    """A scalar bound estimate in nats, with its decomposition."""

    total: float
    recon_term: float
    kl_term: float
    k_prime: int
    n_data: int

    def __post_init__(self):
        if self.k_prime < 1:
            raise InvalidSpecError(f"k_prime must be >= 1, got {self.k_prime}")
        if self.n_data < 1:
            raise InvalidSpecError(f"n_data must be >= 1, got {self.n_data}")


@dataclass
class VaeModel:
    """Encoder trunk, Gaussian heads, and decoder of a single VAE."""

    trunk: Mlp
    mu_head: Mlp
    logvar_head: Mlp
    decoder: Mlp
    latent_dim: int
    likelihood: str
    normalize_recon: bool = False

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise InvalidSpecError(f"unknown likelihood {self.likelihood!r}")
        if self.mu_head.out_width != self.latent_dim or self.logvar_head.out_width != self.latent_dim:
            raise InvalidSpecError("head output extents must equal latent_dim")
        if self.decoder.in_width != self.latent_dim:
            raise InvalidSpecError("decoder input extent must equal latent_dim")

    @property
    def data_dim(self) -> int:
        return self.trunk.in_width

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.trunk.forward(x)
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder.forward(z)

    def encode_np(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.trunk.forward_np(x)
        return self.mu_head.forward_np(h), self.logvar_head.forward_np(h)

    def decode_np(self, z: np.ndarray) -> np.ndarray:
        return self.decoder.forward_np(z)

    def parameters(self) -> list[Tensor]:
        params = []
        for net in (self.trunk, self.mu_head, self.logvar_head, self.decoder):
            params.extend(net.parameters())
        return params

    def copy(self, requires_grad: bool | None = None) -> "VaeModel":
        return VaeModel(
            trunk=self.trunk.copy(requires_grad),
            mu_head=self.mu_head.copy(requires_grad),
            logvar_head=self.logvar_head.copy(requires_grad),
            decoder=self.decoder.copy(requires_grad),
            latent_dim=self.latent_dim,
            likelihood=self.likelihood,
            normalize_recon=self.normalize_recon,
        )

    def param_bytes(self) -> bytes:
        return b"".join(
            net.param_bytes() for net in (self.trunk, self.mu_head, self.logvar_head, self.decoder)
        )


def build_vae(
    data_dim: int = 144,
    latent_dim: int = 16,
    trunk_widths=(128,),
    decoder_widths=(128,),
    likelihood: str = "bernoulli",
    hidden_activation: str = "tanh",
    normalize_recon: bool = False,
    seed: int = 0,
) -> VaeModel:
    """Assemble the desk-scale VAE; every sub-network gets its own init stream."""
    if likelihood not in LIKELIHOODS:
        raise InvalidSpecError(f"unknown likelihood {likelihood!r}")
    out_act = "sigmoid" if likelihood == "bernoulli" else "identity"
    trunk_spec = MlpSpec(
        (data_dim, *trunk_widths),
        (hidden_activation,) * len(trunk_widths),
        rng_mod.derive_seed(seed, "vae/trunk"),
    )
    head_in = trunk_spec.layer_widths[-1]
    mu_spec = MlpSpec((head_in, latent_dim), ("identity",), rng_mod.derive_seed(seed, "vae/mu"))
    logvar_spec = MlpSpec(
        (head_in, latent_dim), ("identity",), rng_mod.derive_seed(seed, "vae/logvar")
    )
    dec_spec = MlpSpec.make(
        (latent_dim, *decoder_widths, data_dim),
        hidden=hidden_activation,
        output=out_act,
        seed=rng_mod.derive_seed(seed, "vae/decoder"),
    )
    return VaeModel(
        trunk=build_mlp(trunk_spec),
        mu_head=build_mlp(mu_spec),
        logvar_head=build_mlp(logvar_spec),
        decoder=build_mlp(dec_spec),
        latent_dim=latent_dim,
        likelihood=likelihood,
        normalize_recon=normalize_recon,
    )


# ---------------------------------------------------------------------------
# Core distributional pieces


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    """z = mu + exp(logvar/2) * noise, differentiable through mu and logvar."""
    mu = as_tensor(mu)
    logvar = as_tensor(logvar)
    noise = as_tensor(noise)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeError(
            f"mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape} must match"
        )
    return mu + (logvar * 0.5).exp() * noise


def _promote_2d(t: Tensor) -> Tensor:
    return t.reshape(1, t.shape[0]) if t.ndim == 1 else t


def gaussian_kl(mu, logvar) -> Tensor:
    """Analytic KL(N(mu, exp(logvar)) || N(0, I)), per example then batch-averaged."""
    mu = _promote_2d(as_tensor(mu))
    logvar = _promote_2d(as_tensor(logvar))
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} must match")
    per_example = (mu * mu + logvar.exp() - logvar - 1.0).sum(axis=1) * 0.5
    return per_example.mean()


def gaussian_kl_np(mu: np.ndarray, logvar: np.ndarray, per_example: bool = False):
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    kl = 0.5 * (mu * mu + np.exp(logvar) - logvar - 1.0).sum(axis=-1)
    return kl if per_example else float(kl.mean())


def _recon_loglik_pe(decoder_output: Tensor, x: Tensor, likelihood: str, normalize: bool) -> Tensor:
    """Per-example reconstruction log-likelihood, shape (n,)."""
    y = _promote_2d(as_tensor(decoder_output))
    x = _promote_2d(as_tensor(x))
    if y.shape != x.shape:
        raise ShapeError(f"decoder output {y.shape} and data {x.shape} must match")
    d = x.shape[-1]
    if likelihood == "bernoulli":
        if np.any(x.data < 0.0) or np.any(x.data > 1.0):
            raise DomainError("bernoulli likelihood needs data in [0, 1]")
        p = y.clip(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP)
        ll = (x * p.log() + (1.0 - x) * (1.0 - p).log()).sum(axis=1)
    elif likelihood == "gaussian_half":
        diff = x - y
        ll = -(diff * diff).sum(axis=1) - (d / 2.0) * _LOG_PI
    elif likelihood == "gaussian_identity":
        diff = x - y
        ll = (diff * diff).sum(axis=1) * -0.5 - (d / 2.0) * _LOG_2PI
    else:
        raise InvalidSpecError(f"unknown likelihood {likelihood!r}")
    if normalize:
        ll = ll * (1.0 / d)
    return ll


def recon_loglik(decoder_output, x, likelihood: str, normalize: bool = False) -> Tensor:
    """Batch-mean reconstruction log-likelihood (nats)."""
    return _recon_loglik_pe(decoder_output, x, likelihood, normalize).mean()


def recon_loglik_np(
    y: np.ndarray, x: np.ndarray, likelihood: str, normalize: bool = False
) -> np.ndarray:
    """Per-example reconstruction log-likelihood over trailing axis; no tape."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if likelihood == "bernoulli":
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("bernoulli likelihood needs data in [0, 1]")
        p = np.clip(y, BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP)
        ll = (x * np.log(p) + (1.0 - x) * np.log1p(-p)).sum(axis=-1)
    elif likelihood == "gaussian_half":
        diff = x - y
        ll = -(diff * diff).sum(axis=-1) - (d / 2.0) * _LOG_PI
    elif likelihood == "gaussian_identity":
        diff = x - y
        ll = -0.5 * (diff * diff).sum(axis=-1) - (d / 2.0) * _LOG_2PI
    else:
        raise InvalidSpecError(f"unknown likelihood {likelihood!r}")
    if normalize:
        ll = ll / d
    return ll


# ---------------------------------------------------------------------------
# Bounds


def _batch_len(batch) -> int:
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    return arr.shape[0] if arr.ndim > 1 else 1


def _noise_block(rng, mc: int, n: int, latent: int, noise) -> np.ndarray:
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.ndim == 2:
            noise = noise[None]
        if noise.shape != (mc, n, latent):
            raise ShapeError(f"noise shape {noise.shape} != {(mc, n, latent)}")
        return noise
    if rng is None:
        rng = rng_mod.stream(0, "vae/default-noise")
    return rng.standard_normal((mc, n, latent))


def elbo_parts(model, batch, mc_samples: int = 1, noise=None, rng=None) -> tuple[Tensor, Tensor]:
    """Differentiable (recon, kl) pair; the bound is recon - kl."""
    if mc_samples < 1:
        raise InvalidSpecError(f"mc_samples must be >= 1, got {mc_samples}")
    x = as_tensor(batch)
    n = x.shape[0]
    mu, logvar = model.encode(x)
    kl = gaussian_kl(mu, logvar)
    eps = _noise_block(rng, mc_samples, n, model.latent_dim, noise)
    recon = None
    for s in range(mc_samples):
        z = reparameterize(mu, logvar, eps[s])
        y = model.decode(z)
        r = recon_loglik(y, x, model.likelihood, model.normalize_recon)
        recon = r if recon is None else recon + r
    if mc_samples > 1:
        recon = recon * (1.0 / mc_samples)
    return recon, kl


def elbo(model, batch, mc_samples: int = 1, noise=None, rng=None) -> ElboEstimate:
    """Single-model evidence lower bound estimate on a batch."""
    with no_grad():
        recon, kl = elbo_parts(model, batch, mc_samples, noise, rng)
    n = _batch_len(batch)
    return ElboEstimate(
        total=float(recon) - float(kl),
        recon_term=float(recon),
        kl_term=float(kl),
        k_prime=1,
        n_data=n,
    )


def _log_prior_pe(z: Tensor, latent: int) -> Tensor:
    return (z * z).sum(axis=1) * -0.5 - (latent / 2.0) * _LOG_2PI


def iwelbo_parts(model, batch, k_prime: int, noise=None, rng=None):
    """Differentiable importance-weighted bound.

    Returns ``(total, recon_report, kl_report)`` where ``total`` is a scalar
    tensor and the report values are floats. K' = 1 shares the single-sample
    path, so it equals the plain bound exactly under the same noise.
    """
    if k_prime < 1:
        raise InvalidSpecError(f"k_prime must be >= 1, got {k_prime}")
    if k_prime == 1:
        recon, kl = elbo_parts(model, batch, 1, noise, rng)
        return recon - kl, float(recon), float(kl)

    x = as_tensor(batch)
    n = x.shape[0]
    latent = model.latent_dim
    mu, logvar = model.encode(x)
    eps = _noise_block(rng, k_prime, n, latent, noise)

    log_ws: list[Tensor] = []
    recon_running = 0.0
    for k in range(k_prime):
        gamma = eps[k]
        z = reparameterize(mu, logvar, gamma)
        y = model.decode(z)
        recon_pe = _recon_loglik_pe(y, x, model.likelihood, model.normalize_recon)
        # log q(z|x) at the reparameterized sample: the quadratic term is
        # exactly the (constant) noise, so only logvar stays in the graph.
        gamma_sq = (gamma * gamma).sum(axis=1)
        log_q = (logvar.sum(axis=1) + gamma_sq + latent * _LOG_2PI) * -0.5
        log_p = _log_prior_pe(z, latent)
        log_ws.append(recon_pe + log_p - log_q)
        recon_running += float(recon_pe.mean())

    shift = np.maximum.reduce([w.data for w in log_ws])  # constant max-shift
    total_exp = None
    for w in log_ws:
        e = (w - shift).exp()
        total_exp = e if total_exp is None else total_exp + e
    log_mean_w = total_exp.log() + shift - math.log(k_prime)
    total = log_mean_w.mean()
    with no_grad():
        kl_report = float(gaussian_kl(mu, logvar))
    return total, recon_running / k_prime, kl_report


def iwelbo(model, batch, k_prime: int, noise=None, rng=None) -> ElboEstimate:
    """Importance-weighted bound estimate with K' samples per example."""
    with no_grad():
        total, recon_report, kl_report = iwelbo_parts(model, batch, k_prime, noise, rng)
    n = _batch_len(batch)
    return ElboEstimate(
        total=float(total),
        recon_term=recon_report,
        kl_term=kl_report,
        k_prime=k_prime,
        n_data=n,
    )


# ---------------------------------------------------------------------------
# Evaluation-only paths (plain numpy, chunked)


def iw_logpx_np(
    model,
    x: np.ndarray,
    k_prime: int,
    rng=None,
    noise=None,
    batch_chunk: int = 64,
    k_chunk: int = 250,
) -> np.ndarray:
    """Per-example importance-weighted log-likelihood estimates, shape (n,).

    Chunked over both the batch and the K' samples; chunks are reduced in a
    fixed order so results are deterministic for a given generator. An
    explicit ``noise`` array of shape (k_prime, n, latent) overrides the
    generator (used for order-invariant scoring).
    """
    if k_prime < 1:
        raise InvalidSpecError(f"k_prime must be >= 1, got {k_prime}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidSpecError("need a non-empty (n, d) sample matrix")
    if rng is None and noise is None:
        rng = rng_mod.stream(0, "vae/iw-eval")
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (k_prime, x.shape[0], model.latent_dim):
            raise ShapeError(
                f"noise shape {noise.shape} != {(k_prime, x.shape[0], model.latent_dim)}"
            )
    latent = model.latent_dim
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], batch_chunk):
        xc = x[start : start + batch_chunk]
        nc = xc.shape[0]
        mu, logvar = model.encode_np(xc)
        sd = np.exp(0.5 * logvar)
        blocks = []
        done = 0
        while done < k_prime:
            kc = min(k_chunk, k_prime - done)
            if noise is not None:
                gamma = noise[done : done + kc, start : start + nc, :]
            else:
                gamma = rng.standard_normal((kc, nc, latent))
            z = mu[None] + sd[None] * gamma
            y = model.decode_np(z.reshape(-1, latent)).reshape(kc, nc, -1)
            recon = recon_loglik_np(y, xc[None], model.likelihood, model.normalize_recon)
            log_p = -0.5 * (z * z).sum(axis=-1) - (latent / 2.0) * _LOG_2PI
            log_q = -0.5 * ((gamma * gamma).sum(axis=-1) + logvar.sum(axis=-1)[None] + latent * _LOG_2PI)
            blocks.append(recon + log_p - log_q)
            done += kc
        log_w = np.concatenate(blocks, axis=0)
        shift = log_w.max(axis=0)
        out[start : start + nc] = shift + np.log(np.exp(log_w - shift).mean(axis=0))
    return out


def nll_estimate(model, data, k_prime: int = 5000, rng=None, return_se: bool = False, **chunking):
    """Mean negative importance-weighted log-likelihood over a dataset (nats)."""
    x = getattr(data, "images", data)
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InvalidSpecError("empty dataset")
    logpx = iw_logpx_np(model, x, k_prime, rng, **chunking)
    nll = float(-logpx.mean())
    if return_se:
        se = float(logpx.std(ddof=1) / math.sqrt(len(logpx))) if len(logpx) > 1 else 0.0
        return nll, se
    return nll


def mean_elbo_np(model, x: np.ndarray, rng=None, noise=None, per_example: bool = False):
    """Single-sample bound per example (plain arrays), batch-averaged by default."""
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        rng = rng_mod.stream(0, "vae/elbo-eval")
    mu, logvar = model.encode_np(x)
    gamma = np.asarray(noise, dtype=np.float64) if noise is not None else rng.standard_normal(mu.shape)
    z = mu + np.exp(0.5 * logvar) * gamma
    y = model.decode_np(z)
    recon = recon_loglik_np(y, x, model.likelihood, model.normalize_recon)
    kl = gaussian_kl_np(mu, logvar, per_example=True)
    vals = recon - kl
    return vals if per_example else float(vals.mean())

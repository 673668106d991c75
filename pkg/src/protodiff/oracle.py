"""Closed-form check that ELBO-improving condition updates make progress.

On a 1-D linear-Gaussian diffusion with 1-3 steps, the per-sample evidence
lower bound, the conditional log-likelihood, and the posterior KL gap are
all exact Gaussian integrals. That makes the identity

    log p(x | s) = ELBO(x; s) + KL(q(z | x) || p(z | x, s))

testable to machine precision, along with the guarantee that any update
of s which does not decrease the ELBO either raises the conditional
likelihood of the data or tightens the variational gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class VerificationError(Exception):
    """A property sweep found a counterexample."""


@dataclass(frozen=True)
class ToyModel:
    """Conditional reverse chain with affine Gaussian kernels.

    Forward: q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, 1 - alpha_t).
    Reverse: p(x_{t-1} | x_t, s) = N(a_t x_t + b_t s + c_t, v_t) for
    t = T..1 (x_0 is the data), with prior p(x_T) = N(0, 1).
    """

    alphas: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        T = len(self.alphas)
        for name in ("a", "b", "c", "v"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} must have length T={T}")
        if np.any(self.alphas <= 0) or np.any(self.alphas >= 1):
            raise ValueError("alphas must lie strictly in (0, 1)")
        if np.any(self.v <= 0):
            raise ValueError("conditional variances must be positive")

    @property
    def T(self) -> int:
        return len(self.alphas)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def _forward_moments(model: ToyModel, x: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of z = (x_1..x_T) under q(z | x)."""
    abar = model.alpha_bars
    mu = np.sqrt(abar) * x
    T = model.T
    cov = np.empty((T, T))
    for i in range(T):
        for j in range(T):
            lo, hi = min(i, j), max(i, j)
            cov[i, j] = np.sqrt(abar[hi] / abar[lo]) * (1.0 - abar[lo])
    return mu, cov


def _expected_gauss_logpdf(alpha: np.ndarray, beta: float, var: float,
                           mu: np.ndarray, cov: np.ndarray) -> float:
    """E[log N(r; 0, var)] for residual r = alpha' z + beta, z ~ N(mu, cov)."""
    mean_r = float(alpha @ mu + beta)
    var_r = float(alpha @ cov @ alpha)
    return -0.5 * (LOG_2PI + np.log(var)) - (mean_r ** 2 + var_r) / (2.0 * var)


def toy_elbo(x: float, s: float, model: ToyModel) -> float:
    """Exact E_{q(z|x)}[log p(x, z | s) - log q(z | x)] (no Monte Carlo)."""
    T = model.T
    mu, cov = _forward_moments(model, x)
    total = 0.0
    # reconstruction term, t = 1: residual x - a_1 x_1 - b_1 s - c_1
    alpha = np.zeros(T)
    alpha[0] = -model.a[0]
    total += _expected_gauss_logpdf(alpha, x - model.b[0] * s - model.c[0],
                                    model.v[0], mu, cov)
    # transition terms, t = 2..T: residual x_{t-1} - a_t x_t - b_t s - c_t
    for t in range(2, T + 1):
        alpha = np.zeros(T)
        alpha[t - 2] = 1.0
        alpha[t - 1] = -model.a[t - 1]
        total += _expected_gauss_logpdf(alpha, -model.b[t - 1] * s - model.c[t - 1],
                                        model.v[t - 1], mu, cov)
    # prior term: residual x_T
    alpha = np.zeros(T)
    alpha[T - 1] = 1.0
    total += _expected_gauss_logpdf(alpha, 0.0, 1.0, mu, cov)
    # entropy of q(z | x)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("degenerate forward covariance")
    total += 0.5 * (T * (LOG_2PI + 1.0) + logdet)
    return float(total)


def _model_joint(model: ToyModel, s: float):
    """Mean and covariance of (x_1..x_T, x) under the reverse chain given s."""
    T = model.T
    n = T + 1
    mean = np.zeros(n)
    cov = np.zeros((n, n))
    # generative order: x_T, x_{T-1}, ..., x_1, x_0; map to storage index
    idx = lambda t: t - 1 if t >= 1 else T  # x_t -> position, x_0 at the end
    mean[idx(T)] = 0.0
    cov[idx(T), idx(T)] = 1.0
    seen = [idx(T)]
    for t in range(T, 0, -1):
        new, prev = idx(t - 1), idx(t)
        a, b, c, v = model.a[t - 1], model.b[t - 1], model.c[t - 1], model.v[t - 1]
        mean[new] = a * mean[prev] + b * s + c
        for k in seen:
            cov[new, k] = cov[k, new] = a * cov[prev, k]
        cov[new, new] = a ** 2 * cov[prev, prev] + v
        seen.append(new)
    return mean, cov


def toy_loglik(x: float, s: float, model: ToyModel) -> float:
    """Exact log p(x | s) by chain marginalization."""
    mean, cov = _model_joint(model, s)
    m_x, v_x = mean[-1], cov[-1, -1]
    return float(-0.5 * (LOG_2PI + np.log(v_x)) - (x - m_x) ** 2 / (2.0 * v_x))


def toy_posterior_kl(x: float, s: float, model: ToyModel) -> float:
    """Exact KL(q(z | x) || p(z | x, s)) between the two Gaussians over z."""
    T = model.T
    mu_q, cov_q = _forward_moments(model, x)
    mean, cov = _model_joint(model, s)
    mu_z, mu_x = mean[:T], mean[T]
    c_zz, c_zx, v_x = cov[:T, :T], cov[:T, T], cov[T, T]
    mu_p = mu_z + c_zx * (x - mu_x) / v_x
    cov_p = c_zz - np.outer(c_zx, c_zx) / v_x
    sign_p, logdet_p = np.linalg.slogdet(cov_p)
    sign_q, logdet_q = np.linalg.slogdet(cov_q)
    if sign_p <= 0 or sign_q <= 0:
        raise ValueError("degenerate posterior covariance")
    inv_p = np.linalg.inv(cov_p)
    diff = mu_p - mu_q
    kl = 0.5 * (logdet_p - logdet_q - T + np.trace(inv_p @ cov_q)
                + diff @ inv_p @ diff)
    return float(kl)


def elbo_gradient_s(x: float, s: float, model: ToyModel) -> float:
    """d ELBO / d s. The ELBO is quadratic in s, so one central difference
    is exact."""
    return 0.5 * (toy_elbo(x, s + 1.0, model) - toy_elbo(x, s - 1.0, model))


def improve_s(x: float, s: float, model: ToyModel, step: float = 1.0,
              max_backtrack: int = 60) -> float:
    """One gradient-ascent step on s with backtracking until the ELBO does
    not decrease. Returns s unchanged when already stationary."""
    g = elbo_gradient_s(x, s, model)
    if g == 0.0:
        return s
    base = toy_elbo(x, s, model)
    lam = step
    for _ in range(max_backtrack):
        cand = s + lam * g
        if toy_elbo(x, cand, model) >= base:
            return cand
        lam *= 0.5
    return s


def verify_prop1(x: float, s_i: float, s_next: float, model: ToyModel,
                 tol: float = 1e-8) -> dict:
    """Check the ELBO/likelihood/KL difference identity and report which
    improving outcome holds for the update s_i -> s_next.

    Raises ValueError when the update decreases the ELBO (precondition
    violation, not a property failure).
    """
    elbo_i = toy_elbo(x, s_i, model)
    elbo_n = toy_elbo(x, s_next, model)
    if elbo_n < elbo_i - 1e-12:
        raise ValueError(f"update decreases ELBO ({elbo_i} -> {elbo_n})")
    logp_i = toy_loglik(x, s_i, model)
    logp_n = toy_loglik(x, s_next, model)
    kl_i = toy_posterior_kl(x, s_i, model)
    kl_n = toy_posterior_kl(x, s_next, model)

    delta_logp = logp_n - logp_i
    delta_elbo = elbo_n - elbo_i
    delta_kl = kl_n - kl_i
    identity_err = abs(delta_logp - (delta_elbo + delta_kl))
    pointwise_err = max(abs(logp_i - (elbo_i + kl_i)), abs(logp_n - (elbo_n + kl_n)))
    kl_decreased = delta_kl <= 1e-12
    logp_increased = delta_logp >= -1e-12
    return {
        "elbo_before": elbo_i, "elbo_after": elbo_n,
        "loglik_before": logp_i, "loglik_after": logp_n,
        "kl_before": kl_i, "kl_after": kl_n,
        "delta_elbo": delta_elbo, "delta_loglik": delta_logp, "delta_kl": delta_kl,
        "identity_abs_err": identity_err,
        "pointwise_identity_abs_err": pointwise_err,
        "kl_decreased": kl_decreased,
        "loglik_increased": logp_increased,
        "ok": identity_err < tol and (kl_decreased or logp_increased),
    }


def random_toy(gen: np.random.Generator, T: int | None = None) -> ToyModel:
    if T is None:
        T = int(gen.integers(1, 3))
    return ToyModel(
        alphas=gen.uniform(0.4, 0.98, T),
        a=gen.uniform(-1.2, 1.2, T),
        b=gen.uniform(-1.0, 1.0, T),
        c=gen.uniform(-0.5, 0.5, T),
        v=gen.uniform(0.2, 2.0, T),
    )


def run_prop1_sweep(trials: int, gen: np.random.Generator, tol: float = 1e-8) -> dict:
    """Randomized sweep over toy models and ELBO-improving updates.

    Raises VerificationError on any identity violation or any case where
    neither improving outcome holds.
    """
    max_identity_err = 0.0
    max_pointwise_err = 0.0
    n_kl_decreased = 0
    n_logp_increased = 0
    for k in range(trials):
        model = random_toy(gen)
        x = float(gen.normal(scale=1.5))
        s = float(gen.normal(scale=1.5))
        s_next = improve_s(x, s, model)
        report = verify_prop1(x, s, s_next, model, tol=tol)
        max_identity_err = max(max_identity_err, report["identity_abs_err"])
        max_pointwise_err = max(max_pointwise_err, report["pointwise_identity_abs_err"])
        n_kl_decreased += report["kl_decreased"]
        n_logp_increased += report["loglik_increased"]
        if not report["ok"]:
            raise VerificationError(
                f"trial {k}: identity error {report['identity_abs_err']:.3e}, "
                f"kl_decreased={report['kl_decreased']}, "
                f"loglik_increased={report['loglik_increased']}"
            )
    return {
        "trials": trials,
        "max_identity_abs_err": max_identity_err,
        "max_pointwise_identity_abs_err": max_pointwise_err,
        "n_kl_decreased": n_kl_decreased,
        "n_loglik_increased": n_logp_increased,
        "violations": 0,
    }

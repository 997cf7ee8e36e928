"""The three training objectives and their analytic gradients.

All objectives follow the maximize convention: larger is better and the
trainer negates internally.  The discrete posterior q(y|x,s) is always
treated as a constant inside a gradient evaluation; callers may pass a
precomputed posterior, otherwise it is recomputed from the current
parameters (base posterior for the base and dual objectives, unified
posterior for the unified objective).

Gradients are returned as a dict keyed by parameter-block names matching
ModelState.named_params(), averaged over the batch.  The dual objective
returns gradients only for the dual trunk/head blocks; every other block
is frozen by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ObjectiveEvaluationError
from .gaussmath import _LOG_2PI
from .model import ActionPosterior, ModelState, _log_softmax, _softmax
from .neuralnet import merge_gaussian_grad, split_gaussian_raw


@dataclass
class ObjectiveReport:
    """Decomposed objective value; total is the signed sum of the terms."""

    total: float
    recon_x: float
    recon_x_prime: float
    kl_y: float
    expected_kl_z: float
    expected_kl_z_prime: float
    qy_used: ActionPosterior

    def __post_init__(self):
        signed = (self.recon_x + self.recon_x_prime - self.kl_y
                  - self.expected_kl_z - self.expected_kl_z_prime)
        if abs(self.total - signed) > 1e-9:
            raise ObjectiveEvaluationError("report total is inconsistent")
        for name in ("kl_y", "expected_kl_z", "expected_kl_z_prime"):
            if getattr(self, name) < -1e-9:
                raise ObjectiveEvaluationError(f"negative KL term {name}")


def _require_finite(arr, term: str):
    if not np.all(np.isfinite(arr)):
        raise ObjectiveEvaluationError(f"non-finite value in term {term!r}")


def _as_qy_matrix(qy, n: int, k: int) -> np.ndarray:
    if isinstance(qy, ActionPosterior):
        qy = qy.probs[None, :]
    qy = np.atleast_2d(np.asarray(qy, dtype=np.float64))
    if qy.shape != (n, k):
        raise ContractViolation(f"posterior shape {qy.shape} != ({n}, {k})")
    return qy


def _recon_log_pdf(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """ln N(x; xhat, I) per row."""
    r = x - xhat
    return -0.5 * (x.shape[-1] * _LOG_2PI + np.sum(r * r, axis=-1))


def _kl_vs_components(qm, ql, mix):
    """KL(q || p_k) for all components.  qm/ql: (N, D) or (N, K, D)."""
    mu = mix.means
    plv = mix.clamped_log_vars()
    if qm.ndim == 2:
        qm = qm[:, None, :]
        ql = ql[:, None, :]
    dlv = ql - plv[None, :, :]
    dm = qm - mu[None, :, :]
    return 0.5 * np.sum(np.exp(dlv) + dm * dm / np.exp(plv)[None] - 1.0 - dlv,
                        axis=-1)


def _kl_y(qy: np.ndarray, log_prior: np.ndarray) -> np.ndarray:
    """KL(q_y || p_y) per row, with 0 * ln 0 treated as 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(qy > 0.0, qy * (np.log(qy) - log_prior), 0.0)
    return terms.sum(axis=-1)


def _prep(m: ModelState, x, s):
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if X.shape[1] != m.traj_dim or S.shape[1] != m.scenario_dim:
        raise ContractViolation("input dimensions do not match the model")
    if X.shape[0] != S.shape[0]:
        raise ContractViolation("batch sizes of x and s differ")
    return X, S


def _mean_posterior(qy: np.ndarray) -> ActionPosterior:
    p = qy.mean(axis=0)
    return ActionPosterior(p / p.sum())


# ---------------------------------------------------------------------
# Base objective
# ---------------------------------------------------------------------

def _elbo_base(m: ModelState, X, S, noise_Z, qy, want_grads):
    n = X.shape[0]
    noise_Z = np.asarray(noise_Z, dtype=np.float64).reshape(n, m.latent_dim)

    enc_raw, enc_cache = m.encoder.forward_cache(X)
    qm, ql, enc_mask = split_gaussian_raw(enc_raw)
    cls_logits, cls_cache = m.classifier.forward_cache(S)
    log_prior = _log_softmax(cls_logits)

    if qy is None:
        ce = _kl_vs_components(qm, ql, m.mixture) + _entropy_rows(ql)[:, None]
        qy = _softmax(log_prior - ce)
    qy = _as_qy_matrix(qy, n, m.n_actions)

    sig = np.exp(0.5 * ql)
    Z = qm + sig * noise_Z
    xhat, dec_cache = m.decoder.forward_cache(Z)
    recon = _recon_log_pdf(X, xhat)
    _require_finite(recon, "recon_x")

    kl_y = _kl_y(qy, log_prior)
    _require_finite(kl_y, "kl_y")
    kl_z = _kl_vs_components(qm, ql, m.mixture)      # (N, K)
    _require_finite(kl_z, "expected_kl_z")
    exp_kl_z = np.sum(qy * kl_z, axis=-1)

    total = recon - kl_y - exp_kl_z
    report = ObjectiveReport(
        total=float(total.mean()),
        recon_x=float(recon.mean()),
        recon_x_prime=0.0,
        kl_y=float(kl_y.mean()),
        expected_kl_z=float(exp_kl_z.mean()),
        expected_kl_z_prime=0.0,
        qy_used=_mean_posterior(qy),
    )
    if not want_grads:
        return report, None

    grads: dict[str, np.ndarray] = {}
    # Decoder: d recon / d xhat = (x - xhat).
    dec_grads, dZ = m.decoder.backward(dec_cache, X - xhat)
    grads.update(m.decoder.grads_to_dict("decoder", dec_grads))

    # Encoder: reparameterized sample path plus the weighted KL path.
    mu = m.mixture.means
    plv = m.mixture.clamped_log_vars()
    pv = np.exp(plv)
    dm = qm[:, None, :] - mu[None, :, :]             # (N, K, D)
    d_qm = dZ - np.einsum("nk,nkd->nd", qy, dm / pv[None])
    exp_dlv = np.exp(ql[:, None, :] - plv[None, :, :])
    d_ql = dZ * 0.5 * sig * noise_Z \
        - 0.5 * np.einsum("nk,nkd->nd", qy, exp_dlv - 1.0)
    enc_grads, _ = m.encoder.backward(
        enc_cache, merge_gaussian_grad(d_qm, d_ql, enc_mask))
    grads.update(m.encoder.grads_to_dict("encoder", enc_grads))

    # Classifier: d(-KL(q_y||p_y)) / d logits = q_y - p_y.
    prior = np.exp(log_prior)
    cls_grads, _ = m.classifier.backward(cls_cache, qy - prior)
    grads.update(m.classifier.grads_to_dict("classifier", cls_grads))

    # Mixture parameters.
    w = qy[:, :, None]                               # (N, K, 1)
    d_mu = np.sum(w * dm / pv[None], axis=0)
    d_plv = np.sum(w * 0.5 * (exp_dlv + dm * dm / pv[None] - 1.0), axis=0)
    grads["mixture.means"] = d_mu
    grads["mixture.log_vars"] = d_plv * m.mixture.clamp_mask()

    for key in grads:
        grads[key] = grads[key] / n
    return report, grads


def _entropy_rows(ql: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(ql + _LOG_2PI + 1.0, axis=-1)


def elbo_base(m: ModelState, x, s, noise_z, qy=None) -> ObjectiveReport:
    """Single-sample base objective: recon - KL(q_y||p_y) - E_y KL(q_z||p_z)."""
    X, S = _prep(m, x, s)
    report, _ = _elbo_base(m, X, S, noise_z, qy, want_grads=False)
    return report


def elbo_base_grads(m: ModelState, x, s, noise_z, qy=None):
    X, S = _prep(m, x, s)
    return _elbo_base(m, X, S, noise_z, qy, want_grads=True)


# ---------------------------------------------------------------------
# Dual-encoder objective
# ---------------------------------------------------------------------

def _loss_dual(m: ModelState, X, S, noise_K, qy, want_grads,
               unified_extras=None):
    """Scenario-encoder terms: sum_y q_y [recon'_y - KL(q'_y || p_y)].

    When `unified_extras` is given (a grads dict), decoder and mixture
    gradients from the dual branch are accumulated into it as required
    by the unified objective; otherwise those blocks are frozen.
    """
    n = X.shape[0]
    k_total = m.n_actions
    noise_K = np.asarray(noise_K, dtype=np.float64).reshape(
        n, k_total, m.latent_dim)
    qy = _as_qy_matrix(qy, n, k_total)

    if m.dual_shared:
        feat, trunk_cache = m.dual_trunk.forward_cache(S)
    else:
        feat, trunk_cache = S, None

    mu = m.mixture.means
    plv = m.mixture.clamped_log_vars()
    pv = np.exp(plv)

    recon_k = np.empty((n, k_total))
    kl_k = np.empty((n, k_total))
    head_caches = []
    head_params = []
    for k, head in enumerate(m.dual_heads):
        raw, cache = head.forward_cache(feat)
        hm, hl, hmask = split_gaussian_raw(raw)
        sig = np.exp(0.5 * hl)
        Zk = hm + sig * noise_K[:, k, :]
        xhat_k, dec_cache = m.decoder.forward_cache(Zk)
        recon_k[:, k] = _recon_log_pdf(X, xhat_k)
        dlv = hl - plv[k]
        dmk = hm - mu[k]
        kl_k[:, k] = 0.5 * np.sum(
            np.exp(dlv) + dmk * dmk / pv[k] - 1.0 - dlv, axis=-1)
        head_caches.append((cache, dec_cache, xhat_k))
        head_params.append((hm, hl, hmask, sig))
    _require_finite(recon_k, "recon_x_prime")
    _require_finite(kl_k, "expected_kl_z_prime")

    recon_prime = np.sum(qy * recon_k, axis=-1)
    exp_kl_prime = np.sum(qy * kl_k, axis=-1)
    total = recon_prime - exp_kl_prime
    report = ObjectiveReport(
        total=float(total.mean()),
        recon_x=0.0,
        recon_x_prime=float(recon_prime.mean()),
        kl_y=0.0,
        expected_kl_z=0.0,
        expected_kl_z_prime=float(exp_kl_prime.mean()),
        qy_used=_mean_posterior(qy),
    )
    if not want_grads:
        return report, None

    grads: dict[str, np.ndarray] = {}
    d_feat = np.zeros_like(np.atleast_2d(feat), dtype=np.float64)
    for k, head in enumerate(m.dual_heads):
        cache, dec_cache, xhat_k = head_caches[k]
        hm, hl, hmask, sig = head_params[k]
        w = qy[:, k:k + 1]
        dec_grads, dZk = m.decoder.backward(dec_cache, w * (X - xhat_k))
        if unified_extras is not None:
            _accumulate(unified_extras, m.decoder.grads_to_dict("decoder", dec_grads))
            # Mixture side of -sum_y q_y KL(q'_y || p_y).
            dmk = hm - mu[k]
            exp_dlv = np.exp(hl - plv[k])
            unified_extras["mixture.means"][k] += np.sum(w * dmk / pv[k], axis=0)
            unified_extras["mixture.log_vars"][k] += (
                np.sum(w * 0.5 * (exp_dlv + dmk * dmk / pv[k] - 1.0), axis=0)
                * m.mixture.clamp_mask()[k]
            )
        d_hm = dZk - w * (hm - mu[k]) / pv[k]
        d_hl = dZk * 0.5 * sig * noise_K[:, k, :] \
            - w * 0.5 * (np.exp(hl - plv[k]) - 1.0)
        head_grads, d_feat_k = head.backward(
            cache, merge_gaussian_grad(d_hm, d_hl, hmask))
        grads.update(head.grads_to_dict(f"dual_head_{k}", head_grads))
        d_feat += np.atleast_2d(d_feat_k)
    if m.dual_shared:
        trunk_grads, _ = m.dual_trunk.backward(trunk_cache, d_feat)
        grads.update(m.dual_trunk.grads_to_dict("dual_trunk", trunk_grads))

    for key in grads:
        grads[key] = grads[key] / n
    return report, grads


def _accumulate(into: dict, more: dict):
    for key, val in more.items():
        if key in into:
            into[key] = into[key] + val
        else:
            into[key] = val


def loss_dual(m: ModelState, x, s, noise_per_k, qy=None) -> ObjectiveReport:
    """Dual-encoder objective with the base distributions frozen."""
    X, S = _prep(m, x, s)
    if qy is None:
        qy = m.qy_base_batch(X, S)
    report, _ = _loss_dual(m, X, S, noise_per_k, qy, want_grads=False)
    return report


def loss_dual_grads(m: ModelState, x, s, noise_per_k, qy=None):
    X, S = _prep(m, x, s)
    if qy is None:
        qy = m.qy_base_batch(X, S)
    return _loss_dual(m, X, S, noise_per_k, qy, want_grads=True)


# ---------------------------------------------------------------------
# Unified objective
# ---------------------------------------------------------------------

def _loss_unified(m: ModelState, X, S, noise_Z, noise_K, qy, want_grads):
    n = X.shape[0]
    if qy is None:
        qy = m.qy_unified_batch(X, S)
    qy = _as_qy_matrix(qy, n, m.n_actions)

    base_report, base_grads = _elbo_base(m, X, S, noise_Z, qy, want_grads)
    if want_grads:
        # Restore block sums for in-place accumulation from the dual branch.
        for key in base_grads:
            base_grads[key] = base_grads[key] * n
    dual_report, dual_grads = _loss_dual(
        m, X, S, noise_K, qy, want_grads,
        unified_extras=base_grads if want_grads else None)

    report = ObjectiveReport(
        total=base_report.total + dual_report.total,
        recon_x=base_report.recon_x,
        recon_x_prime=dual_report.recon_x_prime,
        kl_y=base_report.kl_y,
        expected_kl_z=base_report.expected_kl_z,
        expected_kl_z_prime=dual_report.expected_kl_z_prime,
        qy_used=_mean_posterior(qy),
    )
    if not want_grads:
        return report, None
    grads = dict(dual_grads)
    for key, val in base_grads.items():
        grads[key] = val / n
    return report, grads


def loss_unified(m: ModelState, x, s, noise_z, noise_per_k,
                 qy=None) -> ObjectiveReport:
    """Joint objective: base terms plus the scenario-encoder branch."""
    X, S = _prep(m, x, s)
    report, _ = _loss_unified(m, X, S, noise_z, noise_per_k, qy,
                              want_grads=False)
    return report


def loss_unified_grads(m: ModelState, x, s, noise_z, noise_per_k, qy=None):
    X, S = _prep(m, x, s)
    return _loss_unified(m, X, S, noise_z, noise_per_k, qy, want_grads=True)

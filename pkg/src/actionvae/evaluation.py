"""Post-training analysis: per-scenario action predictions, effective-action
counting, clustering agreement against hidden generator labels, displacement
metrics, held-out objective evaluation, and CSV/SVG export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from .errors import ContractViolation
from .gaussmath import DiagGaussian, sigma_points
from .model import ModelState
from .neuralnet import split_gaussian_raw
from .objectives import elbo_base, loss_dual, loss_unified
from .synthdata import Dataset, TrainingView

DEFAULT_THRESHOLD = 0.05


@dataclass
class ActionPrediction:
    action: int
    probability: float
    mean_trajectory: np.ndarray           # (T, 2)
    sigma_trajectories: list[np.ndarray]  # 2D+1 entries of (T, 2)
    source: str                           # "prior-conditioned" etc.


@dataclass
class Prediction:
    actions: list[ActionPrediction]
    mode: str
    threshold: float


def _as_trajectory(flat: np.ndarray) -> np.ndarray:
    return flat.reshape(-1, 2)


def _check_model_finite(m: ModelState, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise ContractViolation("model produced non-finite outputs; "
                                "is it trained?")


def predict(m: ModelState, s: np.ndarray, mode: str = "posterior",
            threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    """Decode sigma-point trajectory fans for every likely action."""
    if mode not in ("prior", "posterior"):
        raise ContractViolation(f"unknown predict mode {mode!r}")
    if not 0.0 <= threshold < 1.0:
        raise ContractViolation("threshold must be in [0, 1)")
    probs = m.prior_y(s).probs
    _check_model_finite(m, probs)
    out = []
    for k in range(m.n_actions):
        if probs[k] <= threshold:
            continue
        if mode == "prior":
            dist = m.mixture_component(k)
        else:
            dist = m.dual_encode(s, k)
        fans = []
        for point in sigma_points(dist):
            traj = _as_trajectory(m.decode_z(point.coords))
            _check_model_finite(m, traj)
            fans.append(traj)
        out.append(ActionPrediction(
            action=k, probability=float(probs[k]),
            mean_trajectory=fans[0], sigma_trajectories=fans,
            source=f"{mode}-conditioned"))
    return Prediction(actions=out, mode=mode, threshold=threshold)


def effective_actions(m: ModelState, data: TrainingView,
                      threshold: float = DEFAULT_THRESHOLD) -> set[int]:
    """Actions assigned probability above threshold for any scenario."""
    logits, _ = m.classifier.forward_cache(data.s)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return set(int(k) for k in np.flatnonzero(
        np.any(probs > threshold, axis=0)))


def _assignments(m: ModelState, view: TrainingView,
                 qy_mode: str) -> np.ndarray:
    if qy_mode == "unified":
        qy = m.qy_unified_batch(view.x, view.s)
    else:
        qy = m.qy_base_batch(view.x, view.s)
    return np.argmax(qy, axis=1)


def cluster_agreement(m: ModelState, dataset: Dataset,
                      qy_mode: str = "base") -> dict:
    """NMI and purity of argmax posterior assignments vs hidden labels."""
    labels = dataset.labels()
    assign = _assignments(m, dataset.training_view(), qy_mode)
    used = np.unique(assign)
    degenerate = len(used) == 1
    nmi = 0.0 if degenerate else float(
        normalized_mutual_info_score(labels, assign))
    correct = 0
    for k in used:
        member = labels[assign == k]
        correct += int(np.bincount(member).max())
    return {"nmi": nmi, "purity": correct / len(labels),
            "degenerate": degenerate}


def min_ade(m: ModelState, dataset: Dataset, mode: str = "posterior",
            top_m: int = 3) -> float:
    """Mean over samples of the best mean-trajectory displacement among
    the top_m most probable actions."""
    if top_m > m.n_actions:
        raise ContractViolation(
            f"top_m {top_m} exceeds n_actions {m.n_actions}")
    if top_m < 1:
        raise ContractViolation("top_m must be >= 1")
    view = dataset.training_view()
    n = len(view)
    logits, _ = m.classifier.forward_cache(view.s)
    top = np.argsort(-logits, axis=1)[:, :top_m]  # (N, top_m)
    if mode == "prior":
        # One decoded mean per action, shared across scenarios.
        decoded = np.array([
            _as_trajectory(m.decode_z(m.mixture.means[k]))
            for k in range(m.n_actions)])
        cand = decoded[top]  # (N, top_m, T, 2)
    elif mode == "posterior":
        means, _ = m._dual_params_batch(view.s)  # (N, K, D)
        sel = np.take_along_axis(means, top[:, :, None], axis=1)
        flat, _ = m.decoder.forward_cache(sel.reshape(n * top_m, -1))
        cand = flat.reshape(n, top_m, -1, 2)
    else:
        raise ContractViolation(f"unknown min_ade mode {mode!r}")
    truth = view.x.reshape(n, 1, -1, 2)
    dists = np.hypot(*(cand - truth).transpose(3, 0, 1, 2))
    return float(np.mean(np.min(np.mean(dists, axis=2), axis=1)))


def mean_fan_spread(m: ModelState, data: TrainingView,
                    mode: str = "posterior",
                    threshold: float = DEFAULT_THRESHOLD) -> float:
    """Scenario-averaged mean pairwise spread of sigma-point fans."""
    spreads = []
    for s in data.s:
        pred = predict(m, s, mode=mode, threshold=threshold)
        for act in pred.actions:
            fans = np.array(act.sigma_trajectories)  # (P, T, 2)
            diffs = fans[:, None] - fans[None, :]
            pair = np.mean(np.hypot(diffs[..., 0], diffs[..., 1]),
                           axis=2)
            upper = pair[np.triu_indices(len(fans), k=1)]
            spreads.append(float(np.mean(upper)))
    return float(np.mean(spreads))


def holdout_elbo(m: ModelState, data: TrainingView, n_noise: int = 8,
                 objective: str = "base", seed: int = 0) -> float:
    """Dataset-mean objective, averaged over n_noise noise draws."""
    rng = np.random.default_rng([seed, 97])
    n, k, d = len(data), m.n_actions, m.mixture.dim
    totals = []
    for _ in range(n_noise):
        if objective == "base":
            qy = m.qy_base_batch(data.x, data.s)
            rep = elbo_base(m, data.x, data.s,
                            rng.standard_normal((n, d)), qy=qy)
        elif objective == "dual":
            qy = m.qy_base_batch(data.x, data.s)
            rep = loss_dual(m, data.x, data.s,
                            rng.standard_normal((n, k, d)), qy=qy)
        elif objective == "unified":
            qy = m.qy_unified_batch(data.x, data.s)
            rep = loss_unified(m, data.x, data.s,
                               rng.standard_normal((n, d)),
                               rng.standard_normal((n, k, d)), qy=qy)
        else:
            raise ContractViolation(f"unknown objective {objective!r}")
        totals.append(rep.total)
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# Export: CSV of sigma-point fans plus a deterministic SVG rendering.
# ---------------------------------------------------------------------------

def export_csv(prediction: Prediction, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["action", "sigma_index", "t", "x", "y",
                             "probability"])
            for act in prediction.actions:
                for si, traj in enumerate(act.sigma_trajectories):
                    for t, (x, y) in enumerate(traj):
                        writer.writerow([act.action, si, t, repr(float(x)),
                                         repr(float(y)),
                                         repr(act.probability)])
    except OSError as exc:
        raise OSError(f"failed to write CSV {path}: {exc}") from exc


def export_svg(prediction: Prediction, path,
               ground_truth: np.ndarray | None = None) -> None:
    import matplotlib
    matplotlib.use("svg", force=False)
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "actionvae"
    cmap = plt.get_cmap("tab20")
    fig, ax = plt.subplots(figsize=(6, 6))
    for act in prediction.actions:
        hue = cmap(act.action % 20)
        for traj in act.sigma_trajectories[1:]:
            ax.plot(traj[:, 0], traj[:, 1], color=hue, linewidth=0.8,
                    alpha=0.7)
        mean = act.mean_trajectory
        ax.plot(mean[:, 0], mean[:, 1], color="black", linewidth=1.4,
                label=f"action {act.action} "
                      f"(p={act.probability:.2f})")
    if ground_truth is not None:
        gt = np.asarray(ground_truth)
        ax.plot(gt[:, 0], gt[:, 1], color="red", linestyle="--",
                linewidth=1.2, label="ground truth")
    ax.set_xlabel("x east (m)")
    ax.set_ylabel("y north (m)")
    ax.set_aspect("equal")
    if prediction.actions or ground_truth is not None:
        ax.legend(fontsize=7, loc="upper right")
    ax.set_title(f"{prediction.mode}-conditioned actions "
                 f"(threshold {prediction.threshold})")
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"failed to write SVG {path}: {exc}") from exc
    finally:
        plt.close(fig)


def export_plots(prediction: Prediction, csv_path, svg_path,
                 ground_truth: np.ndarray | None = None) -> None:
    export_csv(prediction, csv_path)
    export_svg(prediction, svg_path, ground_truth=ground_truth)

"""Risk allocation, closed-loop covariance propagation, constraint back-offs.

Individual chance constraints are enforced by tightening each linearized
face row by eta = z_eps * sqrt(g' Sigma g), where z_eps is the standard
normal quantile at 1 - eps and Sigma the predicted closed-loop state
covariance at that node.  Splitting a joint risk level over faces uses the
union bound, which is conservative: eps_face = (1 - alpha) / n_faces.
"""

from dataclasses import dataclass, field

import numpy as np

from .constraints import contact_face_normals, contact_face_residuals
from .numerics import std_normal_quantile


@dataclass(frozen=True)
class DisturbanceSpec:
    """Additive white process noise entering through selected channels.

    covariance is the noise covariance (diagonal vector or full matrix) in
    state coordinates; selector is the 0/1 channel gate (diagonal vector or
    matrix).  The effective per-step state covariance is C Sigma_w C'.
    """

    covariance: np.ndarray
    selector: np.ndarray | None = None

    def state_covariance(self, n):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (n, n):
            raise ValueError(
                f"disturbance covariance must be ({n},{n}) or a length-{n} "
                f"diagonal, got {cov.shape}"
            )
        if self.selector is None:
            return cov
        sel = np.asarray(self.selector, dtype=np.float64)
        if sel.ndim == 1:
            sel = np.diag(sel)
        return sel @ cov @ sel.T


@dataclass(frozen=True)
class RiskSpec:
    """Per-face violation probability for the tightened constraints."""

    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(
                f"per-face risk must lie in (0, 0.5), got {self.epsilon}"
            )

    @classmethod
    def from_joint(cls, alpha, n_faces=4):
        """Derive the per-face level from a joint satisfaction level."""
        return cls(allocate_risk(alpha, n_faces))


@dataclass
class CovarianceSchedule:
    """Predicted state covariances along a horizon, node 0 first."""

    sigmas: list

    def __len__(self):
        return len(self.sigmas)

    def __getitem__(self, k):
        return self.sigmas[k]


@dataclass
class BackoffSchedule:
    """Constraint tightenings eta[node, foot, face] >= 0 (meters)."""

    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64)

    @classmethod
    def zeros(cls, n_nodes, n_legs, n_faces=4):
        return cls(np.zeros((n_nodes, n_legs, n_faces)))


def compute_backoff_schedule(cov_schedule, face_rows, risk, n_legs=4, n_faces=4):
    """Assemble a BackoffSchedule from covariance and face-row data.

    face_rows maps (node, leg) to the stacked linearized face rows of that
    stance foot; entries absent from the map (swing feet) get zero back-off.
    """
    n_nodes = len(cov_schedule)
    eta = np.zeros((n_nodes, n_legs, n_faces))
    for (node, leg), G in face_rows.items():
        eta[node, leg] = compute_backoffs(G, cov_schedule[node], risk.epsilon)
    return BackoffSchedule(eta)


def allocate_risk(joint_level, n_faces):
    """Equal union-bound split of a joint satisfaction level over faces."""
    if not 0.0 < joint_level < 1.0:
        raise ValueError(f"joint level must lie in (0,1), got {joint_level}")
    if n_faces < 1:
        raise ValueError("need at least one face")
    return (1.0 - joint_level) / n_faces


def propagate_covariance(A_seq, B_seq, K_seq, noise_cov, sigma0=None):
    """Closed-loop covariance recursion along a horizon.

    Sigma_{k+1} = (A_k + B_k K_k) Sigma_k (A_k + B_k K_k)' + noise_cov,
    starting from Sigma_0 = 0 (the current state is measured).  Returns a
    list of len(A_seq) + 1 symmetric matrices.
    """
    n = np.atleast_2d(np.asarray(A_seq[0])).shape[0]
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=np.float64))
    sigma = (
        np.zeros((n, n))
        if sigma0 is None
        else np.atleast_2d(np.asarray(sigma0, dtype=np.float64)).copy()
    )
    out = [sigma.copy()]
    for A, B, K in zip(A_seq, B_seq, K_seq):
        A_cl = np.atleast_2d(A) + np.atleast_2d(B) @ np.atleast_2d(K)
        sigma = A_cl @ sigma @ A_cl.T + noise_cov
        sigma = 0.5 * (sigma + sigma.T)
        out.append(sigma)
    return out


def compute_backoff(g_row, sigma, eps):
    """Tightening for one face row: quantile(1-eps) * sqrt(g Sigma g')."""
    g = np.asarray(g_row, dtype=np.float64)
    var = float(g @ np.atleast_2d(sigma) @ g)
    var = max(var, 0.0)
    return std_normal_quantile(1.0 - eps) * np.sqrt(var)


def compute_backoffs(G, sigma, eps):
    """Vector of tightenings for stacked face rows (shared risk level)."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    sigma = np.atleast_2d(sigma)
    var = np.maximum(np.einsum("ij,jk,ik->i", G, sigma, G), 0.0)
    return std_normal_quantile(1.0 - eps) * np.sqrt(var)


@dataclass(frozen=True)
class LinearizedFaces:
    """Linearized face rows of one stance foot at one node.

    value + G dx <= 0 reproduces the nonlinear residual to first order;
    offset = G x - value satisfies G x - offset = value at the
    linearization point exactly.
    """

    G: np.ndarray
    value: np.ndarray
    offset: np.ndarray


def linearize_contact_faces(kin, leg, surface, x):
    """Face rows of a stance foot in full state coordinates (4 x 45)."""
    x = np.asarray(x, dtype=np.float64)
    value = contact_face_residuals(surface, kin.foot_pos[leg])
    normals = contact_face_normals(surface)
    G = np.zeros((4, 45))
    G[:, 9:27] = normals @ kin.foot_jac[leg][0:2]
    return LinearizedFaces(G=G, value=value, offset=G @ x - value)

"""Weighted stacks of mixture states, shared by the MCMC and SMC stages."""

from dataclasses import dataclass, field

import numpy as np

from .model import MixtureState


@dataclass
class ParticleSet:
    """M mixture states with log weights and a seed for derived RNG streams.

    Parameter arrays carry the particle index first: v (M, J), psi_mu and
    psi_tau (M, J, p), psi_rho (M, J, q-p), beta (M, J, q+1, d),
    sigma (M, J, d, d), y (M, n, d). Weights are unnormalized log values;
    dead particles sit at -inf. The likelihood caches are derived data and
    never serialized.
    """

    v: np.ndarray
    psi_mu: np.ndarray
    psi_tau: np.ndarray
    psi_rho: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    log_weights: np.ndarray
    seed: int
    rejuv_round: int = 0
    lse_a: np.ndarray = field(default=None, repr=False)
    lse_ab: np.ndarray = field(default=None, repr=False)
    log_remain: np.ndarray = field(default=None, repr=False)

    @property
    def M(self):
        return self.v.shape[0]

    @property
    def J(self):
        return self.v.shape[1]

    @property
    def n(self):
        return self.y.shape[1]

    @property
    def d(self):
        return self.y.shape[2]

    @property
    def p(self):
        return self.psi_mu.shape[2]

    def get_state(self, m):
        """Detached copy of particle m."""
        return MixtureState(
            self.v[m].copy(), self.psi_mu[m].copy(), self.psi_tau[m].copy(),
            self.psi_rho[m].copy(), self.beta[m].copy(), self.sigma[m].copy(),
            self.y[m].copy(),
        )

    def set_state(self, m, state):
        self.v[m] = state.v
        self.psi_mu[m] = state.psi_mu
        self.psi_tau[m] = state.psi_tau
        self.psi_rho[m] = state.psi_rho
        self.beta[m] = state.beta
        self.sigma[m] = state.sigma
        self.y[m] = state.y

    def normalized_log_weights(self):
        lw = self.log_weights
        finite = np.isfinite(lw)
        if not finite.any():
            raise ValueError("all particles are dead")
        m = np.max(lw[finite])
        shifted = lw - m
        with np.errstate(divide="ignore"):
            total = np.log(np.sum(np.exp(shifted[finite])))
        return shifted - total

    def weights(self):
        out = np.exp(self.normalized_log_weights())
        return np.where(np.isfinite(self.log_weights), out, 0.0)

    def reindex(self, idx):
        """Select/duplicate particles in place (resampling support)."""
        for name in ("v", "psi_mu", "psi_tau", "psi_rho", "beta", "sigma", "y"):
            setattr(self, name, getattr(self, name)[idx].copy())
        self.log_weights = np.zeros(len(idx))
        for name in ("lse_a", "lse_ab", "log_remain"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(self, name, arr[idx].copy())

    def invalidate_caches(self):
        self.lse_a = None
        self.lse_ab = None
        self.log_remain = None

    @classmethod
    def allocate(cls, M, J, p, q_minus_p, q1, d, n, seed):
        return cls(
            v=np.empty((M, J)),
            psi_mu=np.empty((M, J, p)),
            psi_tau=np.empty((M, J, p)),
            psi_rho=np.empty((M, J, q_minus_p)),
            beta=np.empty((M, J, q1, d)),
            sigma=np.empty((M, J, d, d)),
            y=np.empty((M, n, d)),
            log_weights=np.zeros(M),
            seed=int(seed),
        )

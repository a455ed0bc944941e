"""Model parameter container and on-disk model format.

Parameters live in whitened coordinates: the emission matrix C is stored
against observations W(e_i - mu) with W = diag(mu^{-1/2}), the state noise
is fixed to the identity, and the observation noise is represented
implicitly as D = I - mu_sqrt mu_sqrt^T - C @ D_core @ C^T.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_MODEL_MAGIC = b"TLDSMDL1"
_MODEL_VERSION = 1
# Whitener exponent convention flag: 1 means W = diag(mu^-1/2).
_W_CONVENTION = 1


def spectral_radius(A):
    return float(np.abs(np.linalg.eigvals(A)).max()) if A.size else 0.0


def stabilize_transition(A, margin=1e-6):
    """Rescale A so its spectral radius stays strictly below 1."""
    rho = spectral_radius(A)
    if rho >= 1.0 - margin:
        return A * ((1.0 - margin) / rho)
    return A


def project_off(C, u):
    """Remove the component of each column of C along the unit vector u."""
    return C - np.outer(u, u @ C)


@dataclass
class LdsParams:
    """Gaussian LDS parameters over whitened one-hot text observations.

    Attributes
    ----------
    A : (h, h) transition matrix, spectral radius < 1.
    C : (V, h) emission matrix in whitened coordinates, columns
        orthogonal to mu_sqrt.
    D_core : (h', h') symmetric core with
        D = I - mu_sqrt mu_sqrt^T - C @ D_core @ C^T.
    mu : (V,) word frequencies (sum to 1, strictly positive).
    """

    A: np.ndarray
    C: np.ndarray
    D_core: np.ndarray
    mu: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        self.D_core = np.asarray(self.D_core, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)

    @property
    def h(self):
        return self.A.shape[0]

    @property
    def V(self):
        return self.C.shape[0]

    @property
    def mu_sqrt(self):
        return np.sqrt(self.mu)

    @property
    def whitener(self):
        """Diagonal of W = diag(mu^{-1/2})."""
        return 1.0 / np.sqrt(self.mu)

    def emission_unwhitened(self):
        """Emission matrix against raw centered observations (e_i - mu)."""
        return self.mu_sqrt[:, None] * self.C

    def emission_gram(self):
        """Phi = C^T C, the h x h Gram matrix shared by the solvers."""
        return self.C.T @ self.C

    def noise_spectrum_on_subspace(self):
        """Eigenvalues of D restricted to the complement of mu_sqrt.

        The restriction acts as identity off col(C); the informative part
        is 1 - eig(C D_core C^T), computed via an h x h symmetric problem.
        """
        phi = self.emission_gram()
        vals, vecs = np.linalg.eigh(phi)
        vals = np.clip(vals, 0.0, None)
        L = vecs * np.sqrt(vals)[None, :]
        inner = L.T @ self.D_core @ L
        return 1.0 - np.linalg.eigvalsh(inner)

    def whitened_observation(self, token_id):
        """W (e_i - mu) as a dense vector (oracle/test use)."""
        out = -self.mu_sqrt.copy()
        out[token_id] += self.whitener[token_id]
        return out

    def validate(self, strict=True):
        """Check the structural invariants; raise on violation if strict."""
        problems = []
        rho = spectral_radius(self.A)
        if rho >= 1.0:
            problems.append(f"transition is unstable (spectral radius {rho:.6f})")
        cnorm = np.linalg.norm(self.C)
        leak = np.linalg.norm(self.mu_sqrt @ self.C)
        if cnorm > 0 and leak > 1e-8 * cnorm:
            problems.append(
                f"emission columns not orthogonal to mu_sqrt (leak {leak:.2e})"
            )
        if abs(self.mu.sum() - 1.0) > 1e-8 or (self.mu <= 0).any():
            problems.append("mu must be strictly positive and sum to 1")
        dmin = self.noise_spectrum_on_subspace().min() if self.h else 1.0
        if dmin < -1e-8:
            problems.append(
                f"noise covariance not PSD on the data subspace (min eig {dmin:.2e})"
            )
        if problems and strict:
            raise ValueError("; ".join(problems))
        return problems


def save_model(params, path):
    """Write the binary model file (all little-endian, float64 matrices)."""
    meta = params.meta
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(
            struct.pack(
                "<IQQB",
                _MODEL_VERSION,
                params.V,
                params.h,
                _W_CONVENTION,
            )
        )
        f.write(
            struct.pack(
                "<IQ32s",
                int(meta.get("r", 0)),
                int(meta.get("seed", 0)),
                bytes.fromhex(meta.get("corpus_hash", "00" * 32)),
            )
        )
        for arr in (params.mu, params.A, params.C, params.D_core):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MODEL_MAGIC:
            raise ValueError(f"not a model file: bad magic {magic!r}")
        version, V, h, w_flag = struct.unpack("<IQQB", f.read(21))
        if version != _MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        if w_flag != _W_CONVENTION:
            raise ValueError(f"unknown whitener convention flag {w_flag}")
        r, seed, chash = struct.unpack("<IQ32s", f.read(44))
        mu = np.frombuffer(f.read(8 * V), dtype="<f8").copy()
        A = np.frombuffer(f.read(8 * h * h), dtype="<f8").reshape(h, h).copy()
        C = np.frombuffer(f.read(8 * V * h), dtype="<f8").reshape(V, h).copy()
        D_core = np.frombuffer(f.read(8 * h * h), dtype="<f8").reshape(h, h).copy()
    return LdsParams(
        A=A,
        C=C,
        D_core=D_core,
        mu=mu,
        meta={"r": r, "seed": seed, "corpus_hash": chash.hex()},
    )

"""Product quantisation of bottleneck vectors.

A vector of dimension ``D`` is cut into ``M`` contiguous sub-vectors and each
one is replaced by the index of its nearest centroid in a per-subspace
codebook. With ``M = 32`` and 8-bit indices a code is exactly 256 bits.

Distances are asymmetric: the query stays continuous and is compared against
the reconstruction of a stored code, which is the same number as the exact L2
distance to that reconstruction.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector
from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyInput,
    TruncatedPayload,
    UnsupportedVersion,
)

INDEX_BITS = 8
MAX_CENTROIDS = 1 << INDEX_BITS

_MAGIC = b"ARCQ"
_VERSION = 1
_HEADER = struct.Struct("<4sHHHHH")  # magic, version, M, K, D, index bits


def _sq_dists(X, C, chunk=4096):
    """Exact squared distances ``(n, k)`` without the expansion trick."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        diff = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plusplus(X, k, rng):
    """k-means++ seeding: first centre uniform, the rest with D^2 weighting.

    When every remaining point coincides with a chosen centre the first row
    is reused, so identical data yields ``k`` copies of one centroid.
    """
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx.append(idx[0])
            continue
        r = rng.random() * total
        j = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        j = min(j, n - 1)
        idx.append(j)
        d2 = np.minimum(d2, _sq_dists(X, X[j:j + 1])[:, 0])
    return X[idx].copy()


def kmeans(X, k, rng=None, *, max_iter=100, tol=1e-6, init=None):
    """Lloyd iterations from k-means++ (or ``init``) seeds.

    Assignment ties go to the lower centroid index and an empty cluster keeps
    its previous centroid. Stops when the summed squared centroid movement is
    at most ``tol``. Returns ``(centroids, labels, n_iter)``.
    """
    X = np.asarray(X, dtype=float)
    if init is None:
        rng = np.random.default_rng(rng)
        C = kmeans_plusplus(X, k, rng)
    else:
        C = np.array(init, dtype=float)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    it = 0
    for it in range(1, max_iter + 1):
        new = C.copy()
        counts = np.bincount(labels, minlength=len(C))
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        shift = float(np.sum((new - C) ** 2))
        C = new
        labels = np.argmin(_sq_dists(X, C), axis=1)
        if shift <= tol:
            break
    return C, labels, it


class ProductQuantizer(TransformerMixin, BaseEstimator):
    """Per-subspace k-means codebooks with 8-bit indices.

    ``transform`` encodes to ``(n, M)`` uint8 codes and ``inverse_transform``
    reconstructs. If fewer than ``n_centroids`` training vectors are given the
    codebook is shrunk to the vector count; codes keep their 8-bit width.
    """

    def __init__(self, n_subspaces=32, n_centroids=256, max_iter=100, tol=1e-6, random_state=0):
        self.n_subspaces = n_subspaces
        self.n_centroids = n_centroids
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.size == 0:
            raise EmptyInput("product quantiser needs at least one training vector")
        X = check_matrix(X)
        n, D = X.shape
        M = self.n_subspaces
        if not 1 <= self.n_centroids <= MAX_CENTROIDS:
            raise ValueError(f"n_centroids must be in [1, {MAX_CENTROIDS}]")
        if M < 1 or D % M:
            raise DimensionMismatch(f"dimension {D} is not divisible into {M} subspaces")
        k = min(self.n_centroids, n)
        d = D // M
        seeds = np.random.SeedSequence(self.random_state).spawn(M)
        books = np.empty((M, k, d))
        for m in range(M):
            sub = X[:, m * d:(m + 1) * d]
            books[m], _, _ = kmeans(sub, k, np.random.default_rng(seeds[m]), max_iter=self.max_iter, tol=self.tol)
        self.codebooks_ = books
        self.n_features_in_ = D
        self.n_centroids_ = k
        return self

    @property
    def subdim_(self):
        return self.codebooks_.shape[2]

    @property
    def code_bits(self):
        return self.n_subspaces * INDEX_BITS

    def _codes(self, codes):
        codes = np.asarray(codes)
        if codes.ndim == 1:
            codes = codes[None]
        if codes.ndim != 2 or codes.shape[1] != self.codebooks_.shape[0]:
            raise DimensionMismatch(f"codes must have {self.codebooks_.shape[0]} entries, got shape {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_centroids_):
            raise ValueError("code index outside the codebook")
        return codes.astype(np.intp)

    def transform(self, X):
        check_is_fitted(self, "codebooks_")
        X = check_matrix(X, n_features=self.n_features_in_)
        d = self.subdim_
        codes = np.empty((X.shape[0], self.codebooks_.shape[0]), dtype=np.uint8)
        for m, book in enumerate(self.codebooks_):
            codes[:, m] = np.argmin(_sq_dists(X[:, m * d:(m + 1) * d], book), axis=1)
        return codes

    def inverse_transform(self, codes):
        check_is_fitted(self, "codebooks_")
        codes = self._codes(codes)
        M = self.codebooks_.shape[0]
        parts = [self.codebooks_[m][codes[:, m]] for m in range(M)]
        return np.concatenate(parts, axis=1)

    def asym_dist(self, Z, codes):
        """Row-wise distance between continuous ``Z`` and stored ``codes``."""
        check_is_fitted(self, "codebooks_")
        Z = check_matrix(Z, n_features=self.n_features_in_)
        codes = self._codes(codes)
        if len(codes) != len(Z):
            raise DimensionMismatch(f"{len(Z)} queries but {len(codes)} codes")
        d = self.subdim_
        total = np.zeros(len(Z))
        for m, book in enumerate(self.codebooks_):
            diff = Z[:, m * d:(m + 1) * d] - book[codes[:, m]]
            total += np.einsum("nd,nd->n", diff, diff)
        return np.sqrt(total)

    def distortion(self, X):
        """Mean squared reconstruction error over ``X``."""
        X = check_matrix(X, n_features=self.n_features_in_)
        return float(np.mean(np.sum((X - self.inverse_transform(self.transform(X))) ** 2, axis=1)))

    # serialisation

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "codebooks_")
        M, k, _ = self.codebooks_.shape
        head = _HEADER.pack(_MAGIC, _VERSION, M, k, self.n_features_in_, INDEX_BITS)
        return head + self.codebooks_.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> ProductQuantizer:
        if len(data) < _HEADER.size:
            raise TruncatedPayload("codebook header is truncated")
        magic, version, M, k, D, bits = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise BadMagic(f"expected {_MAGIC!r}, got {magic!r}")
        if version != _VERSION or bits != INDEX_BITS:
            raise UnsupportedVersion(f"codebook version {version} with {bits}-bit indices")
        if M == 0 or D % M:
            raise DimensionMismatch(f"dimension {D} is not divisible into {M} subspaces")
        need = _HEADER.size + M * k * (D // M) * 8
        if len(data) != need:
            raise TruncatedPayload(f"codebook needs {need} bytes, got {len(data)}")
        pq = cls(n_subspaces=M, n_centroids=max(k, 1))
        pq.codebooks_ = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(M, k, D // M).astype(float)
        pq.n_features_in_ = D
        pq.n_centroids_ = k
        return pq

    def sha256(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


def train_pq(vectors, M_sub=32, K_cent=256, seed=0) -> ProductQuantizer:
    return ProductQuantizer(n_subspaces=M_sub, n_centroids=K_cent, random_state=seed).fit(vectors)


def pq_encode(codebook: ProductQuantizer, z) -> bytes:
    """Code for one vector: one byte per subspace."""
    z = check_vector(z, size=codebook.n_features_in_, name="z")
    return codebook.transform(z[None])[0].tobytes()


def pq_decode(codebook: ProductQuantizer, code) -> np.ndarray:
    return codebook.inverse_transform(_as_code(code))[0]


def pq_asym_dist(codebook: ProductQuantizer, z_query, code) -> float:
    z = check_vector(z_query, size=codebook.n_features_in_, name="z_query")
    return float(codebook.asym_dist(z[None], _as_code(code))[0])


def _as_code(code):
    if isinstance(code, (bytes, bytearray, memoryview)):
        return np.frombuffer(bytes(code), dtype=np.uint8)[None]
    return np.asarray(code)


def save_codebook(codebook: ProductQuantizer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook.to_bytes())


def load_codebook(path) -> ProductQuantizer:
    with open(path, "rb") as fh:
        return ProductQuantizer.from_bytes(fh.read())

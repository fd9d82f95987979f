"""Sequence autoencoder producing per-block bottleneck hashes.

An LSTM encoder maps a block of ``N`` feature rows to its last hidden state,
and a linear head maps that to the bottleneck ``z``. Two LSTM decoders fed
``z`` at every step reconstruct the block and predict the next block of the
same clip. Training minimises, per block, the sum of the reconstruction
loss, the prediction loss (absent for a clip's final block) and a cosine
triplet hinge, using SGD with momentum, learning-rate halving and early
stopping on held-out transcodes.
"""

from __future__ import annotations

import hashlib
import io
import struct
import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._lstm import (
    lstm_backward,
    lstm_forward,
    lstm_forward_const,
    lstm_last_hidden_backward,
)
from .errors import (
    BadMagic,
    EmptyPositives,
    InsufficientDataWarning,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedVersion,
    ZeroVector,
)

BLOCK_FRAMES = 300

PARAM_NAMES = (
    "enc_W", "enc_b", "z_W", "z_b",
    "rec_W", "rec_b", "rec_out_W", "rec_out_b",
    "pred_W", "pred_b", "pred_out_W", "pred_out_b",
)
ARCM_MAGIC = b"ARCM"
ARCM_VERSION = 1
FLAG_NO_TRIPLET = 1


# ---------------------------------------------------------------- blocks

def n_blocks(n_rows: int, n: int = BLOCK_FRAMES) -> int:
    return max(1, -(-n_rows // n))


def segment_blocks(rows: np.ndarray, pad_row: np.ndarray, n: int = BLOCK_FRAMES) -> np.ndarray:
    """Cut ``(T, S)`` rows into ``(B, n, S)`` blocks, padding the last with ``pad_row``."""
    rows = np.asarray(rows, dtype=float)
    b = n_blocks(rows.shape[0], n)
    out = np.empty((b * n, rows.shape[1]))
    out[: rows.shape[0]] = rows
    out[rows.shape[0]:] = pad_row
    return out.reshape(b, n, rows.shape[1])


# ---------------------------------------------------------------- losses

def _check_same(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def loss_reconstruction(E, E_hat) -> float:
    E, E_hat = _check_same(E, E_hat)
    return 0.5 * float(np.sum((E - E_hat) ** 2))


def loss_prediction(E_next, E_next_hat, last: bool = False) -> float:
    """Half squared error to the next block; zero for a clip's final block."""
    E_next, E_next_hat = _check_same(E_next, E_next_hat)
    if last:
        return 0.0
    return 0.5 * float(np.sum((E_next - E_next_hat) ** 2))


def cosine_similarity(u, v):
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u, axis=-1), np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise ZeroVector("cosine similarity of a zero vector")
    return np.sum(u * v, axis=-1) / (nu * nv)


def loss_triplet(z_a, z_p, z_n, m: float = 0.2) -> float:
    """Mean of ``max(0, cos(a, n) - cos(a, p) + m)`` over the given triplets."""
    z_a, z_p = _check_same(z_a, z_p)
    z_a, z_n = _check_same(z_a, z_n)
    terms = np.maximum(0.0, cosine_similarity(z_a, z_n) - cosine_similarity(z_a, z_p) + m)
    return float(np.mean(terms))


def _cos_grad(u, v, nu, nv, cos):
    """d cos(u, v) / du for row-wise vectors."""
    return v / (nu * nv)[:, None] - cos[:, None] * u / (nu * nu)[:, None]


# ------------------------------------------------------------- parameters

def init_params(n_features, hidden_encoder, bottleneck, hidden_decoder, rng, max_timescale=BLOCK_FRAMES,
                input_gain=1.0):
    """Uniform weights with chrono gate biases.

    Forget biases are ``log(u)`` with ``u ~ U(1, max_timescale - 1)`` and input
    biases their negation, so units start with memory spans spread up to
    ``max_timescale`` steps and behave like running averages of their input.
    Input and forget gate weights start at zero so large inputs cannot wipe
    that memory before training has shaped it. ``input_gain`` scales the
    encoder input weights; a small gain keeps the cells near their linear
    regime, where the running average survives training intact.
    """
    def lstm(n_in, h, gain=1.0):
        k = 1.0 / np.sqrt(h)
        W = rng.uniform(-k, k, size=(n_in + h, 4 * h))
        W[:, : 2 * h] = 0.0
        W[:n_in] *= gain
        b = np.zeros(4 * h)
        span = np.log(rng.uniform(1.0, max(max_timescale - 1.0, 1.0 + 1e-9), size=h))
        b[h:2 * h] = span
        b[:h] = -span
        return W, b

    def linear(n_in, n_out):
        k = 1.0 / np.sqrt(n_in)
        return rng.uniform(-k, k, size=(n_in, n_out)), np.zeros(n_out)

    p = {}
    p["enc_W"], p["enc_b"] = lstm(n_features, hidden_encoder, input_gain)
    p["z_W"], p["z_b"] = linear(hidden_encoder, bottleneck)
    for dec in ("rec", "pred"):
        p[f"{dec}_W"], p[f"{dec}_b"] = lstm(bottleneck, hidden_decoder)
        p[f"{dec}_out_W"], p[f"{dec}_out_b"] = linear(hidden_decoder, n_features)
    return p


def unit_spread(params, E):
    """Rescale ``z`` over ``E`` to unit RMS spread without changing the model.

    The bottleneck layer is divided by the spread and the decoder input
    weights multiplied by it, so reconstructions are unchanged while
    distances in ``z`` live on a scale suited to fixed-point thresholds.
    """
    z = encode(params, E)
    spread = float(np.sqrt(np.mean(np.var(z, axis=0))))
    if not spread > 0:
        return params
    D = params["z_W"].shape[1]
    params["z_W"] = params["z_W"] / spread
    params["z_b"] = params["z_b"] / spread
    for dec in ("rec_W", "pred_W"):
        W = params[dec].copy()
        W[:D] *= spread
        params[dec] = W
    return params


def zero_params(n_features, hidden_encoder, bottleneck, hidden_decoder):
    rng = np.random.default_rng(0)
    p = init_params(n_features, hidden_encoder, bottleneck, hidden_decoder, rng)
    return {k: np.zeros_like(v) for k, v in p.items()}


def nuisance_scaler(versions, spread_weight=0.1, floor_ratio=0.1):
    """Per-feature centre and scale from blocks ``(n, 1 + P, N, S)``.

    The scale is the RMS change each feature undergoes across transcodes of
    the same rows, blended with a small share of its overall spread and
    floored at ``floor_ratio`` times the median scale. Features that
    transcoding perturbs are damped; stable ones are emphasised.
    """
    S = versions.shape[-1]
    original = versions[:, 0].reshape(-1, S)
    drift = (versions[:, 1:] - versions[:, :1]).reshape(-1, S)
    mean = original.mean(axis=0)
    scale = np.sqrt(np.mean(drift * drift, axis=0) + (spread_weight * original.std(axis=0)) ** 2)
    positive = scale[scale > 0]
    floor = floor_ratio * float(np.median(positive)) if positive.size else 1.0
    return mean, np.maximum(scale, max(floor, 1e-12))


def encode(params, E):
    """Bottlenecks for standardised blocks ``E`` of shape ``(B, N, S)``."""
    H, _ = lstm_forward(np.swapaxes(E, 0, 1), params["enc_W"], params["enc_b"])
    return H[-1] @ params["z_W"] + params["z_b"]


def objective(params, anchor, positive, negative, target_next, has_next, margin=0.2,
              triplet=True, grad=True):
    """Mean per-anchor loss ``L_R + L_F + L_T`` and its gradient.

    All block arrays are standardised ``(B, N, S)``. ``has_next`` masks the
    prediction term for anchors that close their clip. With ``triplet=False``
    ``positive``/``negative`` are ignored.
    """
    B, N, S = anchor.shape
    seqs = [anchor, positive, negative] if triplet else [anchor]
    X = np.swapaxes(np.concatenate(seqs, axis=0), 0, 1)
    H_enc, enc_cache = lstm_forward(X, params["enc_W"], params["enc_b"])
    z_all = H_enc[-1] @ params["z_W"] + params["z_b"]
    z_a = z_all[:B]

    mask = np.asarray(has_next, dtype=float)
    total = 0.0
    dz_all = np.zeros_like(z_all)
    grads = {}
    for dec, target, weight in (("rec", anchor, np.ones(B)), ("pred", target_next, mask)):
        H, cache = lstm_forward_const(z_a, params[f"{dec}_W"], params[f"{dec}_b"], N)
        out = H @ params[f"{dec}_out_W"] + params[f"{dec}_out_b"]
        resid = (out - np.swapaxes(target, 0, 1)) * weight[None, :, None]
        total += 0.5 * float(np.sum(resid * resid))
        if grad:
            dout = resid / B
            grads[f"{dec}_out_W"] = np.einsum("tbh,tbs->hs", H, dout, optimize=True)
            grads[f"{dec}_out_b"] = dout.sum(axis=(0, 1))
            dH = dout @ params[f"{dec}_out_W"].T
            grads[f"{dec}_W"], grads[f"{dec}_b"], dz = lstm_backward(dH, cache, params[f"{dec}_W"])
            dz_all[:B] += dz

    if triplet:
        z_p, z_n = z_all[B:2 * B], z_all[2 * B:]
        na, np_, nn = (np.linalg.norm(v, axis=1) for v in (z_a, z_p, z_n))
        if np.any(na == 0) or np.any(np_ == 0) or np.any(nn == 0):
            raise ZeroVector("bottleneck collapsed to zero")
        c_an = np.sum(z_a * z_n, axis=1) / (na * nn)
        c_ap = np.sum(z_a * z_p, axis=1) / (na * np_)
        hinge = c_an - c_ap + margin
        active = (hinge > 0).astype(float)
        total += float(np.sum(np.maximum(hinge, 0.0)))
        if grad:
            w = active / B
            dz_all[:B] += w[:, None] * (_cos_grad(z_a, z_n, na, nn, c_an) - _cos_grad(z_a, z_p, na, np_, c_ap))
            dz_all[B:2 * B] -= w[:, None] * _cos_grad(z_p, z_a, np_, na, c_ap)
            dz_all[2 * B:] += w[:, None] * _cos_grad(z_n, z_a, nn, na, c_an)

    loss = total / B
    if not grad:
        return loss, None
    grads["z_W"] = H_enc[-1].T @ dz_all
    grads["z_b"] = dz_all.sum(axis=0)
    dh_last = dz_all @ params["z_W"].T
    grads["enc_W"], grads["enc_b"], _ = lstm_last_hidden_backward(dh_last, enc_cache, params["enc_W"])
    return loss, grads


# -------------------------------------------------------------- estimator

class SequenceAutoencoder(TransformerMixin, BaseEstimator):
    """LSTM encoder with reconstruction and prediction decoders.

    ``transform`` maps blocks ``(B, N, S)`` to bottlenecks ``(B, D)``.

    Parameters
    ----------
    hidden_encoder, bottleneck, hidden_decoder : int
        Encoder cells, bottleneck size ``D`` and cells per decoder.
    margin : float, default=0.2
        Triplet margin.
    learning_rate, momentum : float
        SGD settings. Gradients are clipped to ``clip_norm`` in global norm.
    max_epochs, patience : int
        The learning rate halves after ``patience`` epochs without held-out
        improvement; training stops on a stall following two halvings with no
        improvement in between.
    batch_size : int
        Anchors per SGD step.
    holdout : float
        Fraction of transcoded versions reserved for early stopping.
    max_timescale, input_gain : float
        Longest initial memory span of the encoder cells and the scale of the
        encoder input weights. See :func:`init_params`.
    random_state : int
        Seed for initialisation and triplet sampling.
    """

    def __init__(self, hidden_encoder=128, bottleneck=256, hidden_decoder=256, margin=0.2,
                 learning_rate=0.05, momentum=0.9, max_epochs=2, patience=2, batch_size=8,
                 holdout=0.2, clip_norm=1.0, max_timescale=10 * BLOCK_FRAMES, input_gain=0.005,
                 random_state=0):
        self.hidden_encoder = hidden_encoder
        self.bottleneck = bottleneck
        self.hidden_decoder = hidden_decoder
        self.margin = margin
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.holdout = holdout
        self.clip_norm = clip_norm
        self.max_timescale = max_timescale
        self.input_gain = input_gain
        self.random_state = random_state

    # -- fitting

    def fit(self, X, y=None, *, positives, successor=None):
        """Train on original blocks and their transcoded versions.

        Parameters
        ----------
        X : array of shape (n_blocks, N, S)
            Blocks of the original media, all from one cluster.
        positives : array of shape (n_blocks, P, N, S)
            Version ``j`` of every block comes from the same transcode, so
            negatives can be drawn with matching degradation.
        successor : array of shape (n_blocks,), optional
            Index of the next block in the same clip, ``-1`` at a clip end.
        """
        X = np.asarray(X, dtype=float)
        positives = np.asarray(positives, dtype=float)
        if X.ndim != 3:
            raise ShapeMismatch(f"blocks must be (n, N, S), got {X.shape}")
        n, N, S = X.shape
        if positives.ndim != 4 or positives.shape[0] != n or positives.shape[2:] != (N, S):
            raise ShapeMismatch(f"positives must be ({n}, P, {N}, {S}), got {positives.shape}")
        P = positives.shape[1]
        if P < 2:
            raise EmptyPositives("at least two transcoded versions per block are required")
        successor = np.full(n, -1) if successor is None else np.asarray(successor, dtype=int)
        if self.margin <= 0:
            raise ValueError("margin must be positive")

        rng = np.random.default_rng(self.random_state)
        versions = np.concatenate([X[:, None], positives], axis=1)
        self.input_mean_, self.input_scale_ = nuisance_scaler(versions)
        V = (versions - self.input_mean_) / self.input_scale_

        self.triplet_enabled_ = n >= 2
        if not self.triplet_enabled_:
            warnings.warn("single block without negatives: triplet term disabled", InsufficientDataWarning)

        n_hold = int(round(self.holdout * P)) if P >= 3 else 0
        n_hold = min(n_hold, P - 1)
        train_versions = np.arange(0, P + 1 - n_hold)
        held = np.arange(P + 1 - n_hold, P + 1)

        params = init_params(S, self.hidden_encoder, self.bottleneck, self.hidden_decoder, rng, self.max_timescale,
                             self.input_gain)
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        val_batch = self._validation_batch(V, successor, held if n_hold else train_versions[1:])

        lr = self.learning_rate
        best = np.inf
        best_params = {k: v.copy() for k, v in params.items()}
        stall = decays = 0
        self.history_ = []
        for epoch in range(self.max_epochs):
            order = rng.permutation(n)
            batch_losses = []
            for s in range(0, n, self.batch_size):
                batch = self._sample_batch(V, order[s:s + self.batch_size], successor, train_versions, rng)
                loss, grads = objective(params, *batch, margin=self.margin, triplet=self.triplet_enabled_)
                batch_losses.append(loss)
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                scale = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
                for k in params:
                    velocity[k] = self.momentum * velocity[k] - lr * scale * grads[k]
                    params[k] += velocity[k]
            val, _ = objective(params, *val_batch, margin=self.margin, triplet=self.triplet_enabled_, grad=False)
            improved = val < best
            if improved:
                best = val
                best_params = {k: v.copy() for k, v in params.items()}
                stall = 0
                decays = 0
            else:
                stall += 1
            self.history_.append(dict(epoch=epoch, train_loss=float(np.mean(batch_losses)),
                                      val_loss=float(val), best_val_loss=float(best), lr=lr))
            if stall >= self.patience:
                if decays >= 2:
                    break
                lr *= 0.5
                decays += 1
                stall = 0
        self.params_ = unit_spread(best_params, V.reshape(-1, N, S))
        self.n_features_in_ = S
        self.block_frames_ = N
        return self

    def _sample_batch(self, V, anchors, successor, train_versions, rng):
        n = V.shape[0]
        a_list, p_list, n_list, next_list, has_next = [], [], [], [], []
        for a in anchors:
            va = rng.choice(train_versions)
            vp = rng.choice(train_versions[train_versions != va])
            a_list.append(V[a, va])
            p_list.append(V[a, vp])
            if n > 1:
                others = np.delete(np.arange(n), a)
                n_list.append(V[rng.choice(others), va])
            else:
                n_list.append(V[a, va])
            s = successor[a]
            has_next.append(s >= 0)
            next_list.append(V[s, va] if s >= 0 else np.zeros_like(V[a, va]))
        return (np.stack(a_list), np.stack(p_list), np.stack(n_list), np.stack(next_list), np.array(has_next))

    def _validation_batch(self, V, successor, versions):
        n = V.shape[0]
        a_list, p_list, n_list, next_list, has_next = [], [], [], [], []
        for a in range(n):
            for v in versions:
                a_list.append(V[a, 0])
                p_list.append(V[a, v])
                n_list.append(V[(a + 1) % n, 0])
                s = successor[a]
                has_next.append(s >= 0)
                next_list.append(V[s, 0] if s >= 0 else np.zeros_like(V[a, 0]))
        return (np.stack(a_list), np.stack(p_list), np.stack(n_list), np.stack(next_list), np.array(has_next))

    # -- inference

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.n_features_in_:
            raise ShapeMismatch(f"expected blocks (B, N, {self.n_features_in_}), got {X.shape}")
        E = (X - self.input_mean_) / self.input_scale_
        return encode(self.params_, E)

    def encode_block(self, E_t) -> np.ndarray:
        E_t = np.asarray(E_t, dtype=float)
        if E_t.ndim != 2:
            raise ShapeMismatch(f"a block is (N, S), got {E_t.shape}")
        return self.transform(E_t[None])[0]

    # -- serialization

    def to_bytes(self) -> bytes:
        return dump_models([self])

    @classmethod
    def from_bytes(cls, data: bytes) -> SequenceAutoencoder:
        models = load_models(data)
        if len(models) != 1:
            raise ValueError(f"expected one model, found {len(models)}")
        return models[0]

    def sha256(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    @classmethod
    def from_params(cls, params, input_mean=None, input_scale=None, triplet_enabled=True):
        S = params["enc_W"].shape[0] - params["enc_W"].shape[1] // 4
        model = cls(hidden_encoder=params["enc_W"].shape[1] // 4, bottleneck=params["z_W"].shape[1],
                    hidden_decoder=params["rec_W"].shape[1] // 4)
        model.params_ = {k: np.asarray(params[k], dtype=float) for k in PARAM_NAMES}
        model.input_mean_ = np.zeros(S) if input_mean is None else np.asarray(input_mean, dtype=float)
        model.input_scale_ = np.ones(S) if input_scale is None else np.asarray(input_scale, dtype=float)
        model.triplet_enabled_ = triplet_enabled
        model.n_features_in_ = S
        model.history_ = []
        return model


_DIMS = struct.Struct("<IIIII")


def dump_models(models) -> bytes:
    """Canonical ARCM bytes: header, then per model dims, flags, scaler and parameters."""
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHH", ARCM_MAGIC, ARCM_VERSION, len(models)))
    for m in models:
        check_is_fitted(m, "params_")
        S = m.n_features_in_
        flags = 0 if m.triplet_enabled_ else FLAG_NO_TRIPLET
        h_e = m.params_["enc_W"].shape[1] // 4
        D = m.params_["z_W"].shape[1]
        h_d = m.params_["rec_W"].shape[1] // 4
        buf.write(_DIMS.pack(S, h_e, D, h_d, flags))
        buf.write(np.ascontiguousarray(m.input_mean_, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(m.input_scale_, dtype="<f8").tobytes())
        for name in PARAM_NAMES:
            buf.write(np.ascontiguousarray(m.params_[name], dtype="<f8").tobytes())
    return buf.getvalue()


def _param_shapes(S, h_e, D, h_d):
    return {
        "enc_W": (S + h_e, 4 * h_e), "enc_b": (4 * h_e,), "z_W": (h_e, D), "z_b": (D,),
        "rec_W": (D + h_d, 4 * h_d), "rec_b": (4 * h_d,), "rec_out_W": (h_d, S), "rec_out_b": (S,),
        "pred_W": (D + h_d, 4 * h_d), "pred_b": (4 * h_d,), "pred_out_W": (h_d, S), "pred_out_b": (S,),
    }


def load_models(data: bytes) -> list[SequenceAutoencoder]:
    if data[:4] != ARCM_MAGIC:
        raise BadMagic(f"expected {ARCM_MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < 8:
        raise TruncatedPayload("ARCM header truncated")
    _, version, count = struct.unpack_from("<4sHH", data)
    if version != ARCM_VERSION:
        raise UnsupportedVersion(f"ARCM version {version}")
    pos = 8
    out = []

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise TruncatedPayload("ARCM parameters truncated")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(float)
        pos += size
        return arr

    for _ in range(count):
        if pos + _DIMS.size > len(data):
            raise TruncatedPayload("ARCM model header truncated")
        S, h_e, D, h_d, flags = _DIMS.unpack_from(data, pos)
        pos += _DIMS.size
        mean, scale = take((S,)), take((S,))
        params = {name: take(shape) for name, shape in _param_shapes(S, h_e, D, h_d).items()}
        out.append(SequenceAutoencoder.from_params(params, mean, scale, not flags & FLAG_NO_TRIPLET))
    return out


def encode_block(model: SequenceAutoencoder, E_t) -> np.ndarray:
    return model.encode_block(E_t)


def compute_threshold(model: SequenceAutoencoder, block, positives) -> float:
    """Largest L2 distance between the block's bottleneck and its positives'."""
    positives = np.asarray(positives, dtype=float)
    if positives.size == 0 or len(positives) == 0:
        raise EmptyPositives("threshold needs at least one positive")
    z = model.encode_block(block)
    zp = model.transform(positives)
    return float(np.max(np.linalg.norm(zp - z, axis=1)))


def train(blocks, positives, successor=None, **params):
    """Fit a model and return it with one threshold per block."""
    model = SequenceAutoencoder(**params).fit(blocks, positives=positives, successor=successor)
    thresholds = np.array([compute_threshold(model, b, p) for b, p in zip(blocks, positives)])
    return model, thresholds

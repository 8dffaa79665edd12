"""scikit-learn compatible wrappers around the projection, codec and reduction code.

Activation-level estimators take ``(n, channels, h, w)`` arrays; the
image-level :class:`LearnableProjection` takes ``(n, 3, 32, 32)`` images and
behaves like a classifier whose ``fit`` never looks at labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import codec
from .numerics import ShapeError, ValidationError
from .reduction import SelectionState, greedy_dr, threshold_dr
from .refnet import forward
from .training import ProjectedModel, calibrate_quantizers, forward_projected, train_projections
from .transform import compute_spectrum, pca_pair, project, reconstruct


def check_activations(X, channels=None, name="X"):
    """Validate a rank-4 finite activation array; returns it as a float ndarray."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(f"{name} must have shape (n, channels, h, w), got {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains NaN or Inf")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"{name} has {X.shape[1]} channels, estimator was fitted on {channels}")
    return X


class ChannelPCA(TransformerMixin, BaseEstimator):
    """Channel-wise PCA of activation maps.

    ``transform`` returns coefficient maps of shape ``(n, n_components, h, w)``
    and ``inverse_transform`` maps them back to activations.

    :param n_components: retained dimensions, or None to keep all channels
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_activations(X)
        self.spectrum_ = compute_spectrum(X)
        k = X.shape[1] if self.n_components is None else int(self.n_components)
        if not 1 <= k <= X.shape[1]:
            raise ValidationError(f"n_components must lie in [1, {X.shape[1]}]")
        self.pair_ = pca_pair(self.spectrum_, k, dtype=X.dtype)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def explained_variance_(self):
        check_is_fitted(self, "spectrum_")
        return self.spectrum_.sigma_sq[: self.pair_.d_active]

    @property
    def components_(self):
        check_is_fitted(self, "pair_")
        return self.pair_.P

    def transform(self, X):
        check_is_fitted(self, "pair_")
        X = check_activations(X, self.n_features_in_)
        n, _, h, w = X.shape
        coded = project(self.pair_, X)
        return np.ascontiguousarray(coded.reshape(-1, n, h, w).transpose(1, 0, 2, 3))

    def inverse_transform(self, Z):
        check_is_fitted(self, "pair_")
        Z = check_activations(Z, self.pair_.d_active, name="Z")
        n, k, h, w = Z.shape
        coded = Z.transpose(1, 0, 2, 3).reshape(k, -1)
        return reconstruct(self.pair_, coded, (n, self.n_features_in_, h, w))


class ActivationCodec(TransformerMixin, BaseEstimator):
    """Symmetric int8 quantizer with Huffman bit accounting.

    ``fit`` calibrates the scale on max |X|; ``transform`` yields int8 symbols.
    """

    def fit(self, X, y=None):
        self.quant_ = codec.calibrate_quant(np.asarray(X))
        return self

    def transform(self, X):
        check_is_fitted(self, "quant_")
        return codec.quantize(X, self.quant_)

    def inverse_transform(self, S):
        check_is_fitted(self, "quant_")
        return codec.dequantize(S, self.quant_)

    def encoded_bits(self, X, overhead=True):
        """Huffman-coded size of ``X`` in bits, optionally with table and scale overhead."""
        check_is_fitted(self, "quant_")
        lb = codec.layer_bits(self.transform(X))
        return lb.total if overhead else lb.payload


class LearnableProjection(ClassifierMixin, BaseEstimator):
    """Frozen reference net with a trained (P, P_inv) pair at every tap.

    ``fit(X)`` computes PCA spectra on the first ``calibration_size`` images,
    truncates to ``dims``, calibrates the quantizers and trains the pairs
    against the net's own taps and logits. ``y`` is accepted for API
    compatibility and ignored.
    """

    def __init__(self, net=None, dims=None, calibration_size=512, lr=1e-3, epochs=3,
                 batch_size=64, quantize=True, random_state=0):
        self.net = net
        self.dims = dims
        self.calibration_size = calibration_size
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.quantize = quantize
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.net is None:
            raise ValidationError("LearnableProjection needs a reference net")
        X = np.asarray(X, dtype=np.float32)
        calib = X[: self.calibration_size]
        taps = forward(self.net, calib).taps
        self.spectra_ = [compute_spectrum(a, l) for l, a in enumerate(taps)]
        full = [pca_pair(sp) for sp in self.spectra_]
        quant = calibrate_quantizers(self.net, full, calib)
        model = ProjectedModel(self.net, full, quant, quantize=self.quantize)
        if self.dims is not None:
            model = model.with_dims(self.dims)
        self.initial_model_ = model
        self.model_, self.history_ = train_projections(
            model, X, epochs=self.epochs, lr=self.lr, seed=self.random_state, batch_size=self.batch_size
        )
        self.classes_ = np.arange(10)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        out = []
        for s in range(0, len(X), 256):
            taps, _ = forward_projected(self.model_, np.asarray(X[s:s + 256]))
            out.append(taps.logits)
        return np.concatenate(out)

    def predict_proba(self, X):
        z = self._logits(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self._logits(X).argmax(axis=1)

    def transform(self, X):
        """Per-layer int8 symbol matrices that would be written to memory."""
        check_is_fitted(self, "model_")
        symbols = []
        forward_projected(self.model_, np.asarray(X), symbols=symbols)
        return symbols


class ThresholdReducer(BaseEstimator):
    """Keep the fewest components whose eigenvalue share reaches ``threshold``."""

    def __init__(self, threshold=0.99):
        self.threshold = threshold

    def fit(self, spectra, y=None):
        self.plan_ = threshold_dr(spectra, self.threshold)
        self.dims_ = self.plan_.dims
        return self


class GreedyReducer(BaseEstimator):
    """Greedy one-row-at-a-time reduction down to ``budget_bits``.

    ``fit(model, images, spectra)`` runs the search on ``images`` using the
    projected ``model``'s activations.
    """

    def __init__(self, budget_bits=0, use_sigma=False, strict_recompute=False):
        self.budget_bits = budget_bits
        self.use_sigma = use_sigma
        self.strict_recompute = strict_recompute

    def fit(self, model, images, spectra):
        state = SelectionState.build(model, spectra, images, use_sigma=self.use_sigma,
                                     strict=self.strict_recompute)
        self.plan_, self.trace_ = greedy_dr(state, self.budget_bits)
        self.dims_ = self.plan_.dims
        return self

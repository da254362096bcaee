"""scikit-learn style wrapper around the training loop.

``X`` is a sequence of episodes, each a ``T x 3 x H x W`` uint8 array of RGB
frames (a single 4-D array is taken as one episode). ``y`` holds the matching
``T x H x W`` uint8 depth maps.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionMismatchError, InvalidConfigError
from .metrics import evaluate
from .network import NetworkConfig, frame_to_input, output_to_depth8
from .scenegen import Episode
from .training import TrainConfig, train


def _as_uint8(a, what):
    arr = np.asarray(a)
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.size and (arr.min() < 0 or arr.max() > 255):
            raise InvalidConfigError(f"{what} must hold 8-bit integer values")
        arr = arr.astype(np.uint8)
    return arr


def check_sequences(X, height=None, width=None):
    """Validate frames. Returns a list of ``T x 3 x H x W`` uint8 arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
    seqs = [_as_uint8(x, "frames") for x in X]
    if not seqs:
        raise InvalidConfigError("need at least one episode")
    for i, s in enumerate(seqs):
        if s.ndim != 4 or s.shape[1] != 3:
            raise DimensionMismatchError(f"episode {i}: expected T x 3 x H x W, got {s.shape}", "frames")
        if len(s) == 0:
            raise InvalidConfigError(f"episode {i} is empty")
        if height is not None and s.shape[2:] != (height, width):
            raise DimensionMismatchError(
                f"episode {i}: frames are {s.shape[2]}x{s.shape[3]}, expected {height}x{width}", "frames")
    return seqs


def check_depth_sequences(y, seqs):
    """Validate targets against already-checked frame sequences."""
    if isinstance(y, np.ndarray) and y.ndim == 3:
        y = [y]
    ys = [_as_uint8(d, "depths") for d in y]
    if len(ys) != len(seqs):
        raise DimensionMismatchError(f"{len(seqs)} frame episodes but {len(ys)} depth episodes", "episodes")
    for i, (d, s) in enumerate(zip(ys, seqs)):
        if d.shape != (s.shape[0], *s.shape[2:]):
            raise DimensionMismatchError(f"episode {i}: depth shape {d.shape} does not match frames {s.shape}",
                                         "depths")
    return ys


class DepthSequenceRegressor(RegressorMixin, BaseEstimator):
    """Recurrent depth-from-video regressor.

    ``score`` returns the negated per-pixel absolute error so that larger is better.
    """

    def __init__(self, width_scale=0.125, seq_len=32, burn_len=32, lr=1e-3, max_updates=500,
                 batch_sequences=1, lrelu_variant="standard", alpha=0.1, init="he",
                 update_gate_bias=3.0, ablate_recurrence=False, random_state=0):
        self.width_scale = width_scale
        self.seq_len = seq_len
        self.burn_len = burn_len
        self.lr = lr
        self.max_updates = max_updates
        self.batch_sequences = batch_sequences
        self.lrelu_variant = lrelu_variant
        self.alpha = alpha
        self.init = init
        self.update_gate_bias = update_gate_bias
        self.ablate_recurrence = ablate_recurrence
        self.random_state = random_state

    def _train_config(self, height, width):
        net = NetworkConfig(width_scale=self.width_scale, height=height, width=width,
                            lrelu_variant=self.lrelu_variant, alpha=self.alpha,
                            seed=self.random_state, init=self.init,
                            update_gate_bias=self.update_gate_bias)
        return TrainConfig(seq_len=self.seq_len, burn_len=self.burn_len, lr=self.lr,
                           max_updates=self.max_updates, batch_sequences=self.batch_sequences,
                           seed=self.random_state, network=net)

    def fit(self, X, y):
        seqs = check_sequences(X)
        shapes = {s.shape[2:] for s in seqs}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"episodes have mixed frame sizes {sorted(shapes)}", "frames")
        ys = check_depth_sequences(y, seqs)
        h, w = shapes.pop()
        episodes = [Episode(f, d, [None] * len(f), i) for i, (f, d) in enumerate(zip(seqs, ys))]
        state = train(self._train_config(h, w), episodes)
        self.net_ = state.net
        self.history_ = state.history
        self.n_features_in_ = 3 * h * w
        self.frame_shape_ = (3, h, w)
        return self

    def predict(self, X):
        """Predicted depth, one ``T x 3 x H x W`` uint8 array per episode (a 4-D
        input returns a single array)."""
        check_is_fitted(self, "net_")
        single = isinstance(X, np.ndarray) and X.ndim == 4
        seqs = check_sequences(X, *self.frame_shape_[1:])
        out = []
        for s in seqs:
            preds = self.net_.predict_sequence(list(frame_to_input(s, self.net_.dtype)),
                                               reset_every_frame=self.ablate_recurrence)
            out.append(np.stack([output_to_depth8(p) for p in preds]))
        return out[0] if single else out

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            raise InvalidConfigError("sample_weight is not supported")
        seqs = check_sequences(X)
        ys = check_depth_sequences(y, seqs)
        preds = self.predict(seqs)
        real = [np.broadcast_to(d[:, None], p.shape) for d, p in zip(ys, preds)]
        return -evaluate([f for r in real for f in r], [f for p in preds for f in p]).ae

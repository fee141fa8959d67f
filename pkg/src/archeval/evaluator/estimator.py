"""scikit-learn style surrogate regressor over token-id matrices."""
from __future__ import annotations

import logging
import math
import time

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import PAD, ModelConfig, backward, encode, forward, head, init_params
from .optim import OPTIMIZERS

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def _trim(tokens: np.ndarray) -> np.ndarray:
    # padding is a suffix; drop columns that are PAD in every row
    used = (tokens != PAD).any(axis=0)
    width = int(np.flatnonzero(used)[-1]) + 1 if used.any() else 1
    return tokens[:, :width]


class SurrogateRegressor(RegressorMixin, BaseEstimator):
    """Transformer-encoder regressor on padded token-id sequences.

    Targets are z-scored per output column during training; predictions are
    returned in the original units. ``fit`` keeps the parameters from the
    epoch with the lowest validation loss (training loss if no validation
    data is given).

    Parameters
    ----------
    vocab_size : int or None
        Embedding rows. ``None`` infers ``X.max() + 1`` at fit time.
    d_model, n_layers, n_heads, ffn_dim, max_len, dropout_p, readout
        Encoder shape, see :class:`ModelConfig`.
    learning_rate, epochs, batch_size, optimizer
        Mini-batch training schedule; ``optimizer`` is ``"adam"`` or ``"sgd"``.
    lr_schedule : {"constant", "cosine"}
        ``"cosine"`` anneals the step size from ``learning_rate`` to 0 over all steps.
    random_state : int
        Seeds initialization, batch order and dropout.
    dtype : {"float32", "float64"}

    Attributes
    ----------
    params_ : dict of ndarray
    config_ : ModelConfig
    target_mean_, target_std_ : ndarray of shape (k,)
    history_ : list of dict
        Per-epoch ``train_loss``, ``val_loss`` and ``val_loss_per_output``.
    """

    def __init__(self, vocab_size=None, d_model=64, n_layers=2, n_heads=4, ffn_dim=256,
                 max_len=512, dropout_p=0.1, readout="mean", learning_rate=1e-3, epochs=30,
                 batch_size=32, optimizer="adam", lr_schedule="constant", random_state=0, dtype="float32",
                 verbose=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim
        self.max_len = max_len
        self.dropout_p = dropout_p
        self.readout = readout
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr_schedule = lr_schedule
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    def _check_tokens(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.int64)
        if X.shape[1] > self.max_len:
            X = X[:, : self.max_len]
        return X

    def _check_targets(self, y, n) -> np.ndarray:
        y = check_array(y, ensure_2d=False, dtype=np.float64)
        Y = y.reshape(n, -1)
        if not np.isfinite(Y).all():
            raise ValueError("targets contain NaN or infinity")
        return Y

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_tokens(X)
        Y = self._check_targets(y, X.shape[0])
        if X.shape[0] < 1:
            raise ValueError("empty training set")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        self._y_1d = np.ndim(y) == 1
        self.target_mean_ = Y.mean(0)
        std = Y.std(0)
        if (std <= 0).any():
            raise ValueError(f"target columns {np.flatnonzero(std <= 0).tolist()} are constant; cannot normalize")
        self.target_std_ = std
        vocab_size = self.vocab_size or int(X.max()) + 1
        self.config_ = ModelConfig(
            vocab_size=vocab_size, k_outputs=Y.shape[1], d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, ffn_dim=self.ffn_dim,
            max_len=self.max_len, dropout_p=self.dropout_p, readout=self.readout,
        )
        dtype = np.dtype(self.dtype)
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
        self.params_ = init_params(self.config_, init_rng, dtype=dtype)
        opt = OPTIMIZERS[self.optimizer](self.params_, lr=self.learning_rate)

        Z = self.normalize(Y).astype(dtype)
        has_val = X_val is not None
        if has_val:
            X_val = self._check_tokens(X_val)
            Z_val = self.normalize(self._check_targets(y_val, X_val.shape[0]))
        self.history_ = []
        best, best_params = math.inf, None
        n = X.shape[0]
        total_steps = self.epochs * math.ceil(n / self.batch_size)
        step = 0
        for epoch in range(self.epochs):
            t0 = time.perf_counter()
            perm = order_rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                tokens = _trim(X[idx])
                out, cache = forward(self.params_, tokens, self.config_, drop_rng)
                diff = out - Z[idx]
                loss = float(np.mean(diff * diff))
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became {loss} at epoch {epoch}, batch starting {start}; "
                        f"try a lower learning_rate (now {self.learning_rate})")
                grads = backward(self.params_, cache, (2.0 / diff.size) * diff, self.config_)
                if self.lr_schedule == "cosine":
                    opt.lr = self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
                opt.step(self.params_, grads)
                step += 1
                total += loss * len(idx)
            record = {"epoch": epoch, "train_loss": total / n, "seconds": time.perf_counter() - t0}
            if has_val:
                per_out = self._normalized_sq_error(X_val, Z_val).mean(0)
                record["val_loss"] = float(per_out.mean())
                record["val_loss_per_output"] = per_out.tolist()
            self.history_.append(record)
            score = record["val_loss"] if has_val else record["train_loss"]
            if score < best:
                best = score
                best_params = {k: v.copy() for k, v in self.params_.items()}
                self.best_epoch_ = epoch
            if self.verbose:
                logger.info("epoch %d train %.5f val %s (%.1fs)", epoch, record["train_loss"],
                            record.get("val_loss"), record["seconds"])
        if best_params is not None:
            self.params_ = best_params
        return self

    def normalize(self, Y) -> np.ndarray:
        return (np.asarray(Y, dtype=np.float64).reshape(-1, len(self.target_mean_)) - self.target_mean_) / self.target_std_

    def denormalize(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.target_std_ + self.target_mean_

    def _batched(self, X, fn, batch_size=64):
        return np.concatenate([fn(_trim(X[s:s + batch_size])) for s in range(0, X.shape[0], batch_size)])

    def encode(self, X) -> np.ndarray:
        """Sequence embeddings, shape (n, d_model). Inference mode."""
        check_is_fitted(self, "params_")
        X = self._check_tokens(X)
        return self._batched(X, lambda t: encode(self.params_, t, self.config_)[0])

    def predict_normalized(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = self._check_tokens(X)
        return self._batched(X, lambda t: forward(self.params_, t, self.config_)[0]).astype(np.float64)

    def predict_embedding(self, E) -> np.ndarray:
        """Head + de-normalization applied to precomputed embeddings."""
        check_is_fitted(self, "params_")
        return self.denormalize(head(self.params_, np.asarray(E, dtype=self.params_["head.w"].dtype)))

    def predict(self, X) -> np.ndarray:
        out = self.denormalize(self.predict_normalized(X))
        return out[:, 0] if getattr(self, "_y_1d", False) else out

    def _normalized_sq_error(self, X, Z) -> np.ndarray:
        diff = self.predict_normalized(X) - Z
        if not np.isfinite(diff).all():
            raise TrainingDivergedError("non-finite prediction in forward pass")
        return diff * diff

    def loss(self, X, y) -> float:
        """Mean squared error over samples and outputs, in normalized target units."""
        X = self._check_tokens(X)
        Z = self.normalize(self._check_targets(y, X.shape[0]))
        return float(self._normalized_sq_error(X, Z).mean())

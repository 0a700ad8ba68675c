"""scikit-learn style wrappers around the grounding network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import default_dtype
from .config import RunConfig
from .data import DatasetManifest, SegmentAnnotation
from .evaluation import evaluate
from .model import SelfRefineConfig, predict_topn, self_refine
from .training import Sample, Trainer, load_samples


def check_grounding_data(X, y=None, require_y=True):
    """Normalise ``X``/``y`` into a list of :class:`Sample`.

    ``X`` may be a :class:`DatasetManifest`, a list of samples, or a list of
    ``(frames, tokens)`` pairs with spans ``y`` of shape ``(n, 2)``.
    """
    if isinstance(X, DatasetManifest):
        return load_samples(X)
    X = list(X)
    if X and isinstance(X[0], Sample):
        return X
    if y is None:
        if require_y:
            raise ValueError("y (inclusive start/end frame per sample) is required")
        y = np.zeros((len(X), 2), dtype=int)
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"y must have shape (n_samples, 2), got {y.shape}")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
    samples = []
    dims = set()
    for i, ((frames, tokens), (s, e)) in enumerate(zip(X, y)):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2 or not np.all(np.isfinite(frames)):
            raise ValueError(f"sample {i}: frames must be a finite 2-D array")
        tokens = tuple(int(t) for t in np.asarray(tokens).reshape(-1))
        if not tokens:
            raise ValueError(f"sample {i}: empty query")
        ann = SegmentAnnotation(int(s), int(e))
        if require_y:
            ann.validate(frames.shape[0])
        dims.add(frames.shape[1])
        samples.append(Sample(f"x{i}", frames, tokens, ann))
    if len(dims) > 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
    return samples


class ECRLGrounder(BaseEstimator):
    """Temporal sentence grounding with equivariant consistency training.

    ``fit`` trains on (video features, query tokens) pairs with inclusive
    frame spans; ``predict`` returns the top-1 span per sample.
    """

    def __init__(self, H=16, vocab_size=None, sigma_refine=5.0, refine_iterations=3,
                 row_normalize=True, alpha=0.8, literal_ratio_range=False,
                 spatial_noise_scale=0.05, spatial_channel_drop=0.0, augment=True,
                 fresh_augmentation=True, lam=5.0, sigma_prior=5.0, downweight=0.5,
                 prior="gaussian", cons_aug_to_orig=True, cons_orig_to_aug=True,
                 cons_subvideos="left,seg,right", tsg_aug=True, tsg_orig=True,
                 label_smoothing=False, grounding_loss="categorical", epochs=100,
                 batch_size=16, lr=1e-4, dtype="float32", random_state=0):
        self.H = H
        self.vocab_size = vocab_size
        self.sigma_refine = sigma_refine
        self.refine_iterations = refine_iterations
        self.row_normalize = row_normalize
        self.alpha = alpha
        self.literal_ratio_range = literal_ratio_range
        self.spatial_noise_scale = spatial_noise_scale
        self.spatial_channel_drop = spatial_channel_drop
        self.augment = augment
        self.fresh_augmentation = fresh_augmentation
        self.lam = lam
        self.sigma_prior = sigma_prior
        self.downweight = downweight
        self.prior = prior
        self.cons_aug_to_orig = cons_aug_to_orig
        self.cons_orig_to_aug = cons_orig_to_aug
        self.cons_subvideos = cons_subvideos
        self.tsg_aug = tsg_aug
        self.tsg_orig = tsg_orig
        self.label_smoothing = label_smoothing
        self.grounding_loss = grounding_loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.dtype = dtype
        self.random_state = random_state

    def _run_config(self, samples):
        params = self.get_params()
        seed = params.pop("random_state")
        vocab = params.pop("vocab_size")
        if vocab is None:
            vocab = max(max(s.tokens) for s in samples) + 1
        T = samples[0].frames.shape[0]
        D = samples[0].frames.shape[1]
        return RunConfig(**params, seed=int(seed), vocab_size=int(vocab), T=max(T, 4), D=D,
                         n_prototypes=1).validate()

    def fit(self, X, y=None, X_val=None, y_val=None, on_epoch=None):
        samples = check_grounding_data(X, y)
        val = check_grounding_data(X_val, y_val) if X_val is not None else None
        cfg = self._run_config(samples)
        self.trainer_ = Trainer(cfg, samples, val)
        self.trainer_.fit(on_epoch=on_epoch)
        st = self.trainer_.state
        self.network_ = st.net
        self.history_ = st.history
        self.best_epoch_ = st.best_epoch
        self.n_features_in_ = cfg.D
        self.vocab_size_ = cfg.vocab_size
        self.config_ = cfg
        return self

    def _samples(self, X):
        check_is_fitted(self, "network_")
        samples = check_grounding_data(X, require_y=False)
        if samples and samples[0].frames.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {samples[0].frames.shape[1]} features, model expects {self.n_features_in_}")
        for s in samples:
            if max(s.tokens) >= self.vocab_size_ or min(s.tokens) < 0:
                raise ValueError(f"sample {s.sample_id}: token id outside vocabulary of size {self.vocab_size_}")
        return samples

    def decision_function(self, X):
        """Per-frame ``(start, end)`` boundary scores for every sample."""
        samples = self._samples(X)
        return self.network_.scores(samples)

    def rank_spans(self, samples, n):
        return self.network_.rank_spans(samples, n)

    def predict_topn(self, X, n=5):
        return [predict_topn(a, b, n) for a, b in self.decision_function(X)]

    def predict(self, X):
        return np.array([[s, e] for (s, e, _), in self.predict_topn(X, 1)], dtype=int)

    def score(self, X, y=None):
        """R@1, IoU=0.5."""
        samples = check_grounding_data(X, y)
        return evaluate(self.network_, samples, n_list=(1,), m_list=(0.5,))[(1, 0.5)]


class SelfRefiner(TransformerMixin, BaseEstimator):
    """Temporal/semantic graph smoothing of frame features as a stateless transformer.

    Accepts a single ``(T, D)`` sequence or a batch ``(B, T, D)``.
    """

    def __init__(self, sigma=5.0, iterations=3, row_normalize=True):
        self.sigma = sigma
        self.iterations = iterations
        self.row_normalize = row_normalize

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim not in (2, 3):
            raise ValueError(f"expected (T, D) or (B, T, D) input, got shape {X.shape}")
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[-1]} features, expected {self.n_features_in_}")
        cfg = SelfRefineConfig(self.sigma, self.iterations, self.row_normalize).validate()
        with default_dtype(np.float64):
            return self_refine(X, cfg).data

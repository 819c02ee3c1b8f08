"""scikit-learn style wrapper: ``fit(X, y)`` trains one adapter on a frozen base.

``X`` is a list of ``(frames, d_feat)`` feature arrays and ``y`` a list of
token-id transcripts. ``predict`` returns greedy transcripts and ``score`` is
``1 - MER``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bench import DEFAULT_LANGUAGES, Utterance, corpus_mer
from .model import ModelConfig, WhisperLite, build_model
from .peft import AdapterSpec, attach
from .trainer import OptimizerConfig, train_run, transcribe


def check_features(X, d_feat: int | None = None) -> list[np.ndarray]:
    """Validate a list of 2-D finite feature arrays sharing one width."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a nonempty list of (frames, d_feat) arrays")
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"X[{i}] must be 2-D with at least one frame, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError(f"X[{i}] contains NaN or infinity")
        out.append(x)
    widths = {x.shape[1] for x in out}
    if len(widths) != 1:
        raise ValueError(f"X arrays disagree on feature width: {sorted(widths)}")
    if d_feat is not None and widths != {d_feat}:
        raise ValueError(f"X has {widths.pop()} features per frame, expected {d_feat}")
    return out


def check_transcripts(y, n_text_tokens: int, n_samples: int) -> list[list[int]]:
    if len(y) != n_samples:
        raise ValueError(f"y has {len(y)} transcripts for {n_samples} feature arrays")
    out = []
    for i, seq in enumerate(y):
        seq = [int(t) for t in seq]
        if not seq:
            raise ValueError(f"y[{i}] is empty")
        bad = [t for t in seq if not 0 <= t < n_text_tokens]
        if bad:
            raise ValueError(f"y[{i}] has token ids outside [0, {n_text_tokens}): {bad[:3]}")
        out.append(seq)
    return out


def _token_lang(t: int) -> str:
    for spec in DEFAULT_LANGUAGES.values():
        if spec.owns(t):
            return spec.name
    raise ValueError(f"token {t} belongs to no toy language")


class SoftPromptASR(BaseEstimator):
    """Adapter training behind ``fit``/``predict``.

    ``base_model`` is used as the frozen backbone (copied, never mutated); when
    omitted a randomly initialised model is built from ``model_config``.
    """

    def __init__(self, method: str = "VanillaSPT", position: str = "Entire", n_enc: int = 16,
                 n_dec: int = 16, n_deep=None, learning_rate: float = 1e-3, epochs: int = 10,
                 batch_size: int = 8, max_steps=None, stop_loss=None, lang: str = "A",
                 seed: int = 0, base_model: WhisperLite | None = None, model_config=None):
        self.method = method
        self.position = position
        self.n_enc = n_enc
        self.n_dec = n_dec
        self.n_deep = n_deep
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.stop_loss = stop_loss
        self.lang = lang
        self.seed = seed
        self.base_model = base_model
        self.model_config = model_config

    def _make_base(self) -> WhisperLite:
        if self.base_model is not None:
            import copy
            model = copy.deepcopy(self.base_model)
            for p in model.parameters():
                p.trainable = True
            return model
        cfg = self.model_config
        if cfg is None:
            cfg = ModelConfig()
        elif isinstance(cfg, dict):
            cfg = ModelConfig.from_dict(cfg)
        return build_model(cfg)

    def _utterances(self, X, y=None) -> list[Utterance]:
        utts = []
        for i, x in enumerate(X):
            tokens = [] if y is None else y[i]
            utts.append(Utterance(f"x{i}", tokens, [_token_lang(t) for t in tokens], x, self.lang))
        return utts

    def fit(self, X, y):
        model = self._make_base()
        X = check_features(X, model.config.d_feat)
        y = check_transcripts(y, model.tokens.first_special_id, len(X))
        model.tokens.lid(self.lang)
        spec = AdapterSpec(method=self.method, position=self.position, n_enc=self.n_enc,
                           n_dec=self.n_dec, n_deep=self.n_deep, seed=self.seed)
        opt = OptimizerConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                              batch_size=self.batch_size, seed=self.seed,
                              max_steps=self.max_steps, stop_loss=self.stop_loss)
        self.adapter_ = attach(model, spec)
        self.report_ = train_run(self.adapter_, self._utterances(X, y), None, opt)
        self.n_features_in_ = model.config.d_feat
        self.n_trainable_ = self.adapter_.account().total
        return self

    def predict(self, X) -> list[list[int]]:
        check_is_fitted(self, "adapter_")
        X = check_features(X, self.n_features_in_)
        budget = self.adapter_.model.config.max_target_positions // 4
        return transcribe(self.adapter_, self._utterances(X), max_new_tokens=budget)

    def score(self, X, y) -> float:
        """``1 - MER`` over the given utterances (can be negative)."""
        check_is_fitted(self, "adapter_")
        X = check_features(X, self.n_features_in_)
        y = check_transcripts(y, self.adapter_.model.tokens.first_special_id, len(X))
        refs = self._utterances(X, y)
        return 1.0 - corpus_mer(refs, self.predict(X)).mer

    def transcripts_exact(self, X, y: Sequence[Sequence[int]]) -> float:
        hyps = self.predict(X)
        return float(np.mean([list(h) == list(r) for h, r in zip(hyps, y)]))

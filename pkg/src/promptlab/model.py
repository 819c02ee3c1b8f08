"""A small Whisper-shaped encoder-decoder transformer.

The encoder consumes a feature sequence (single affine frontend, learned
positions, pre-LN blocks with bidirectional attention). The decoder reads
``[prompt rows; SOT, LID, TRANSCRIBE, NOTIMESTAMPS; transcript]`` with causal
self-attention and cross-attention over the whole encoder memory, and
projects through the tied token embedding.

Adapters plug in through a hooks object (see :class:`NoAdapter`); the base
model never stores adapter state.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Parameter, Tensor

N_PREFIX = 4


class ContextLimitError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    ffn_mult: int = 4
    vocab_size: int = 64
    d_feat: int = 16
    max_source_positions: int = 512
    max_target_positions: int = 384
    seed: int = 0
    languages: tuple[str, ...] = ("A", "B", "C")

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_enc_blocks", "n_dec_blocks", "ffn_mult",
                     "vocab_size", "d_feat", "max_source_positions", "max_target_positions"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"ModelConfig.d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if len(set(self.languages)) != len(self.languages) or not self.languages:
            raise ValueError("ModelConfig.languages must be nonempty and distinct")
        n_special = 5 + len(self.languages)
        if self.vocab_size < n_special + 2:
            raise ValueError(
                f"ModelConfig.vocab_size={self.vocab_size} leaves fewer than 2 text tokens "
                f"after {n_special} special tokens")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["languages"] = list(self.languages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Dimension presets used only for parameter accounting.
PRESETS = {
    "small": dict(d_model=768, n_heads=12, n_enc_blocks=12, n_dec_blocks=12, ffn_mult=4,
                  vocab_size=51865, d_feat=80, max_source_positions=1500,
                  max_target_positions=448),
    "medium": dict(d_model=1024, n_heads=16, n_enc_blocks=24, n_dec_blocks=24, ffn_mult=4,
                   vocab_size=51865, d_feat=80, max_source_positions=1500,
                   max_target_positions=448),
}


def preset_config(name: str) -> ModelConfig:
    return ModelConfig(**PRESETS[name])


@dataclass(frozen=True)
class SpecialTokenMap:
    SOT: int
    EOT: int
    TRANSCRIBE: int
    NOTIMESTAMPS: int
    PREV: int
    LID: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, config: ModelConfig) -> "SpecialTokenMap":
        first = config.vocab_size - 5 - len(config.languages)
        lid = {lang: first + 5 + i for i, lang in enumerate(config.languages)}
        return cls(SOT=first, EOT=first + 1, TRANSCRIBE=first + 2, NOTIMESTAMPS=first + 3,
                   PREV=first + 4, LID=lid)

    @property
    def first_special_id(self) -> int:
        return self.SOT

    def lid(self, lang: str) -> int:
        try:
            return self.LID[lang]
        except KeyError:
            raise KeyError(f"unknown language {lang!r}; registered: {sorted(self.LID)}") from None


def build_decoder_prefix(lang: str, tokens: SpecialTokenMap) -> list[int]:
    """``[SOT, LID(lang), TRANSCRIBE, NOTIMESTAMPS]``; the PREV slot is left to prompts."""
    return [tokens.SOT, tokens.lid(lang), tokens.TRANSCRIBE, tokens.NOTIMESTAMPS]


class NoAdapter:
    """Hooks of an unadapted model."""

    def encoder_prompts(self):
        return None

    def decoder_prompts(self):
        return None

    def inject(self, side: str, block: int, hidden: Tensor) -> Tensor:
        return hidden

    def lora_delta(self, name: str, x: Tensor):
        return None


NO_ADAPTER = NoAdapter()


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every base parameter, in a fixed order."""
    e, f, V = config.d_model, config.ffn_mult * config.d_model, config.vocab_size
    out = []

    def linear(name, d_out, d_in):
        out.append((f"{name}.weight", (d_out, d_in), "normal"))
        out.append((f"{name}.bias", (d_out,), "zeros"))

    def norm(name):
        out.append((f"{name}.gain", (e,), "ones"))
        out.append((f"{name}.bias", (e,), "zeros"))

    def attn(name):
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            linear(f"{name}.{proj}", e, e)
        # keys carry no bias: softmax is invariant to it
        out.remove((f"{name}.k_proj.bias", (e,), "zeros"))

    def ffn(name):
        linear(f"{name}.fc1", f, e)
        linear(f"{name}.fc2", e, f)

    linear("encoder.frontend", e, config.d_feat)
    out.append(("encoder.pos", (config.max_source_positions, e), "normal"))
    for i in range(config.n_enc_blocks):
        b = f"encoder.block{i}"
        norm(f"{b}.attn_ln"); attn(f"{b}.attn")
        norm(f"{b}.ffn_ln"); ffn(f"{b}.ffn")
    norm("encoder.ln_post")
    out.append(("decoder.embed", (V, e), "normal"))
    out.append(("decoder.pos", (config.max_target_positions, e), "normal"))
    for i in range(config.n_dec_blocks):
        b = f"decoder.block{i}"
        norm(f"{b}.attn_ln"); attn(f"{b}.attn")
        norm(f"{b}.cross_ln"); attn(f"{b}.cross")
        norm(f"{b}.ffn_ln"); ffn(f"{b}.ffn")
    norm("decoder.ln_post")
    return out


def base_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count (no enumeration)."""
    e, f = config.d_model, config.ffn_mult * config.d_model
    ln = 2 * e
    attn = 4 * e * e + 3 * e
    ffn = e * f + f + f * e + e
    enc_block = 2 * ln + attn + ffn
    dec_block = 3 * ln + 2 * attn + ffn
    return (config.d_feat * e + e + config.max_source_positions * e
            + config.n_enc_blocks * enc_block + ln
            + config.vocab_size * e + config.max_target_positions * e
            + config.n_dec_blocks * dec_block + ln)


class WhisperLite:
    def __init__(self, config: ModelConfig, init_std: float = 0.02):
        config.validate()
        self.config = config
        self.tokens = SpecialTokenMap.for_config(config)
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Parameter] = {}
        for name, shape, init in _param_shapes(config):
            if init == "normal":
                data = rng.normal(0.0, init_std, size=shape)
            elif init == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            self.params[name] = Parameter(data, name)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def output_projection(self) -> Parameter:
        """Tied to the token embedding: the same Parameter object."""
        return self.params["decoder.embed"]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    # ------------------------------------------------------------ building blocks

    def linear(self, name: str, x: Tensor, hooks=NO_ADAPTER) -> Tensor:
        out = ad.matmul(x, ad.swap_last(self.params[f"{name}.weight"]))
        b = self.params.get(f"{name}.bias")
        if b is not None:
            out = ad.add(out, b)
        delta = hooks.lora_delta(name, x)
        return out if delta is None else ad.add(out, delta)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _attention(self, name: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, hooks) -> Tensor:
        B, S, e = xq.shape
        T = xkv.shape[1]
        H = self.config.n_heads
        dh = e // H

        def heads(t, L):
            return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(self.linear(f"{name}.q_proj", xq, hooks), S)
        k = heads(self.linear(f"{name}.k_proj", xkv, hooks), T)
        v = heads(self.linear(f"{name}.v_proj", xkv, hooks), T)
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dh))
        weights = ad.softmax(ad.add_mask(scores, mask))
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, S, e))
        return self.linear(f"{name}.o_proj", ctx, hooks)

    def _ffn(self, name: str, x: Tensor, hooks) -> Tensor:
        return self.linear(f"{name}.fc2", ad.gelu(self.linear(f"{name}.fc1", x, hooks)), hooks)

    @staticmethod
    def _prepend(prompts, x: Tensor) -> Tensor:
        if prompts is None or prompts.shape[0] == 0:
            return x
        B = x.shape[0]
        return ad.concat([ad.broadcast_to(prompts, (B,) + prompts.shape), x], axis=1)

    # ------------------------------------------------------------ encoder

    def encode(self, features, lengths: Sequence[int] | None = None, prompts: Tensor | None = None,
               hooks=NO_ADAPTER) -> tuple[Tensor, np.ndarray]:
        """Encode a ``(B, l, d_feat)`` batch (or one ``(l, d_feat)`` sequence).

        Returns memory ``(B, n + l, e)`` and a ``(B, n + l)`` validity mask;
        prompt rows occupy ``[0, n)``. ``prompts`` defaults to the hooks'.
        """
        X = np.asarray(features, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[-1] != self.config.d_feat:
            raise ad.ShapeError(
                f"encode: features must be (B, l, {self.config.d_feat}), got {X.shape}")
        B, l, _ = X.shape
        lengths = np.full(B, l) if lengths is None else np.asarray(lengths)
        if prompts is None:
            prompts = hooks.encoder_prompts()
        n = 0 if prompts is None else prompts.shape[0]
        if n + l > self.config.max_source_positions:
            raise ContextLimitError(
                f"encoder context limit: {n} prompts + {l} frames > "
                f"max_source_positions={self.config.max_source_positions}")
        h = self.linear("encoder.frontend", ad.tensor(X), hooks)
        h = ad.add(h, ad.slice_rows(self.params["encoder.pos"], 0, l))
        h = self._prepend(prompts, h)
        valid = np.concatenate([np.ones((B, n), bool), np.arange(l)[None] < lengths[:, None]], 1)
        key_mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]
        for i in range(self.config.n_enc_blocks):
            b = f"encoder.block{i}"
            h = hooks.inject("encoder", i, self._enc_block(b, h, key_mask, hooks))
        return self._norm("encoder.ln_post", h), valid

    def _enc_block(self, b: str, h: Tensor, key_mask, hooks) -> Tensor:
        x = self._norm(f"{b}.attn_ln", h)
        h = ad.add(h, self._attention(f"{b}.attn", x, x, key_mask, hooks))
        return ad.add(h, self._ffn(f"{b}.ffn", self._norm(f"{b}.ffn_ln", h), hooks))

    # ------------------------------------------------------------ decoder

    def check_decoder_context(self, n_prompts: int, n_targets: int) -> None:
        total = n_prompts + N_PREFIX + n_targets
        if total > self.config.max_target_positions:
            raise ContextLimitError(
                f"decoder context limit: {n_prompts} prompts + {N_PREFIX} prefix + "
                f"{n_targets} targets = {total} > "
                f"max_target_positions={self.config.max_target_positions}")

    def decode_forward(self, memory: Tensor, memory_mask: np.ndarray, prefix, targets,
                       prompts: Tensor | None = None, hooks=NO_ADAPTER) -> Tensor:
        """Logits ``(B, n + 4 + T, |V|)`` for decoder rows ``[P'; embed(g); embed(y)]``.

        ``prefix`` is ``(B, 4)`` token ids, ``targets`` ``(B, T)`` (may be T=0).
        """
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        targets = np.asarray(targets, dtype=np.int64).reshape(prefix.shape[0], -1)
        if prefix.shape[1] != N_PREFIX:
            raise ad.ShapeError(f"decode_forward: prefix must have {N_PREFIX} tokens")
        if prompts is None:
            prompts = hooks.decoder_prompts()
        n = 0 if prompts is None else prompts.shape[0]
        self.check_decoder_context(n, targets.shape[1])
        ids = np.concatenate([prefix, targets], axis=1)
        B, L = ids.shape
        h = ad.embedding(self.params["decoder.embed"], ids)
        h = ad.add(h, ad.slice_rows(self.params["decoder.pos"], 0, L))
        h = self._prepend(prompts, h)
        S = n + L
        causal = np.triu(np.full((S, S), MASK_VALUE), k=1)[None, None]
        cross_mask = np.where(memory_mask, 0.0, MASK_VALUE)[:, None, None, :]
        for i in range(self.config.n_dec_blocks):
            b = f"decoder.block{i}"
            x = self._norm(f"{b}.attn_ln", h)
            h = ad.add(h, self._attention(f"{b}.attn", x, x, causal, hooks))
            h = ad.add(h, self._attention(f"{b}.cross", self._norm(f"{b}.cross_ln", h),
                                          memory, cross_mask, hooks))
            h = ad.add(h, self._ffn(f"{b}.ffn", self._norm(f"{b}.ffn_ln", h), hooks))
            h = hooks.inject("decoder", i, h)
        h = self._norm("decoder.ln_post", h)
        return ad.matmul(h, ad.swap_last(self.output_projection))


def build_model(config: ModelConfig) -> WhisperLite:
    return WhisperLite(config)


def greedy_decode(model: WhisperLite, features, lang, hooks=NO_ADAPTER,
                  max_new_tokens: int = 32, lengths=None) -> list[list[int]]:
    """Greedy transcription of a batch; returns text tokens per utterance.

    ``lang`` is one language name or one per utterance. Decoding stops at EOT
    or after ``max_new_tokens``; argmax ties go to the lowest token id.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    B = X.shape[0]
    langs = [lang] * B if isinstance(lang, str) else list(lang)
    tok = model.tokens
    prefix = np.array([build_decoder_prefix(lg, tok) for lg in langs])
    with ad.no_grad():
        memory, mask = model.encode(X, lengths=lengths, hooks=hooks)
        prompts = hooks.decoder_prompts()
        n = 0 if prompts is None else prompts.shape[0]
        budget = model.config.max_target_positions - n - N_PREFIX
        generated = np.zeros((B, 0), dtype=np.int64)
        done = np.zeros(B, bool)
        for _ in range(min(max_new_tokens, budget)):
            logits = model.decode_forward(memory, mask, prefix, generated, prompts=prompts,
                                          hooks=hooks)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, tok.EOT, nxt)
            generated = np.concatenate([generated, nxt[:, None]], axis=1)
            done |= nxt == tok.EOT
            if done.all():
                break
    out = []
    for row in generated:
        seq = []
        for t in row:
            if t == tok.EOT:
                break
            if t < tok.first_special_id:
                seq.append(int(t))
        out.append(seq)
    return out

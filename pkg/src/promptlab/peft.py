"""Soft-prompt adapters, LoRA, and full fine-tuning over a :class:`WhisperLite`.

``attach`` builds the adapter parameters, sets the frozen/trainable
partition of the base model, and returns an :class:`AttachedAdapter` whose
hooks the model calls during forward passes. Parameter counts are available
both from the live objects and from closed-form formulas
(:func:`symbolic_account`); the two must agree exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .model import N_PREFIX, ContextLimitError, ModelConfig, WhisperLite, base_param_count

METHODS = ("FFT", "LoRA", "VanillaSPT", "DPT", "ResPT", "LPT", "SPT4ASR", "WholeModelSPT")
POSITIONS = ("Encoder", "Decoder", "Entire")
PROMPT_METHODS = ("VanillaSPT", "DPT", "ResPT", "LPT", "SPT4ASR", "WholeModelSPT")
DETACHABLE = ("LoRA", "VanillaSPT", "DPT", "ResPT", "LPT", "SPT4ASR")
PROMPT_STD = 0.02


@dataclass
class AdapterSpec:
    method: str = "VanillaSPT"
    position: str = "Entire"
    n_enc: int = 16
    n_dec: int = 16
    n_deep: int | None = None  # None: equal to the prompt length of each side
    respt_bottleneck: int | None = None  # None: d_model // 2
    lpt_hidden: int = 512
    lpt_langs: tuple[str, ...] = ("A", "B")
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = ("q", "v")
    target_budget: int = 130
    seed: int = 0

    def __post_init__(self):
        self.lpt_langs = tuple(self.lpt_langs)
        self.lora_targets = tuple(self.lora_targets)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"AdapterSpec.method must be one of {METHODS}, got {self.method!r}")
        if self.position not in POSITIONS:
            raise ValueError(
                f"AdapterSpec.position must be one of {POSITIONS}, got {self.position!r}")
        for name in ("n_enc", "n_dec", "lpt_hidden", "target_budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"AdapterSpec.{name} must be >= 0")
        if self.method == "LoRA":
            if self.lora_rank < 1 or not self.lora_alpha > 0 or not self.lora_targets:
                raise ValueError("LoRA needs lora_rank >= 1, lora_alpha > 0, nonempty targets")
            bad = set(self.lora_targets) - {"q", "k", "v", "o"}
            if bad:
                raise ValueError(f"AdapterSpec.lora_targets has unknown projections {sorted(bad)}")
        if self.uses_deep:
            for side, n in (("encoder", self.enc_len), ("decoder", self.dec_len)):
                if n and self.deep_len(side) > n:
                    raise ValueError(
                        f"AdapterSpec.n_deep={self.n_deep} exceeds the {side} prompt length {n}")
            if self.n_deep and not (self.enc_len or self.dec_len):
                raise ValueError("deep prompts need vanilla prompt slots; enable n_enc or n_dec")

    # resolved structure ------------------------------------------------
    @property
    def uses_prompts(self) -> bool:
        return self.method in PROMPT_METHODS

    @property
    def uses_deep(self) -> bool:
        return self.method in ("DPT", "SPT4ASR")

    @property
    def uses_respt(self) -> bool:
        return self.method in ("ResPT", "SPT4ASR")

    @property
    def uses_lpt(self) -> bool:
        return self.method in ("LPT", "SPT4ASR")

    @property
    def effective_position(self) -> str:
        return "Entire" if self.method == "SPT4ASR" else self.position

    @property
    def enc_len(self) -> int:
        if not self.uses_prompts or self.effective_position == "Decoder":
            return 0
        return self.n_enc

    @property
    def dec_len(self) -> int:
        if not self.uses_prompts or self.effective_position == "Encoder":
            return 0
        return self.n_dec

    def deep_len(self, side: str) -> int:
        n = self.enc_len if side == "encoder" else self.dec_len
        if not self.uses_deep or n == 0:
            return 0
        return n if self.n_deep is None else self.n_deep

    def bottleneck(self, d_model: int) -> int:
        return d_model // 2 if self.respt_bottleneck is None else self.respt_bottleneck

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lpt_langs"] = list(self.lpt_langs)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        return cls(**d)


@dataclass
class ParamAccount:
    components: dict[str, int] = field(default_factory=dict)
    frozen: int = 0

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def to_dict(self) -> dict:
        return {"components": dict(self.components), "total": self.total, "frozen": self.frozen}


def _lora_modules(config: ModelConfig) -> list[str]:
    mods = [f"encoder.block{i}.attn" for i in range(config.n_enc_blocks)]
    for i in range(config.n_dec_blocks):
        mods += [f"decoder.block{i}.attn", f"decoder.block{i}.cross"]
    return mods


def symbolic_account(config: ModelConfig, spec: AdapterSpec) -> ParamAccount:
    """Closed-form trainable-parameter breakdown (never touches a model)."""
    e = config.d_model
    base = base_param_count(config)
    comps: dict[str, int] = {}
    if spec.method in ("FFT", "WholeModelSPT"):
        comps["base"] = base
    if spec.method == "LoRA":
        r = spec.lora_rank
        comps["lora"] = len(_lora_modules(config)) * len(spec.lora_targets) * (r * e + e * r)
    if spec.uses_prompts:
        comps["vanilla"] = (spec.enc_len + spec.dec_len) * e
    if spec.uses_deep:
        comps["deep"] = (config.n_enc_blocks * spec.deep_len("encoder")
                         + config.n_dec_blocks * spec.deep_len("decoder")) * e
    if spec.uses_respt:
        b = spec.bottleneck(e)
        comps["respt_mlp"] = e * b + b + b * e + e
    if spec.uses_lpt:
        h = spec.lpt_hidden
        comps["lpt_encoder"] = e * h + h + h * e + e
    frozen = 0 if "base" in comps else base
    return ParamAccount({k: v for k, v in comps.items() if v}, frozen)


class LoraLayer:
    """Low-rank update ``(alpha / r) * B @ A`` on a frozen projection."""

    def __init__(self, name: str, d_out: int, d_in: int, rank: int, alpha: float,
                 rng: np.random.Generator):
        self.name = name
        self.A = Parameter(rng.normal(0.0, 0.02, size=(rank, d_in)), f"lora.{name}.A")
        self.B = Parameter(np.zeros((d_out, rank)), f"lora.{name}.B")
        self.scale = alpha / rank

    def delta(self, x: Tensor) -> Tensor:
        return ad.scale(ad.matmul(ad.matmul(x, ad.swap_last(self.A)), ad.swap_last(self.B)),
                        self.scale)


def lora_forward(x: Tensor, weight: Parameter, bias: Parameter | None, layer: LoraLayer) -> Tensor:
    """``x W^T + b + (alpha/r) (x A^T) B^T``."""
    out = ad.matmul(x, ad.swap_last(weight))
    if bias is not None:
        out = ad.add(out, bias)
    return ad.add(out, layer.delta(x))


class ResidualMLP:
    """``x + fc2(gelu(fc1(x)))`` with a zero-initialised output layer."""

    def __init__(self, prefix: str, d: int, hidden: int, rng: np.random.Generator):
        self.fc1_w = Parameter(rng.normal(0.0, 0.02, size=(hidden, d)), f"{prefix}.fc1.weight")
        self.fc1_b = Parameter(np.zeros(hidden), f"{prefix}.fc1.bias")
        self.fc2_w = Parameter(np.zeros((d, hidden)), f"{prefix}.fc2.weight")
        self.fc2_b = Parameter(np.zeros(d), f"{prefix}.fc2.bias")

    def parameters(self) -> list[Parameter]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, ad.swap_last(self.fc1_w)), self.fc1_b))
        return ad.add(x, ad.add(ad.matmul(h, ad.swap_last(self.fc2_w)), self.fc2_b))


class AttachedAdapter:
    """A base model plus one adapter configuration.

    Acts as the hooks object for :class:`WhisperLite` forward passes.
    """

    def __init__(self, model: WhisperLite, spec: AdapterSpec):
        self.model = model
        self.spec = spec
        self.detached = False
        cfg, e = model.config, model.config.d_model
        rng = np.random.default_rng(spec.seed)
        self.P_enc = self.P_dec = None
        self.P_deep: dict[tuple[str, int], Parameter] = {}
        self.respt = self.lang_encoder = None
        self.lora: dict[str, LoraLayer] = {}

        if spec.enc_len:
            self.P_enc = Parameter(rng.normal(0, PROMPT_STD, (spec.enc_len, e)), "prompt.enc")
        if spec.dec_len:
            self.P_dec = Parameter(rng.normal(0, PROMPT_STD, (spec.dec_len, e)), "prompt.dec")
        for side, n_blocks in (("encoder", cfg.n_enc_blocks), ("decoder", cfg.n_dec_blocks)):
            k = spec.deep_len(side)
            if k:
                for i in range(n_blocks):
                    self.P_deep[(side, i)] = Parameter(
                        rng.normal(0, PROMPT_STD, (k, e)), f"prompt.deep.{side}.block{i}")
        if spec.uses_respt:
            self.respt = ResidualMLP("respt", e, spec.bottleneck(e), rng)
        if spec.uses_lpt:
            for lang in spec.lpt_langs:
                model.tokens.lid(lang)
            self.lang_encoder = ResidualMLP("lpt", e, spec.lpt_hidden, rng)
        if spec.method == "LoRA":
            for mod in _lora_modules(cfg):
                for t in spec.lora_targets:
                    name = f"{mod}.{t}_proj"
                    self.lora[name] = LoraLayer(name, e, e, spec.lora_rank, spec.lora_alpha, rng)

        train_base = spec.method in ("FFT", "WholeModelSPT")
        for p in model.parameters():
            p.trainable = train_base

    # ------------------------------------------------------------ parameters
    def adapter_parameters(self) -> list[Parameter]:
        out = [p for p in (self.P_enc, self.P_dec) if p is not None]
        out += list(self.P_deep.values())
        for mlp in (self.respt, self.lang_encoder):
            if mlp is not None:
                out += mlp.parameters()
        for layer in self.lora.values():
            out += [layer.A, layer.B]
        return out

    def parameters(self) -> list[Parameter]:
        return self.model.parameters() + self.adapter_parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def account(self) -> ParamAccount:
        return count_params(self)

    # ------------------------------------------------------------ hooks
    def _reparam(self, P: Parameter) -> Tensor:
        return self.respt(P) if self.respt is not None else P

    def lpt_prompts(self, langs=None) -> Tensor:
        """Language prompt rows: LangEncoder(embedding row of each LID)."""
        langs = self.spec.lpt_langs if langs is None else tuple(langs)
        ids = np.array([self.model.tokens.lid(lg) for lg in langs])
        rows = ad.embedding(self.model.params["decoder.embed"], ids)
        return self.lang_encoder(rows)

    @property
    def n_lang(self) -> int:
        return len(self.spec.lpt_langs) if self.lang_encoder is not None else 0

    def encoder_prompts(self):
        parts = []
        if self.lang_encoder is not None:
            parts.append(self.lpt_prompts())
        if self.P_enc is not None:
            parts.append(self._reparam(self.P_enc))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)

    def decoder_prompts(self):
        return None if self.P_dec is None else self._reparam(self.P_dec)

    def inject(self, side: str, block: int, hidden: Tensor) -> Tensor:
        P = self.P_deep.get((side, block))
        if P is None:
            return hidden
        offset = self.n_lang if side == "encoder" else 0
        return dpt_inject(hidden, self._reparam(P), offset)

    def lora_delta(self, name: str, x: Tensor):
        layer = self.lora.get(name)
        return None if layer is None else layer.delta(x)

    # ------------------------------------------------------------ forward
    def _check_live(self):
        if self.detached:
            raise RuntimeError("adapter has been detached")

    def encode(self, features, lengths=None):
        self._check_live()
        return self.model.encode(features, lengths=lengths, hooks=self)

    def forward(self, features, prefix, targets, lengths=None) -> Tensor:
        memory, mask = self.encode(features, lengths)
        return self.model.decode_forward(memory, mask, prefix, targets, hooks=self)


def dpt_inject(hidden: Tensor, P: Tensor, offset: int = 0) -> Tensor:
    """Overwrite rows ``[offset, offset + n_deep)`` of ``hidden`` with ``P``."""
    k = P.shape[0]
    if k == 0:
        return hidden
    S = hidden.shape[-2]
    if offset + k > S:
        raise ValueError(
            f"deep prompts need {offset + k} prompt slots but the sequence has {S} rows; "
            "enable vanilla prompts on this side")
    B = hidden.shape[0]
    parts = []
    if offset:
        parts.append(ad.slice_rows(hidden, 0, offset))
    parts.append(ad.broadcast_to(P, (B,) + P.shape))
    if offset + k < S:
        parts.append(ad.slice_rows(hidden, offset + k, S))
    return ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def respt_reparam(P, mlp: ResidualMLP) -> Tensor:
    """``MLP(P) + P`` through the shared bottleneck MLP."""
    return mlp(P if isinstance(P, Tensor) else ad.tensor(P))


def check_context(config: ModelConfig, spec: AdapterSpec) -> None:
    total = spec.dec_len + N_PREFIX + spec.target_budget
    if total > config.max_target_positions:
        raise ContextLimitError(
            f"decoder context limit: {spec.dec_len} prompts + {N_PREFIX} prefix + "
            f"{spec.target_budget} target budget = {total} > "
            f"max_target_positions={config.max_target_positions}")


def attach(model: WhisperLite, spec: AdapterSpec) -> AttachedAdapter:
    check_context(model.config, spec)
    return AttachedAdapter(model, spec)


def compose_spt4asr(model: WhisperLite, spec: AdapterSpec | None = None, **overrides) -> AttachedAdapter:
    """Vanilla (Entire) + deep prompts on all blocks + shared ResPT + encoder LPT."""
    spec = AdapterSpec(method="SPT4ASR") if spec is None else spec
    spec = replace(spec, method="SPT4ASR", position="Entire", **overrides)
    return attach(model, spec)


def detach(attached: AttachedAdapter) -> WhisperLite:
    """Drop the adapter and hand back the untouched base model."""
    if attached.spec.method not in DETACHABLE:
        raise ValueError(
            f"cannot detach {attached.spec.method}: its base parameters were trained")
    attached.detached = True
    return attached.model


def count_params(attached: AttachedAdapter) -> ParamAccount:
    """Live enumeration of trainable parameters, grouped like :func:`symbolic_account`."""
    comps: dict[str, int] = {}

    def bump(key, n):
        comps[key] = comps.get(key, 0) + n

    base_names = set(attached.model.params)
    for p in attached.parameters():
        if not p.trainable:
            continue
        n = p.data.size
        if p.name in base_names:
            bump("base", n)
        elif p.name.startswith("lora."):
            bump("lora", n)
        elif p.name in ("prompt.enc", "prompt.dec"):
            bump("vanilla", n)
        elif p.name.startswith("prompt.deep."):
            bump("deep", n)
        elif p.name.startswith("respt."):
            bump("respt_mlp", n)
        elif p.name.startswith("lpt."):
            bump("lpt_encoder", n)
        else:
            raise AssertionError(f"unclassified parameter {p.name}")
    frozen = sum(p.data.size for p in attached.parameters() if not p.trainable)
    order = ["base", "lora", "vanilla", "deep", "respt_mlp", "lpt_encoder"]
    return ParamAccount({k: comps[k] for k in order if k in comps}, frozen)

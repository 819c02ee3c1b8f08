"""Config-driven experiment runs: single training runs, the prompt length x
position grid, the forgetting suite, and preset parameter accounting.

Every run writes a resolved ``config.json`` into its output directory; running
that file again with the same seed reproduces ``results.csv`` byte for byte.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .bench import DatasetConfig, DatasetManifest, gen_dataset, load_manifest
from .forgetting import forgetting_eval, snapshot_model
from .model import ContextLimitError, ModelConfig, WhisperLite, build_model, preset_config
from .peft import METHODS, AdapterSpec, attach, check_context, symbolic_account
from .trainer import OptimizerConfig, evaluate_mer, load_checkpoint, save_checkpoint, train_run

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("train", "sweep", "account", "forgetting")
PARTIAL_MARKER = "PARTIAL_RUN"


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


# ---------------------------------------------------------------- config schema

@dataclass
class DatasetSource:
    """Either a generation config or the path of a saved manifest."""
    config: DatasetConfig | None = None
    manifest: str | None = None

    def to_dict(self) -> dict:
        if self.manifest is not None:
            return {"manifest": self.manifest}
        return self.config.to_dict()


@dataclass
class DataSpec:
    train: DatasetSource = field(default_factory=lambda: DatasetSource(DatasetConfig()))
    dev: dict[str, DatasetSource] = field(
        default_factory=lambda: {"cs": DatasetSource(DatasetConfig(size=80))})

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "dev": {k: v.to_dict() for k, v in self.dev.items()}}


@dataclass
class PretrainConfig:
    """Full fine-tuning from scratch on monolingual data, producing the base model."""
    languages: tuple[str, ...] = ("A", "B", "C")
    size_per_language: int = 300
    seed: int = 11
    checkpoint: str | None = None  # load this PFCK1 base instead of training one
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=1e-3, epochs=12, batch_size=16))

    def to_dict(self) -> dict:
        return {"languages": list(self.languages), "size_per_language": self.size_per_language,
                "seed": self.seed, "checkpoint": self.checkpoint,
                "optimizer": self.optimizer.to_dict()}


@dataclass
class SweepSpec:
    lengths: tuple[int, ...] = (16, 32, 64, 128, 256)
    positions: tuple[str, ...] = ("Encoder", "Decoder", "Entire")
    workers: int = 1

    def to_dict(self) -> dict:
        return {"lengths": list(self.lengths), "positions": list(self.positions),
                "workers": self.workers}


@dataclass
class ForgettingSpec:
    methods: tuple[str, ...] = ("FFT", "LoRA", "SPT4ASR")
    old_tasks: tuple[str, ...] = ("A", "C")
    old_task_size: int = 40
    learning_rates: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"methods": list(self.methods), "old_tasks": list(self.old_tasks),
                "old_task_size": self.old_task_size, "learning_rates": dict(self.learning_rates)}


@dataclass
class ExperimentConfig:
    mode: str = "train"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain: PretrainConfig | None = field(default_factory=PretrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    forgetting: ForgettingSpec = field(default_factory=ForgettingSpec)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "mode": self.mode, "seed": self.seed,
                "model": self.model.to_dict(), "adapter": self.adapter.to_dict(),
                "optimizer": self.optimizer.to_dict(),
                "pretrain": None if self.pretrain is None else self.pretrain.to_dict(),
                "data": self.data.to_dict(), "sweep": self.sweep.to_dict(),
                "forgetting": self.forgetting.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        return _parse_config(doc, Path(base_dir) if base_dir is not None else Path.cwd())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file does not exist: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


def _section(doc, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object, got {type(doc).__name__}")
    return doc


def _build(cls, doc, path: str, **fixed):
    doc = dict(_section(doc, path))
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    try:
        return cls(**{**doc, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _source(doc, path: str, base_dir: Path) -> DatasetSource:
    doc = _section(doc, path)
    if "manifest" in doc:
        if set(doc) != {"manifest"}:
            raise ConfigError(f"{path}: a manifest source takes no other fields")
        p = Path(doc["manifest"])
        p = p if p.is_absolute() else (base_dir / p)
        if not p.exists():
            raise ConfigError(f"{path}.manifest: path does not exist: {p}")
        return DatasetSource(manifest=str(p.resolve()))
    return DatasetSource(config=_build(DatasetConfig, doc, path))


def _parse_config(doc, base_dir: Path) -> ExperimentConfig:
    doc = dict(_section(doc, "config"))
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config.schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    allowed = {f.name for f in fields(ExperimentConfig)} - {"schema_version"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"config.{unknown[0]}: unknown field")
    mode = doc.get("mode", "train")
    if mode not in MODES:
        raise ConfigError(f"config.mode: must be one of {MODES}, got {mode!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"config.seed: must be a non-negative integer, got {seed!r}")
    cfg = ExperimentConfig(mode=mode, seed=seed)
    if "model" in doc:
        cfg.model = _build(ModelConfig, doc["model"], "config.model")
    if "adapter" in doc:
        cfg.adapter = _build(AdapterSpec, doc["adapter"], "config.adapter")
    if "optimizer" in doc:
        cfg.optimizer = _build(OptimizerConfig, doc["optimizer"], "config.optimizer")
    if "pretrain" in doc:
        pre = doc["pretrain"]
        if pre is None:
            cfg.pretrain = None
        else:
            pre = dict(_section(pre, "config.pretrain"))
            opt = pre.pop("optimizer", None)
            cfg.pretrain = _build(PretrainConfig, pre, "config.pretrain")
            cfg.pretrain.languages = tuple(cfg.pretrain.languages)
            if opt is not None:
                cfg.pretrain.optimizer = _build(OptimizerConfig, opt, "config.pretrain.optimizer")
            if cfg.pretrain.checkpoint is not None:
                p = Path(cfg.pretrain.checkpoint)
                p = p if p.is_absolute() else base_dir / p
                if not p.exists():
                    raise ConfigError(f"config.pretrain.checkpoint: path does not exist: {p}")
                cfg.pretrain.checkpoint = str(p.resolve())
            if cfg.pretrain.size_per_language < 1:
                raise ConfigError("config.pretrain.size_per_language: must be >= 1")
    if "data" in doc:
        data = _section(doc["data"], "config.data")
        unknown = sorted(set(data) - {"train", "dev"})
        if unknown:
            raise ConfigError(f"config.data.{unknown[0]}: unknown field")
        spec = DataSpec()
        if "train" in data:
            spec.train = _source(data["train"], "config.data.train", base_dir)
        if "dev" in data:
            dev = _section(data["dev"], "config.data.dev")
            spec.dev = {k: _source(v, f"config.data.dev.{k}", base_dir) for k, v in dev.items()}
        cfg.data = spec
    if "sweep" in doc:
        cfg.sweep = _build(SweepSpec, doc["sweep"], "config.sweep")
        cfg.sweep.lengths = tuple(int(n) for n in cfg.sweep.lengths)
        cfg.sweep.positions = tuple(cfg.sweep.positions)
        if cfg.sweep.workers < 1:
            raise ConfigError("config.sweep.workers: must be >= 1")
    if "forgetting" in doc:
        cfg.forgetting = _build(ForgettingSpec, doc["forgetting"], "config.forgetting")
        cfg.forgetting.methods = tuple(cfg.forgetting.methods)
        cfg.forgetting.old_tasks = tuple(cfg.forgetting.old_tasks)
        for m in cfg.forgetting.methods:
            if m not in METHODS:
                raise ConfigError(f"config.forgetting.methods: unknown method {m!r}")
    if mode == "forgetting" and cfg.pretrain is None:
        raise ConfigError("config.pretrain: forgetting mode needs a pretraining section")
    return cfg


# ---------------------------------------------------------------- results tables

class ResultsTable:
    def __init__(self, columns: list[str], rows: list[dict] | None = None):
        self.columns = list(columns)
        self.rows = list(rows or [])

    def add(self, **row) -> None:
        self.rows.append(row)

    def _cells(self, row) -> list[str]:
        return ["" if row.get(c) is None else str(row.get(c)) for c in self.columns]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow(self._cells(row))
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.columns) + " |",
                 "|" + "|".join("---" for _ in self.columns) + "|"]
        lines += ["| " + " | ".join(self._cells(r)) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str = "results") -> None:
        directory = Path(directory)
        (directory / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (directory / f"{stem}.md").write_text(self.to_markdown(), encoding="utf-8")


def pct(mer: float | None) -> str | None:
    return None if mer is None else f"{100.0 * mer:.2f}"


def signed(x: float) -> str:
    return f"{round(x, 2) + 0.0:+.2f}"


# ---------------------------------------------------------------- data and base model

def _derived_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def load_source(source: DatasetSource, seed: int, split: str) -> DatasetManifest:
    if source.manifest is not None:
        return load_manifest(source.manifest)
    return gen_dataset(source.config, seed, split)


def load_data(cfg: ExperimentConfig):
    train = load_source(cfg.data.train, _derived_seed(cfg.seed, 0), "train")
    dev = {name: load_source(src, _derived_seed(cfg.seed, 1 + k), f"dev-{name}")
           for k, (name, src) in enumerate(sorted(cfg.data.dev.items()))}
    return train, dev


def monolingual(lang: str, size: int, seed: int, split: str, d_feat: int = 16) -> DatasetManifest:
    return gen_dataset(DatasetConfig(languages=(lang,), mix_ratio=(1.0,), switch_prob=0.0,
                                     size=size, d_feat=d_feat), seed, split)


def pretrain_base(model_config: ModelConfig, pretrain: PretrainConfig | None) -> WhisperLite:
    """Base model: random init, a stored checkpoint, or FFT on monolingual data."""
    model = build_model(model_config)
    if pretrain is None:
        return model
    if pretrain.checkpoint is not None:
        state = load_checkpoint(pretrain.checkpoint)
        for name, p in model.params.items():
            if name not in state or state[name].shape != p.data.shape:
                raise ValueError(f"base checkpoint does not match the model at {name}")
            p.data[...] = state[name]
        return model
    utts = []
    for k, lang in enumerate(pretrain.languages):
        utts += list(monolingual(lang, pretrain.size_per_language,
                                 _derived_seed(pretrain.seed, k), f"pre-{lang}",
                                 model_config.d_feat))
    log.info("pretraining base on %s (%d utterances)", ",".join(pretrain.languages), len(utts))
    train_run(attach(model, AdapterSpec(method="FFT")), utts, None, pretrain.optimizer)
    for p in model.parameters():
        p.trainable = True
    return model


def _fresh_base(base: WhisperLite) -> WhisperLite:
    model = copy.deepcopy(base)
    for p in model.parameters():
        p.trainable = True
    return model


def checked_params(attached) -> int:
    """Live trainable count, asserted equal to the closed-form count."""
    live = attached.account().total
    symbolic = symbolic_account(attached.model.config, attached.spec).total
    if live != symbolic:
        raise AssertionError(f"parameter accounting mismatch: live {live} != symbolic {symbolic}")
    return live


# ---------------------------------------------------------------- run modes

def _train_row_columns(dev_names) -> list[str]:
    return (["method", "position", "n_enc", "n_dec"] + [f"mer_{n}" for n in dev_names]
            + ["params", "best_epoch"])


def train_once(base: WhisperLite, spec: AdapterSpec, train, dev: dict, opt: OptimizerConfig,
               out_dir: Path | None = None, stem: str = "best"):
    attached = attach(_fresh_base(base), spec)
    ckpt = None if out_dir is None else out_dir / f"{stem}.pfck"
    report = train_run(attached, list(train), {k: list(v) for k, v in dev.items()}, opt,
                       checkpoint_path=ckpt)
    return attached, report


def _best_mers(report, dev_names) -> dict:
    out = {}
    for name in dev_names:
        series = report.dev_mer.get(name, [])
        idx = report.eval_epochs.index(report.best_epoch) if report.best_epoch in report.eval_epochs else -1
        out[f"mer_{name}"] = pct(series[idx]) if series else None
    return out


def run_train(cfg: ExperimentConfig, out: Path) -> ResultsTable:
    train, dev = load_data(cfg)
    base = pretrain_base(cfg.model, cfg.pretrain)
    spec = replace(cfg.adapter, seed=cfg.seed)
    opt = replace(cfg.optimizer, seed=cfg.seed)
    attached, report = train_once(base, spec, train, dev, opt, out)
    (out / "train_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    names = sorted(dev)
    table = ResultsTable(_train_row_columns(names))
    table.add(method=spec.method, position=spec.effective_position, n_enc=spec.enc_len,
              n_dec=spec.dec_len, params=checked_params(attached), best_epoch=report.best_epoch,
              **_best_mers(report, names))
    return table


def resolve_cell(base_spec: AdapterSpec, model_config: ModelConfig, length: int,
                 position: str) -> AdapterSpec:
    """Adapter for one grid cell.

    ``Entire`` cells whose decoder prompts overflow the decoder context halve
    the decoder length until they fit (256 -> 128 at the default dims).
    ``Decoder`` cells have no such fallback and raise ``ContextLimitError``.
    """
    spec = replace(base_spec, method="VanillaSPT", position=position, n_enc=length,
                   n_dec=length, n_deep=None)
    if position == "Entire":
        while spec.n_dec > 0:
            try:
                check_context(model_config, spec)
                break
            except ContextLimitError:
                spec = replace(spec, n_dec=spec.n_dec // 2)
    check_context(model_config, spec)
    return spec


def _sweep_cell(args):
    cfg, base_state, length, position, out = args
    base = build_model(cfg.model)
    for name, arr in base_state.items():
        base.params[name].data[...] = arr
    names = sorted(cfg.data.dev)
    row = dict(position=position, length=length)
    try:
        spec = resolve_cell(replace(cfg.adapter, seed=cfg.seed), cfg.model, length, position)
    except ContextLimitError as exc:
        row.update(status="N/A", note="decoder context limit", detail=str(exc))
        return row
    row.update(n_enc=spec.enc_len, n_dec=spec.dec_len)
    try:
        train, dev = load_data(cfg)
        cell_dir = Path(out) / "cells" / f"{position}-{length}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        attached, report = train_once(base, spec, train, dev, replace(cfg.optimizer, seed=cfg.seed),
                                      cell_dir)
        (cell_dir / "train_report.json").write_text(json.dumps(report.to_dict(), indent=1))
        row.update(status="ok", params=checked_params(attached), best_epoch=report.best_epoch,
                   **_best_mers(report, names))
    except Exception as exc:  # recorded; the grid continues
        row.update(status="error", note=f"{type(exc).__name__}: {exc}")
    return row


def sweep_table2(cfg: ExperimentConfig, out: Path, base: WhisperLite | None = None) -> ResultsTable:
    """Vanilla prompts over lengths x positions; one row per cell."""
    base = pretrain_base(cfg.model, cfg.pretrain) if base is None else base
    save_checkpoint(out / "base.pfck", base.params)
    state = {k: p.data for k, p in base.params.items()}
    cells = [(cfg, state, n, pos, str(out)) for n in cfg.sweep.lengths for pos in cfg.sweep.positions]
    if cfg.sweep.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.sweep.workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    names = sorted(cfg.data.dev)
    table = ResultsTable(["position", "length", "n_enc", "n_dec", "status"]
                         + [f"mer_{n}" for n in names] + ["params", "best_epoch", "note"])
    for row in rows:
        row.pop("detail", None)
        table.add(**row)
    return table


# Published trainable-parameter figures, in millions.
PUBLISHED_M = {
    "small": {"FFT": 240.58, "LoRA": 1.85, "VanillaSPT": 0.20, "DPT": 1.39, "ResPT": 0.79,
              "LPT": 0.99, "SPT4ASR": 3.74, "WholeModelSPT": 240.69},
    "medium": {"FFT": 762.32, "LoRA": 4.94, "SPT4ASR": 7.48, "WholeModelSPT": 762.59},
}


def preset_spec(method: str) -> AdapterSpec:
    return AdapterSpec(method=method, position="Entire", n_enc=128, n_dec=128, n_deep=64,
                       lpt_hidden=512)


def account_presets() -> ResultsTable:
    """Closed-form trainable counts at the small and medium dims vs published figures."""
    table = ResultsTable(["preset", "method", "trainable", "trainable_M", "published_M",
                          "delta_M", "components"])
    for preset in ("small", "medium"):
        config = preset_config(preset)
        published = PUBLISHED_M[preset]
        counts = {}
        for method in METHODS:
            acc = symbolic_account(config, preset_spec(method))
            counts[method] = acc.total
            ref = published.get(method)
            table.add(preset=preset, method=method, trainable=acc.total,
                      trainable_M=f"{acc.total / 1e6:.2f}",
                      published_M=None if ref is None else f"{ref:.2f}",
                      delta_M=None if ref is None else signed(acc.total / 1e6 - ref),
                      components=";".join(f"{k}={v}" for k, v in acc.components.items()))
        delta = counts["WholeModelSPT"] - counts["FFT"]
        ref = published["WholeModelSPT"] - published["FFT"]
        table.add(preset=preset, method="WholeModelSPT-FFT", trainable=delta,
                  trainable_M=f"{delta / 1e6:.2f}", published_M=f"{ref:.2f}",
                  delta_M=signed(delta / 1e6 - ref), components="prompts only")
    return table


def forgetting_suite(cfg: ExperimentConfig, out: Path | None = None,
                     base: WhisperLite | None = None) -> tuple[ResultsTable, list]:
    """Adapt the pretrained base to the code-switched task with each method and
    re-score the monolingual old tasks."""
    base = pretrain_base(cfg.model, cfg.pretrain) if base is None else base
    train, dev = load_data(cfg)
    fs = cfg.forgetting
    old = {f"old_{lang}": monolingual(lang, fs.old_task_size, _derived_seed(cfg.seed, 100 + k),
                                      f"old-{lang}", cfg.model.d_feat)
           for k, lang in enumerate(fs.old_tasks)}
    new_names = sorted(dev)
    cols = ["method", "params"]
    for name in old:
        cols += [f"{name}_base", f"{name}_adapted", f"{name}_delta"]
    cols += [f"new_{n}" for n in new_names] + ["logits_identical"]
    table = ResultsTable(cols)
    reports = []
    for method in fs.methods:
        spec = replace(cfg.adapter, method=method, seed=cfg.seed)
        lr = fs.learning_rates.get(method, cfg.optimizer.learning_rate)
        opt = replace(cfg.optimizer, seed=cfg.seed, learning_rate=lr)
        base_copy = snapshot_model(base)
        attached, _ = train_once(base, spec, train, {}, opt, out, stem=f"{method}")
        params = checked_params(attached)
        new = {f"new_{n}": pct(evaluate_mer(attached, list(dev[n])).mer) for n in new_names}
        rep = forgetting_eval(base_copy, attached, old)
        reports.append(rep)
        row = dict(method=method, params=params, **new)
        for t in rep.tasks:
            row[f"{t.task}_base"] = pct(t.base_mer)
            row[f"{t.task}_adapted"] = pct(t.adapted_mer)
            row[f"{t.task}_delta"] = signed(100.0 * t.delta)
        ident = [t.logits_identical for t in rep.tasks]
        row["logits_identical"] = "n/a" if ident[0] is None else str(all(ident)).lower()
        table.add(**row)
    return table, reports


# ---------------------------------------------------------------- entry point

def execute(cfg: ExperimentConfig, out) -> Path:
    """Run ``cfg.mode`` into ``out``; a failure leaves a partial-run marker behind."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    marker.write_text(f"mode={cfg.mode} seed={cfg.seed}\nstatus=running\n")
    (out / "config.json").write_text(cfg.to_json())
    try:
        if cfg.mode == "train":
            table = run_train(cfg, out)
        elif cfg.mode == "sweep":
            table = sweep_table2(cfg, out)
        elif cfg.mode == "account":
            table = account_presets()
        else:
            table, reports = forgetting_suite(cfg, out)
            (out / "forgetting_report.json").write_text(
                json.dumps([r.to_dict() for r in reports], indent=1))
        table.write(out)
    except BaseException as exc:
        marker.write_text(f"mode={cfg.mode} seed={cfg.seed}\nstatus=failed\n"
                          f"error={type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        raise
    marker.unlink()
    return out

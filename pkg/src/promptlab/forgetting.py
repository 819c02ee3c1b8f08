"""Re-evaluate old tasks after adaptation."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bench import DatasetManifest
from .model import WhisperLite
from .peft import DETACHABLE, AttachedAdapter, detach
from .trainer import evaluate_mer, make_batch


class ForgettingViolation(AssertionError):
    pass


@dataclass
class TaskResult:
    task: str
    base_mer: float
    adapted_mer: float
    logits_identical: bool | None

    @property
    def delta(self) -> float:
        return self.adapted_mer - self.base_mer


@dataclass
class ForgettingReport:
    method: str
    tasks: list[TaskResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"method": self.method,
                "tasks": [dict(task=t.task, base_mer=t.base_mer, adapted_mer=t.adapted_mer,
                               delta=t.delta, logits_identical=t.logits_identical)
                          for t in self.tasks]}


def snapshot_model(model: WhisperLite) -> WhisperLite:
    """Independent copy of a model, taken before adaptation."""
    return copy.deepcopy(model)


def _logits(model: WhisperLite, manifest: DatasetManifest, batch_size: int = 32):
    out = []
    utts = list(manifest)
    with ad.no_grad():
        for i in range(0, len(utts), batch_size):
            batch = make_batch(utts[i: i + batch_size], model.tokens)
            memory, mask = model.encode(batch.features, batch.lengths)
            out.append(model.decode_forward(memory, mask, batch.prefix, batch.inputs).data)
    return out


def forgetting_eval(base_model: WhisperLite, adapted: AttachedAdapter,
                    old_tasks: dict[str, DatasetManifest], languages=None) -> ForgettingReport:
    """Compare old-task behaviour of the pre-adaptation model and the adapted one.

    Prompt and LoRA adapters are detached first, and their base must then
    produce bit-identical logits; a mismatch raises ``ForgettingViolation``.
    Full fine-tuning variants are scored as-is and only the MER delta is
    reported.
    """
    method = adapted.spec.method
    first_special = base_model.tokens.first_special_id
    for name, manifest in old_tasks.items():
        for u in manifest:
            if any(t >= first_special for t in u.tokens):
                raise ValueError(f"task {name}: utterance {u.id} exceeds the model vocabulary")
    if method in DETACHABLE:
        after = detach(adapted)
    else:
        after = adapted
    report = ForgettingReport(method)
    for name, manifest in old_tasks.items():
        utts = list(manifest)
        base_mer = evaluate_mer(base_model, utts, languages).mer
        adapted_mer = evaluate_mer(after, utts, languages).mer
        identical = None
        if method in DETACHABLE:
            identical = all(np.array_equal(a, b) for a, b in
                            zip(_logits(base_model, manifest), _logits(after, manifest)))
            if not identical or adapted_mer != base_mer:
                raise ForgettingViolation(f"{method}: detached base drifted on task {name}")
        report.tasks.append(TaskResult(name, base_mer, adapted_mer, identical))
    return report

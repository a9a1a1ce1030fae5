"""Run configuration, experiment orchestration and reports.

``run_pipeline`` does bank build, then tuning, then evaluation of the
hand-crafted prompt and the tuned context on clean and attacked test
images, optionally through input-denoising defenses. Sweeps reuse one
session (encoder, data, bank, attacked test images) across conditions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import _container
from .attacks import AttackConfig, bank_attack, eval_attack, pgd_attack_batch
from .bank import AdversarialEmbeddingBank, build_bank, clean_bank, save_bank, verify_provenance
from .defenses import DefenseTransform, apply_defense
from .encoders import EncoderPair, LabeledImageDataset, TokenEmbeddingTable, load_checkpoint
from .errors import AdvPTError, ConfigError, InputError, IntegrityError, StageError
from .prompts import (FIXED_TEMPLATE, PromptContext, TuneConfig, accuracy, encode_prompts,
                      fixed_prompt_embeddings, init_context, save_context, tune)
from .synthetic import DEFAULT_CLASSES, STYLES, SyntheticSpec, render

log = logging.getLogger(__name__)

OUTPUT_ENV = "ADVPT_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class EncoderSource:
    """``checkpoint=None`` means the bundled MiniCLIP."""

    checkpoint: Optional[str] = None
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    """Synthetic renderer settings, or class-per-directory image folders."""

    name: str = "synthetic"
    style: str = "standard"
    classes: Optional[tuple] = None
    texture_amp: Optional[float] = None
    n_train: int = 2000
    n_test: int = 256
    train_seed: int = 5
    test_seed: int = 99
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    template: str = FIXED_TEMPLATE

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"unknown style {self.style!r}")
        if (self.train_dir is None) != (self.test_dir is None):
            raise ConfigError("train_dir and test_dir must be given together")
        if self.train_dir is None and (self.n_train < 1 or self.n_test < 1):
            raise ConfigError("n_train and n_test must be positive")
        if "{}" not in self.template:
            raise ConfigError("template must contain '{}'")
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(tuple(c) for c in self.classes))


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderSource = EncoderSource()
    data: DataConfig = DataConfig()
    bank_attack: AttackConfig = field(default_factory=bank_attack)
    eval_attack: AttackConfig = field(default_factory=lambda: eval_attack(seed=1_000_000))
    tune: TuneConfig = TuneConfig()
    defenses: tuple = (DefenseTransform(),)
    output: Optional[str] = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "encoder": dataclasses.asdict(self.encoder),
            "data": {k: (list(map(list, v)) if k == "classes" and v is not None else v)
                     for k, v in dataclasses.asdict(self.data).items()},
            "bank_attack": self.bank_attack.to_dict(),
            "eval_attack": self.eval_attack.to_dict(),
            "tune": self.tune.to_dict(),
            "defenses": [d.to_dict() for d in self.defenses],
            "output": self.output,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            kw = {}
            if "encoder" in d:
                kw["encoder"] = EncoderSource(**(d["encoder"] or {}))
            if "data" in d:
                kw["data"] = DataConfig(**(d["data"] or {}))
            if "bank_attack" in d:
                kw["bank_attack"] = bank_attack(**(d["bank_attack"] or {}))
            if "eval_attack" in d:
                kw["eval_attack"] = eval_attack(**{"seed": 1_000_000, **(d["eval_attack"] or {})})
            if "tune" in d:
                kw["tune"] = TuneConfig.from_dict(d["tune"] or {})
            if "defenses" in d:
                kw["defenses"] = tuple(DefenseTransform.from_dict(x) for x in (d["defenses"] or [{}]))
            for k in ("output", "seed"):
                if k in d:
                    kw[k] = d[k]
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output location is excluded."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(_canonical(d).encode()).hexdigest()[:16]

    def output_dir(self) -> Path:
        return Path(self.output) if self.output else default_output_dir()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path) -> RunConfig:
    """Read a YAML or JSON run config."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return RunConfig.from_dict(data)


def write_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


# --------------------------------------------------------------------------
# data

def load_image_folder(root, image_size: int) -> LabeledImageDataset:
    """Class-per-directory images, resized to ``image_size`` and scaled to [0, 1].

    Directory names become class names with underscores read as spaces.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for k, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}:
                continue
            with Image.open(f) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(k)
    if not images:
        raise InputError(f"no images found under {root}")
    return LabeledImageDataset(torch.from_numpy(np.stack(images)), torch.tensor(labels),
                               [c.replace("_", " ") for c in classes])


def synthetic_spec(data: DataConfig, image_size: int, renderer: dict, style: Optional[str] = None) -> SyntheticSpec:
    params = dict(renderer)
    if data.texture_amp is not None:
        params["texture_amp"] = data.texture_amp
    return SyntheticSpec(classes=data.classes or DEFAULT_CLASSES, image_size=image_size,
                         style=style or data.style, **params)


def _rendered(spec: SyntheticSpec, n: int, seed: int) -> LabeledImageDataset:
    r = render(spec, n, seed)
    return LabeledImageDataset(r.images, r.labels, r.class_names)


# --------------------------------------------------------------------------
# reports

@dataclass
class EvaluationReport:
    """Result rows plus run metadata. ``artifacts`` holds in-memory outputs
    (contexts, banks) of the run and is not serialized."""

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def add(self, **row) -> None:
        for k in ("clean_acc", "robust_acc"):
            v = row.get(k)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")
        if row.get("clean_acc") is not None and row.get("robust_acc") is not None and row["robust_acc"] > row["clean_acc"]:
            warnings.warn(f"robust accuracy exceeds clean accuracy for {row.get('prompt_kind')} "
                          f"({row['robust_acc']:.3f} > {row['clean_acc']:.3f})", stacklevel=2)
        self.rows.append(row)

    def find(self, **match) -> dict:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(list(d["rows"]), dict(d["metadata"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvaluationReport):
            return NotImplemented
        return _canonical(self.to_dict()) == _canonical(other.to_dict())


def percent(x: Optional[float]) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def format_table(report: EvaluationReport) -> str:
    """One line per (prompt kind, extra key, defense, metric); datasets as columns."""
    datasets = list(dict.fromkeys(r["dataset"] for r in report.rows))
    extra_keys = [k for k in ("M", "objective") if any(k in r for r in report.rows)]
    lines: dict[tuple, dict] = {}
    for r in report.rows:
        head = (r["prompt_kind"], *(str(r.get(k, "")) for k in extra_keys), r.get("defense", "none"))
        lines.setdefault(head + ("clean",), {})[r["dataset"]] = r.get("clean_acc")
        lines.setdefault(head + (r.get("attack", "attack"),), {})[r["dataset"]] = r.get("robust_acc")
    header = ["prompt", *extra_keys, "defense", "metric", *datasets]
    body = [[*key, *(percent(vals.get(d)) for d in datasets)] for key, vals in lines.items()]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = lambda row: "  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()
    out = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    meta = report.metadata
    if meta:
        out.append("")
        out.append(f"config {meta.get('config_hash', '?')}  theta {str(meta.get('theta_sha256', '?'))[:12]}"
                   f"  wall {meta.get('wall_time', 0):.1f}s  complete {meta.get('complete', True)}")
    return "\n".join(out) + "\n"


def emit_report(report: EvaluationReport, path, fmt: str = "json") -> Path:
    """Write ``json`` (lossless rows + metadata) or ``table`` (percent, one decimal)."""
    path = Path(path)
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "table":
        text = format_table(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path) -> EvaluationReport:
    try:
        return EvaluationReport.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read report {path}: {exc}") from exc


# --------------------------------------------------------------------------
# orchestration

def attack_label(cfg: AttackConfig) -> str:
    return f"PGD-{cfg.iterations}" if cfg.objective == "kl_embedding" else f"CE-PGD-{cfg.iterations}"


class Session:
    """Encoder, data and cached intermediate artifacts shared by one experiment."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.timings: dict[str, float] = {}
        with self.stage("load"):
            self.pair, self.table, self.renderer = _load_encoder(config.encoder)
            self.train, self.test = self._datasets(config.data.style)
        self.class_names = list(self.train.class_names)
        self._test_adv: dict[str, torch.Tensor] = {}
        self._bank: Optional[AdversarialEmbeddingBank] = None
        self._clean_bank: Optional[AdversarialEmbeddingBank] = None
        self.fixed_T = fixed_prompt_embeddings(self.pair, self.table, self.class_names, config.data.template)

    def stage(self, name: str):
        return _Stage(self, name)

    def _datasets(self, style: str):
        d = self.config.data
        if d.train_dir is not None:
            size = self.pair.image_shape[-1]
            return load_image_folder(d.train_dir, size), load_image_folder(d.test_dir, size)
        spec = synthetic_spec(d, self.pair.image_shape[-1], self.renderer, style)
        return _rendered(spec, d.n_train, d.train_seed), _rendered(spec, d.n_test, d.test_seed)

    def test_set(self, style: str) -> LabeledImageDataset:
        if style == self.config.data.style:
            return self.test
        if self.config.data.train_dir is not None:
            raise ConfigError("style shifts are only available for synthetic data")
        d = self.config.data
        return _rendered(synthetic_spec(d, self.pair.image_shape[-1], self.renderer, style), d.n_test, d.test_seed)

    def bank(self) -> AdversarialEmbeddingBank:
        if self._bank is None:
            with self.stage("bank"):
                self._bank = build_bank(self.pair, self.train, self.config.bank_attack)
        return self._bank

    def clean_bank(self) -> AdversarialEmbeddingBank:
        if self._clean_bank is None:
            with self.stage("clean_bank"):
                self._clean_bank = clean_bank(self.pair, self.train)
        return self._clean_bank

    def adversarial_test(self, style: Optional[str] = None) -> tuple[LabeledImageDataset, torch.Tensor]:
        style = style or self.config.data.style
        data = self.test_set(style)
        if style not in self._test_adv:
            with self.stage(f"attack_test[{style}]"):
                self._test_adv[style] = pgd_attack_batch(self.pair, data.images, data.labels,
                                                         self.config.eval_attack).adversarials
        return data, self._test_adv[style]

    def tune(self, bank: AdversarialEmbeddingBank, M: Optional[int] = None) -> tuple[PromptContext, list]:
        cfg = self.config.tune
        ctx = init_context(self.table, self.class_names, M or cfg.context_length, self.config.seed)
        verify_provenance(bank, self.pair)
        before = dict(self.pair.calls)
        with self.stage("tune" if M is None else f"tune[M={M}]"):
            ctx, trace = tune(ctx, bank, self.pair, cfg)
        if dict(self.pair.calls) != before:
            raise IntegrityError("the image encoder was invoked during prompt tuning")
        return ctx, trace

    def evaluate(self, report: EvaluationReport, prompt_kind: str, T: torch.Tensor, style: Optional[str] = None,
                 dataset: Optional[str] = None, **extra) -> None:
        data, adv = self.adversarial_test(style)
        for d in self.config.defenses:
            with self.stage("evaluate"):
                clean = accuracy(self.pair.encode_image(apply_defense(d, data.images)), T, data.labels)
                robust = accuracy(self.pair.encode_image(apply_defense(d, adv)), T, data.labels)
            report.add(dataset=dataset or self.dataset_name(style), prompt_kind=prompt_kind,
                       attack=attack_label(self.config.eval_attack), defense=d.name,
                       clean_acc=clean, robust_acc=robust, config_hash=self.config.config_hash(), **extra)

    def dataset_name(self, style: Optional[str] = None) -> str:
        style = style or self.config.data.style
        name = self.config.data.name
        return name if style == "standard" else f"{name}-{style}"

    def metadata(self, t0: float, complete: bool = True) -> dict:
        cfg = self.config
        return {
            "config_hash": cfg.config_hash(),
            "theta_sha256": self.pair.theta_hash(),
            "seeds": {"run": cfg.seed, "tune": cfg.tune.seed, "bank_attack": cfg.bank_attack.seed,
                      "eval_attack": cfg.eval_attack.seed, "train": cfg.data.train_seed, "test": cfg.data.test_seed},
            "wall_time": time.time() - t0,
            "timings": dict(self.timings),
            "complete": complete,
        }


class _Stage:
    def __init__(self, session: Session, name: str):
        self.session, self.name = session, name

    def __enter__(self):
        self.t0 = time.time()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.session.timings[self.name] = self.session.timings.get(self.name, 0.0) + time.time() - self.t0
        if exc is not None and isinstance(exc, Exception) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _load_encoder(src: EncoderSource):
    if src.checkpoint is None:
        from .miniclip import load_bundled

        ck = load_bundled()
    else:
        ck = load_checkpoint(src.checkpoint)
    return ck.pair, ck.table, dict(ck.extra.get("synthetic", {}))


def _finish(session: Session, report: EvaluationReport, t0: float, name: str, artifacts: dict | None = None,
            write: bool = True, **metadata) -> EvaluationReport:
    report.metadata = {**session.metadata(t0), **metadata}
    report.artifacts.update(artifacts or {})
    if write:
        out = session.config.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        for fname, obj in (artifacts or {}).items():
            if isinstance(obj, PromptContext):
                save_context(obj, out / fname)
            elif isinstance(obj, AdversarialEmbeddingBank):
                save_bank(obj, out / fname)
        write_config(session.config, out / "config.yaml")
        emit_report(report, out / f"{name}.json", "json")
        emit_report(report, out / f"{name}.txt", "table")
    return report


def _mark_incomplete(config: RunConfig, name: str, exc: BaseException) -> None:
    try:
        out = config.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        write_config(config, out / "config.yaml")
        status = {"complete": False, "stage": getattr(exc, "stage", None), "error": str(exc)}
        (out / f"{name}.incomplete.json").write_text(json.dumps(status, indent=2, sort_keys=True) + "\n")
    except OSError:
        pass


def _guarded(name: str):
    def wrap(fn):
        def inner(config: RunConfig, *args, write: bool = True, **kw):
            try:
                return fn(config, *args, write=write, **kw)
            except AdvPTError as exc:
                if write:
                    _mark_incomplete(config, name, exc)
                raise
        inner.__name__, inner.__doc__ = fn.__name__, fn.__doc__
        return inner
    return wrap


@_guarded("report")
def run_pipeline(config: RunConfig, write: bool = True, session: Optional[Session] = None) -> EvaluationReport:
    """Bank build, tuning, then clean/robust evaluation of the fixed and tuned prompts."""
    t0 = time.time()
    s = session or Session(config)
    bank = s.bank()
    ctx, trace = s.tune(bank)
    report = EvaluationReport()
    s.evaluate(report, "fixed", s.fixed_T)
    with torch.no_grad():
        s.evaluate(report, "advpt", encode_prompts(ctx, s.pair))
    return _finish(s, report, t0, "report", {"bank.bin": bank, "context.bin": ctx}, write, loss_trace=trace)


@_guarded("report")
def evaluate_context(config: RunConfig, ctx: PromptContext, write: bool = True,
                     session: Optional[Session] = None) -> EvaluationReport:
    """Evaluate the fixed prompt and an already tuned context."""
    t0 = time.time()
    s = session or Session(config)
    if ctx.dim != s.pair.token_dim:
        raise ConfigError(f"context dim {ctx.dim} does not match encoder token dim {s.pair.token_dim}")
    report = EvaluationReport()
    s.evaluate(report, "fixed", s.fixed_T)
    with torch.no_grad():
        s.evaluate(report, "advpt", encode_prompts(ctx, s.pair))
    return _finish(s, report, t0, "report", None, write)


@_guarded("tradeoff")
def tradeoff_sweep(config: RunConfig, write: bool = True, session: Optional[Session] = None) -> EvaluationReport:
    """Tune once on the adversarial bank and once on clean embeddings; report both."""
    t0 = time.time()
    s = session or Session(config)
    report = EvaluationReport()
    s.evaluate(report, "fixed", s.fixed_T)
    contexts = {}
    for kind, bank in (("advpt", s.bank()), ("clean_tune", s.clean_bank())):
        ctx, _ = s.tune(bank)
        contexts[kind] = ctx
        with torch.no_grad():
            s.evaluate(report, kind, encode_prompts(ctx, s.pair))
    return _finish(s, report, t0, "tradeoff", {f"context_{k}.bin": c for k, c in contexts.items()}, write)


@_guarded("m_sweep")
def m_sweep(config: RunConfig, values: Sequence[int], write: bool = True, session: Optional[Session] = None) -> EvaluationReport:
    """One tuned context per context length M; robust accuracy recorded per M."""
    unique = list(dict.fromkeys(int(m) for m in values))
    if len(unique) != len(values):
        warnings.warn(f"duplicate context lengths removed: {list(values)} -> {unique}", stacklevel=3)
    if not unique or min(unique) < 1:
        raise ConfigError("context lengths must be >= 1")
    t0 = time.time()
    s = session or Session(config)
    report = EvaluationReport()
    bank = s.bank()
    for M in unique:
        ctx, _ = s.tune(bank, M)
        with torch.no_grad():
            s.evaluate(report, "advpt", encode_prompts(ctx, s.pair), M=M)
    return _finish(s, report, t0, "m_sweep", None, write)


def domain_shift_eval(session: Session, ctx: PromptContext, styles: Sequence[str]) -> EvaluationReport:
    """Evaluate a context tuned on the source style against shifted synthetic renderers."""
    report = EvaluationReport()
    for name in ctx.class_names:
        session.table.indices(name)
    with torch.no_grad():
        T = encode_prompts(ctx, session.pair)
    for style in styles:
        if style not in STYLES:
            raise ConfigError(f"unknown style {style!r}; expected one of {STYLES}")
        session.evaluate(report, "fixed", session.fixed_T, style)
        session.evaluate(report, "advpt", T, style)
    return report


@_guarded("shift")
def run_shift(config: RunConfig, styles: Sequence[str] = ("standard", "jitter", "sketch"), write: bool = True,
              session: Optional[Session] = None, ctx: Optional[PromptContext] = None) -> EvaluationReport:
    t0 = time.time()
    s = session or Session(config)
    if ctx is None:
        ctx, _ = s.tune(s.bank())
    report = domain_shift_eval(s, ctx, styles)
    return _finish(s, report, t0, "shift", {"context.bin": ctx}, write)


# --------------------------------------------------------------------------
# interpretation

def nearest_words(ctx_or_V, table: TokenEmbeddingTable, top_n: int = 5) -> list[list[tuple[str, float]]]:
    """For each context vector, the ``top_n`` vocab words by Euclidean distance
    (ties broken by vocab order)."""
    V = ctx_or_V.V if isinstance(ctx_or_V, PromptContext) else ctx_or_V
    if len(table) == 0:
        raise InputError("empty vocabulary")
    if V.shape[1] != table.dim:
        raise InputError(f"context dim {V.shape[1]} does not match table dim {table.dim}")
    E = table.embeddings.double()
    out = []
    for v in V.double():
        dist = (E - v).pow(2).sum(1).sqrt().numpy()
        order = np.lexsort((np.arange(len(dist)), dist))[:top_n]
        out.append([(table.vocab[i], float(dist[i])) for i in order])
    return out


def format_nearest(words: list[list[tuple[str, float]]]) -> str:
    return "\n".join(f"v{m + 1}: " + " ".join(f"{w}({d:.4f})" for w, d in row) for m, row in enumerate(words)) + "\n"

"""Run configuration, training loop, evaluation and ablation driver.

A run is described by one JSON-serializable RunConfig.  The mode field picks
which loss components exist at all: RD reconstructs only, GNL adds the two
view-consistency terms, DISCO swaps reconstruction for compensated alignment,
DISCO+DIIFI adds the cross-level regression and FICO the compensation-signal
consistency.  Modules a mode does not use are never instantiated, and
inference never touches the training-only chain.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from fico import checkpoint as ckpt
from fico import losses
from fico.data import CategoryIndex, index_category, load_image
from fico.diifi import DiIFiChain, loss_mse, loss_nor
from fico.disco import DiSCoStack, loss_co
from fico.errors import ConfigError, TrainingDiverged
from fico.eval import ScoredSample, anomaly_map, build_report, image_score, save_heatmap_png
from fico.model import BottleneckOCBE, StudentNet, TeacherNet
from fico.shift import AugmentPolicy, StyleBank, build_style_bank, make_views, tta_adapt

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

SCHEMA_VERSION = 1

DISCO_MODES = ("DISCO", "DISCO+DIIFI", "FICO")
DIIFI_MODES = ("DISCO+DIIFI", "FICO")
VIEW_MODES = ("GNL", "DISCO", "DISCO+DIIFI", "FICO")
ABLATION_MODES = ("GNL", "DISCO", "DISCO+DIIFI", "FICO")


@dataclass(slots=True)
class RunConfig:
    """Everything one training or evaluation run depends on."""

    schema_version: int = SCHEMA_VERSION
    mode: str = "FICO"
    seed: int = 0
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 0.005
    alpha: float = 0.05
    beta: float = 0.02
    gamma: float = 1.0
    m_blocks: int = 4
    k_levels: int = 3
    n_views: int = 2
    base_channels: int = 16
    image_size: int = 64
    tta_lambda: float = 0.8
    smooth_sigma: float = 4.0
    score_rule: str = "max"
    topk_fraction: float = 0.01
    dataset_root: str = ""
    category: str = ""
    teacher_path: str = ""
    scenarios: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.mode not in losses.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {losses.MODES}")
        for name, low in (("epochs", 1), ("batch_size", 1), ("m_blocks", 1), ("k_levels", 2),
                          ("n_views", 1), ("base_channels", 1)):
            if getattr(self, name) < low:
                raise ConfigError(f"{name} must be >= {low}, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.tta_lambda <= 1.0:
            raise ConfigError(f"tta_lambda must be in [0, 1], got {self.tta_lambda}")
        if self.score_rule not in ("max", "topk_mean"):
            raise ConfigError(f"unknown score_rule {self.score_rule!r}")
        grid = 2 ** (self.k_levels + 1)
        if self.image_size % grid:
            raise ConfigError(f"image_size {self.image_size} must be divisible by {grid}")

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**payload)
        cfg.scenarios = dict(cfg.scenarios)
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        return cls.from_dict(payload)

    def save_json(self, path: str | Path) -> None:
        ckpt.atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=1))

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()


def save_teacher(path: str | Path, teacher: TeacherNet, metrics: dict) -> Path:
    extra = {
        "kind": "teacher",
        "base_channels": teacher.base_channels,
        "k_levels": teacher.k_levels,
        **metrics,
    }
    return ckpt.save_checkpoint(path, ckpt.module_arrays(teacher, "teacher"), extra)


def load_teacher(path: str | Path) -> tuple[TeacherNet, ckpt.CheckpointReader]:
    reader = ckpt.CheckpointReader(path)
    extra = reader.extra
    teacher = TeacherNet(
        base_channels=int(extra["base_channels"]), k_levels=int(extra["k_levels"])
    )
    ckpt.load_module(reader, teacher, "teacher")
    teacher.freeze()
    return teacher, reader


@dataclass(slots=True)
class Pipeline:
    """Model parts of one run; training-only parts may be None."""

    config: RunConfig
    teacher: TeacherNet
    bottleneck: BottleneckOCBE
    student: StudentNet
    disco: DiSCoStack | None = None
    diifi: DiIFiChain | None = None

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = list(self.bottleneck.parameters()) + list(self.student.parameters())
        if self.disco is not None:
            params += list(self.disco.parameters())
        if self.diifi is not None:
            params += list(self.diifi.parameters())
        return params

    def train_mode(self) -> None:
        # The frozen teacher ignores train(); everything else toggles normally.
        self.bottleneck.train()
        self.student.train()
        if self.disco is not None:
            self.disco.train()
        if self.diifi is not None:
            self.diifi.train()

    def eval_mode(self) -> None:
        self.bottleneck.eval()
        self.student.eval()
        if self.disco is not None:
            self.disco.eval()
        if self.diifi is not None:
            self.diifi.eval()


def build_pipeline(config: RunConfig, teacher: TeacherNet, with_diifi: bool = True) -> Pipeline:
    """Instantiate exactly the modules the config's mode requires."""
    if teacher.base_channels != config.base_channels or teacher.k_levels != config.k_levels:
        raise ConfigError(
            f"teacher geometry ({teacher.base_channels}, {teacher.k_levels}) does not match "
            f"config ({config.base_channels}, {config.k_levels})"
        )
    torch.manual_seed(config.seed)
    bottleneck = BottleneckOCBE(config.base_channels, config.k_levels)
    student = StudentNet(config.base_channels, config.k_levels)
    disco = None
    diifi = None
    if config.mode in DISCO_MODES:
        disco = DiSCoStack(config.base_channels, config.k_levels, config.m_blocks)
    if with_diifi and config.mode in DIIFI_MODES:
        diifi = DiIFiChain(config.base_channels, config.k_levels)
    return Pipeline(config, teacher, bottleneck, student, disco, diifi)


def step_losses(
    pipeline: Pipeline,
    x: torch.Tensor,
    views: Sequence[torch.Tensor],
) -> losses.LossBreakdown:
    """Forward one batch (and its views) and compute the mode's components."""
    cfg = pipeline.config
    mode = cfg.mode
    parts = losses.LossBreakdown()
    with torch.no_grad():
        t_levels = pipeline.teacher(x)
        t_views = [pipeline.teacher(v) for v in views] if mode in VIEW_MODES else []
    phi = pipeline.bottleneck(t_levels)
    d_levels = pipeline.student(phi)
    if mode in ("RD", "GNL"):
        parts.l_rd = losses.loss_rd(t_levels, d_levels)
    if mode in VIEW_MODES:
        phi_views = [pipeline.bottleneck(tv) for tv in t_views]
        d_views = [pipeline.student(pv) for pv in phi_views]
        parts.l_abs = losses.loss_abs(phi, phi_views)
        parts.l_lowf = losses.loss_lowf(d_levels[0], [dv[0] for dv in d_views])
    if mode in DISCO_MODES:
        signals = pipeline.disco.signals(d_levels)
        comp = [s + f for s, f in zip(signals, d_levels)]
        view_signals = [pipeline.disco.signals(dv) for dv in d_views]
        comp_views = [[s + f for s, f in zip(sv, dv)] for sv, dv in zip(view_signals, d_views)]
        parts.l_co = loss_co(t_levels, comp, t_views, comp_views, cfg.alpha)
        if mode in DIIFI_MODES:
            chain_out = pipeline.diifi(signals[0])
            chain_views = [pipeline.diifi(sv[0]) for sv in view_signals]
            parts.l_mse = loss_mse(
                signals[1:], chain_out, [sv[1:] for sv in view_signals], chain_views
            )
        if mode == "FICO":
            parts.l_nor = loss_nor(signals[0], [sv[0] for sv in view_signals])
    return parts


@dataclass(slots=True)
class TrainResult:
    checkpoint_path: Path
    trajectory: list[dict]
    teacher_digest_start: str
    teacher_digest_end: str
    config: RunConfig


def _load_images(paths: Sequence[Path]) -> np.ndarray:
    return np.stack([load_image(p) for p in paths])


def train(config: RunConfig, out_dir: str | Path) -> TrainResult:
    """Train one category with the config's mode; writes checkpoint + trajectory.

    Raises:
        TrainingDiverged: a loss component became non-finite.
        ConfigError / DatasetLayoutError: inputs malformed.
    """
    out = Path(out_dir)
    index = index_category(config.dataset_root, config.category)
    teacher, _ = load_teacher(config.teacher_path)
    pipeline = build_pipeline(config, teacher)
    pipeline.train_mode()

    digest_start = ckpt.module_digest(teacher, "teacher")
    images = _load_images(index.train_good)
    if images.shape[-1] != config.image_size or images.shape[-2] != config.image_size:
        raise ConfigError(
            f"dataset images are {images.shape[-2]}x{images.shape[-1]}, "
            f"config says {config.image_size}"
        )
    policy = AugmentPolicy(n_views=config.n_views, seed=config.seed)
    needs_views = config.mode in VIEW_MODES

    opt = torch.optim.Adam(
        pipeline.trainable_parameters(),
        lr=config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )
    weights = config.weights()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    trajectory: list[dict] = []
    step = 0
    n = len(index.train_good)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = torch.from_numpy(images[idx])
            views: list[torch.Tensor] = []
            if needs_views:
                # View streams key on (seed, epoch-folded image index, view).
                per_image = [
                    make_views(images[i], policy, index=epoch * n + int(i)) for i in idx
                ]
                views = [
                    torch.from_numpy(np.stack([pv[v] for pv in per_image]))
                    for v in range(config.n_views)
                ]
            parts = step_losses(pipeline, x, views)
            value = losses.total(config.mode, parts, weights)
            record = {"step": step, "epoch": epoch, **parts.present(), "total": float(value.detach())}
            for name, comp_value in record.items():
                if name in ("step", "epoch"):
                    continue
                if not math.isfinite(comp_value):
                    raise TrainingDiverged(f"{name} became non-finite at step {step}")
            opt.zero_grad()
            value.backward()
            opt.step()
            trajectory.append(record)
            step += 1

    digest_end = ckpt.module_digest(teacher, "teacher")
    if digest_end != digest_start:
        raise TrainingDiverged("teacher weights changed during training")

    arrays = ckpt.module_arrays(teacher, "teacher")
    arrays.update(ckpt.module_arrays(pipeline.bottleneck, "bottleneck"))
    arrays.update(ckpt.module_arrays(pipeline.student, "student"))
    if pipeline.disco is not None:
        arrays.update(ckpt.module_arrays(pipeline.disco, "disco"))
    if pipeline.diifi is not None:
        arrays.update(ckpt.module_arrays(pipeline.diifi, "diifi"))
    extra = {
        "kind": "run",
        "mode": config.mode,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "teacher_digest": digest_end,
        "final_total": trajectory[-1]["total"] if trajectory else None,
    }
    ckpt_path = ckpt.save_checkpoint(out / "checkpoint", arrays, extra)
    ckpt.atomic_write_text(out / "trajectory.json", json.dumps(trajectory, indent=1))
    config.save_json(out / "config.json")
    return TrainResult(ckpt_path, trajectory, digest_start, digest_end, config)


@dataclass(slots=True)
class EvalResult:
    config: RunConfig
    samples: dict[str, list[ScoredSample]]  # scenario -> samples
    aurocs: dict[str, float]
    report: dict | None = None


def load_inference_pipeline(
    checkpoint_path: str | Path,
) -> tuple[Pipeline, ckpt.CheckpointReader]:
    """Rebuild the inference model from a run checkpoint.

    The training-only chain is never instantiated and its weights are never
    read; the reader's access log proves it.
    """
    reader = ckpt.CheckpointReader(checkpoint_path)
    if reader.extra.get("kind") != "run":
        raise ConfigError(f"{checkpoint_path} is not a run checkpoint")
    config = RunConfig.from_dict(reader.extra["config"])
    teacher = TeacherNet(config.base_channels, config.k_levels)
    ckpt.load_module(reader, teacher, "teacher")
    teacher.freeze()
    pipeline = build_pipeline(config, teacher, with_diifi=False)
    ckpt.load_module(reader, pipeline.bottleneck, "bottleneck")
    ckpt.load_module(reader, pipeline.student, "student")
    if pipeline.disco is not None:
        ckpt.load_module(reader, pipeline.disco, "disco")
    pipeline.eval_mode()
    return pipeline, reader


def score_image(
    pipeline: Pipeline, image: np.ndarray, bank: StyleBank | None, lam: float
) -> np.ndarray:
    """Anomaly map for one image; test-time adaptation when lam > 0."""
    cfg = pipeline.config
    x = torch.from_numpy(np.ascontiguousarray(image)).unsqueeze(0)
    with torch.no_grad():
        t_levels = pipeline.teacher(x)
        if lam > 0 and bank is not None:
            t_levels = tta_adapt(pipeline.teacher, t_levels, bank, lam)
        phi = pipeline.bottleneck(t_levels)
        d_levels = pipeline.student(phi)
        if pipeline.disco is not None:
            d_levels = pipeline.disco.compensate_pyramid(d_levels)
        t_single = [t[0] for t in t_levels]
        d_single = [d[0] for d in d_levels]
    return anomaly_map(
        t_single, d_single, out_size=(image.shape[-2], image.shape[-1]), smooth_sigma=cfg.smooth_sigma
    )


def evaluate(
    checkpoint_path: str | Path,
    scenarios: Mapping[str, str] | None = None,
    lam: float | None = None,
    out_dir: str | Path | None = None,
    write_maps: bool = True,
) -> EvalResult:
    """Score every scenario's test split with one trained checkpoint.

    Args:
        scenarios: scenario name -> dataset root; defaults to the config's.
        lam: test-time adaptation strength; defaults to the config's.
        out_dir: when given, scores, heatmaps and the report land there.
    """
    pipeline, reader = load_inference_pipeline(checkpoint_path)
    config = pipeline.config
    scenario_map = dict(scenarios if scenarios is not None else config.scenarios)
    if not scenario_map:
        raise ConfigError("no scenarios given; nothing to evaluate")
    lam = config.tta_lambda if lam is None else lam
    for name, root in scenario_map.items():
        if not (Path(root) / config.category).is_dir():
            raise ConfigError(f"scenario dataset missing: {name} at {root}")

    bank = None
    if lam > 0:
        train_index = index_category(config.dataset_root, config.category)
        bank = build_style_bank(
            pipeline.teacher, (load_image(p) for p in train_index.train_good), lam
        )

    out = Path(out_dir) if out_dir is not None else None
    samples: dict[str, list[ScoredSample]] = {}
    aurocs: dict[str, float] = {}
    from fico.eval import scenario_auroc
    for name, root in scenario_map.items():
        index = index_category(root, config.category)
        scored = []
        for sample in index.test:
            amap = score_image(pipeline, load_image(sample.path), bank, lam)
            score = image_score(amap, config.score_rule, config.topk_fraction)
            scored.append(ScoredSample(sample.sample_id, score, sample.label))
            if out is not None and write_maps:
                save_heatmap_png(amap, out / "maps" / name / f"{sample.sample_id}.png", config.k_levels)
        samples[name] = scored
        aurocs[name] = scenario_auroc(scored)
        if out is not None:
            ckpt.atomic_write_text(
                out / "scores" / f"{name}.json",
                json.dumps(
                    {
                        "scenario": name,
                        "category": config.category,
                        "lam": lam,
                        "samples": [s.as_dict() for s in scored],
                    },
                    indent=1,
                ),
            )
    report = None
    if out is not None:
        report = build_report(
            {config.category: samples}, out, scenario_order=list(scenario_map)
        )
    return EvalResult(config, samples, aurocs, report)


def gradcheck_pipeline(
    seed: int = 0,
    base_channels: int = 2,
    k_levels: int = 2,
    image_size: int = 8,
    n_views: int = 1,
    m_blocks: int = 2,
    batch: int = 3,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    components: Sequence[str] | None = None,
) -> dict:
    """Finite-difference check of every objective on a tiny 64-bit pipeline.

    Each component's analytic gradient (autograd) is compared entry by entry
    against central differences, restricted to the parameters the component
    can reach.  Teacher features are precomputed constants (the teacher is
    frozen).  Returns a JSON-ready dict with per-component reports.

    batch must stay >= 3: the deepest features here are 1x1, where batch norm
    maps a 2-sample batch to exactly (+1, -1) per channel, the following ReLU
    then kills one whole sample, and the affinity terms collapse to constants
    (zero gradient everywhere, a vacuous check).  Three samples make the
    normalized values generic.  A degenerate all-zero-gradient component is
    reported as failed either way.
    """
    cfg = RunConfig(
        mode="FICO",
        seed=seed,
        base_channels=base_channels,
        k_levels=k_levels,
        image_size=image_size,
        n_views=n_views,
        m_blocks=m_blocks,
    )
    torch.manual_seed(seed)
    teacher = TeacherNet(base_channels, k_levels).double()
    teacher.freeze()
    pipeline = build_pipeline(cfg, teacher)
    for part in (pipeline.bottleneck, pipeline.student, pipeline.disco, pipeline.diifi):
        part.double()
    pipeline.train_mode()

    # The zero-initialized final compensation banks sit exactly on the
    # LeakyReLU kink behind a scale-invariant norm, where no derivative
    # exists; the check must run at a generic nearby point instead.
    gen = torch.Generator().manual_seed(seed + 17)
    with torch.no_grad():
        for p in pipeline.disco.parameters():
            if p.abs().sum() == 0:
                p.copy_(torch.empty_like(p).normal_(0.0, 0.3, generator=gen))

    x = torch.rand((batch, 3, image_size, image_size), generator=gen, dtype=torch.float64)
    views = [
        torch.rand((batch, 3, image_size, image_size), generator=gen, dtype=torch.float64)
        for _ in range(n_views)
    ]
    with torch.no_grad():
        t_levels = [t.detach() for t in pipeline.teacher(x)]
        t_views = [[t.detach() for t in pipeline.teacher(v)] for v in views]
    weights = cfg.weights()

    def _decode(levels):
        return pipeline.student(pipeline.bottleneck(levels))

    def fn_l_rd():
        return losses.loss_rd(t_levels, _decode(t_levels))

    def fn_l_abs():
        phi = pipeline.bottleneck(t_levels)
        return losses.loss_abs(phi, [pipeline.bottleneck(tv) for tv in t_views])

    def fn_l_lowf():
        d = _decode(t_levels)
        return losses.loss_lowf(d[0], [_decode(tv)[0] for tv in t_views])

    def fn_l_co():
        d = _decode(t_levels)
        comp = pipeline.disco.compensate_pyramid(d)
        comp_views = [pipeline.disco.compensate_pyramid(_decode(tv)) for tv in t_views]
        return loss_co(t_levels, comp, t_views, comp_views, cfg.alpha)

    def fn_l_mse():
        signals = pipeline.disco.signals(_decode(t_levels))
        view_signals = [pipeline.disco.signals(_decode(tv)) for tv in t_views]
        return loss_mse(
            signals[1:],
            pipeline.diifi(signals[0]),
            [sv[1:] for sv in view_signals],
            [pipeline.diifi(sv[0]) for sv in view_signals],
        )

    def fn_l_nor():
        base = pipeline.disco.signal(_decode(t_levels)[0], 1)
        return loss_nor(base, [pipeline.disco.signal(_decode(tv)[0], 1) for tv in t_views])

    def fn_total():
        parts = losses.LossBreakdown()
        d = _decode(t_levels)
        phi = pipeline.bottleneck(t_levels)
        phi_views = [pipeline.bottleneck(tv) for tv in t_views]
        d_views = [pipeline.student(pv) for pv in phi_views]
        parts.l_abs = losses.loss_abs(phi, phi_views)
        parts.l_lowf = losses.loss_lowf(d[0], [dv[0] for dv in d_views])
        signals = pipeline.disco.signals(d)
        comp = [s + f for s, f in zip(signals, d)]
        view_signals = [pipeline.disco.signals(dv) for dv in d_views]
        comp_views = [[s + f for s, f in zip(sv, dv)] for sv, dv in zip(view_signals, d_views)]
        parts.l_co = loss_co(t_levels, comp, t_views, comp_views, cfg.alpha)
        parts.l_mse = loss_mse(
            signals[1:],
            pipeline.diifi(signals[0]),
            [sv[1:] for sv in view_signals],
            [pipeline.diifi(sv[0]) for sv in view_signals],
        )
        parts.l_nor = loss_nor(signals[0], [sv[0] for sv in view_signals])
        return losses.total("FICO", parts, weights)

    named: dict[str, torch.nn.Parameter] = {}
    for prefix, module in (
        ("bottleneck", pipeline.bottleneck),
        ("student", pipeline.student),
        ("disco", pipeline.disco),
        ("diifi", pipeline.diifi),
    ):
        for name, p in module.named_parameters():
            named[f"{prefix}.{name}"] = p

    def _select(*prefixes: str) -> dict[str, torch.nn.Parameter]:
        return {n: p for n, p in named.items() if n.startswith(prefixes)}

    plan: dict[str, tuple] = {
        "l_rd": (fn_l_rd, _select("bottleneck", "student")),
        "l_abs": (fn_l_abs, _select("bottleneck")),
        "l_lowf": (fn_l_lowf, _select("bottleneck", "student")),
        "l_co": (fn_l_co, _select("bottleneck", "student", "disco")),
        "l_mse": (fn_l_mse, named),
        "l_nor": (fn_l_nor, _select("bottleneck", "student", "disco.k1")),
        "total": (fn_total, named),
    }
    chosen = list(plan) if components is None else list(components)
    for name in chosen:
        if name not in plan:
            raise ConfigError(f"unknown gradcheck component {name!r}; expected one of {list(plan)}")

    reports = {}
    for name in chosen:
        fn, params = plan[name]
        reports[name] = losses.gradcheck(fn, params, tolerance=tolerance, step=step)
    return {
        "passed": all(r.passed for r in reports.values()),
        "tolerance": tolerance,
        "step": step,
        "config": {
            "base_channels": base_channels,
            "k_levels": k_levels,
            "image_size": image_size,
            "n_views": n_views,
            "m_blocks": m_blocks,
            "batch": batch,
            "seed": seed,
        },
        "runtime_s": sum(r.runtime_s for r in reports.values()),
        "components": {name: r.as_dict() for name, r in reports.items()},
    }


def ablate(
    config: RunConfig,
    modes: Sequence[str],
    out_dir: str | Path,
    categories: Sequence[str] | None = None,
) -> dict:
    """Train and evaluate several modes under one shared seed and dataset.

    Produces one row per mode with the per-scenario AUROC averaged over
    categories, written as ablation.json / ablation.csv in the given order.
    """
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}; expected subset of {ABLATION_MODES}")
    if len(set(modes)) != len(modes):
        raise ConfigError("ablation modes must be unique")
    out = Path(out_dir)
    if categories is None:
        categories = [config.category] if config.category else []
    if not categories:
        raise ConfigError("ablate needs at least one category")

    scenario_order = list(config.scenarios)
    rows = []
    for mode in modes:
        mode_dir = out / mode.lower().replace("+", "_")
        per_scenario: dict[str, list[float]] = {name: [] for name in scenario_order}
        for category in categories:
            cfg = dataclasses.replace(config, mode=mode, category=category)
            run_dir = mode_dir / category
            result = train(cfg, run_dir)
            ev = evaluate(result.checkpoint_path, out_dir=run_dir / "eval", write_maps=False)
            for name in scenario_order:
                per_scenario[name].append(ev.aurocs[name])
        row: dict = {"mode": mode, "seed": config.seed}
        for name in scenario_order:
            row[name] = float(np.mean(per_scenario[name]))
        row["avg"] = float(np.mean([row[name] for name in scenario_order]))
        rows.append(row)

    ckpt.atomic_write_text(out / "ablation.json", json.dumps({"rows": rows}, indent=1))
    import csv as _csv
    import io as _io

    buf = _io.StringIO()
    writer = _csv.writer(buf)
    writer.writerow(["mode", "seed", *scenario_order, "avg"])
    for row in rows:
        writer.writerow(
            [row["mode"], row["seed"], *[f"{row[s]:.6f}" for s in scenario_order], f"{row['avg']:.6f}"]
        )
    ckpt.atomic_write_text(out / "ablation.csv", buf.getvalue())
    return {"rows": rows}

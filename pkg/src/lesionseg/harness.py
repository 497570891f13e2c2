"""Batch commands: train, eval, discriminate, augment, gradcheck, param-count."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment, data_io, gradsuite, metrics, network
from .config import ExperimentConfig, dump_config
from .data_io import CtSlice, DataError, DatasetManifest
from .network import ModelParams
from .tensor import ShapeError
from .trainer import train

log = logging.getLogger(__name__)

REFERENCE_PARAM_TARGETS = {True: 8_750_000, False: 6_320_000}
PARAM_TOLERANCE_FULL = 0.02
PARAM_TOLERANCE_SCALED = 0.05
SLICE_THICKNESS_NOTE = "volume rates sum slice areas; slice thickness is not weighted"


def write_snapshot(out_dir: Path, cfg: ExperimentConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_snapshot.ini").write_text(dump_config(cfg, resolve_paths=True))


def _load(manifest_path) -> list[CtSlice]:
    return data_io.load_slices(data_io.read_manifest(manifest_path))


def _model_input(ct: CtSlice, resize: int) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Standardised image, lung mask and infection mask, optionally resized."""
    image = data_io.preprocess(ct)[0]
    lung = ct.lung_mask
    inf = ct.infection_mask
    if resize and image.shape != (resize, resize):
        image = data_io.resize(image, (resize, resize), "image")
        lung = data_io.resize(lung, (resize, resize), "mask")
        inf = None if inf is None else data_io.resize(inf, (resize, resize), "mask")
    return image, lung, inf


def _check_size(ct: CtSlice, shape: tuple[int, ...]) -> None:
    if len(shape) != 2 or shape[0] % network.DOWNSAMPLE_FACTOR or shape[1] % network.DOWNSAMPLE_FACTOR:
        raise ShapeError(f"slice ({ct.patient_id}, {ct.slice_id}) has size {shape}; "
                         f"model needs multiples of {network.DOWNSAMPLE_FACTOR}")


def segment(params: ModelParams, slices: Sequence[CtSlice], resize: int = 0, binarize: float = 0.5,
            batch_size: int = 4):
    """Yield ``(slice, lung, gt, predicted_mask)`` for every lung-containing slice."""
    staged = []
    for ct in slices:
        if not ct.has_lung:
            continue
        image, lung, inf = _model_input(ct, resize)
        _check_size(ct, image.shape)
        staged.append((ct, image, lung, inf))
    for start in range(0, len(staged), batch_size):
        chunk = staged[start:start + batch_size]
        probs = network.predict(params, np.stack([c[1] for c in chunk]), batch_size=batch_size)
        for (ct, _, lung, inf), p in zip(chunk, probs):
            yield ct, lung, inf, metrics.binarize(p, binarize)


# ---------------------------------------------------------------------------
# eval


@dataclass
class MetricsReport:
    scores: list[metrics.SliceScore]
    summary: str
    volume: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_text(self) -> str:
        text = metrics.format_scores(self.scores) + "\n" + self.summary
        if self.volume:
            text += "# volume\tpatient\trate_gt\trate_pred\n"
            for pid, (gt, pred) in self.volume.items():
                text += f"# volume\t{pid}\t{gt:.10f}\t{pred:.10f}\n"
            text += f"# note\t{SLICE_THICKNESS_NOTE}\n"
        return text


def evaluate(params: ModelParams, slices: Sequence[CtSlice], mode: str, cfg: ExperimentConfig) -> MetricsReport:
    if mode not in ("slice", "volume"):
        raise ValueError(f"mode must be slice or volume, got {mode!r}")
    th = cfg.thresholds
    if mode == "slice":
        chosen = [s for s in slices if s.infection_mask is not None and s.infection_mask.any()]
    else:
        chosen = []
        for s in slices:
            if s.infection_mask is None:
                if s.label is not False:
                    raise DataError(f"({s.patient_id}, {s.slice_id}): volume mode needs a mask or a clean label")
                s = CtSlice(s.patient_id, s.slice_id, s.image, s.lung_mask, np.zeros_like(s.lung_mask), False)
            chosen.append(s)
    scores = []
    lung_areas = {}
    for ct, lung, gt, pred in segment(params, chosen, cfg.data.resize, th.binarize, cfg.schedule.batch_size):
        scores.append(metrics.score_slice(ct.patient_id, ct.slice_id, pred, gt, lung, th.group,
                                          th.discriminate, cfg.data.mae_region))
        lung_areas[ct.key] = int(np.count_nonzero(lung))
    summary = metrics.format_summary(scores, f"{mode} evaluation")
    volume = metrics.volume_rates(scores, lung_areas) if mode == "volume" else {}
    return MetricsReport(scores, summary, volume)


def cmd_eval(checkpoint, manifest, mode: str, out_dir, cfg: ExperimentConfig) -> MetricsReport:
    params = network.load_weights(checkpoint)
    slices = _load(manifest)
    report = evaluate(params, slices, mode, cfg)
    out = Path(out_dir)
    write_snapshot(out, cfg)
    (out / f"metrics_{mode}.tsv").write_text(report.to_text())
    return report


# ---------------------------------------------------------------------------
# discriminate


def discriminate(params: ModelParams, slices: Sequence[CtSlice], cfg: ExperimentConfig):
    rows = []
    for ct, lung, _, pred in segment(params, slices, cfg.data.resize, cfg.thresholds.binarize,
                                     cfg.schedule.batch_size):
        if ct.label is None:
            raise DataError(f"({ct.patient_id}, {ct.slice_id}) has no slice-level label")
        rate = metrics.infection_rate(pred, lung)
        rows.append((ct.patient_id, ct.slice_id, rate,
                     metrics.discriminate(rate, cfg.thresholds.discriminate), ct.label))
    if not rows:
        raise DataError("no lung-containing slices to discriminate")
    stats = metrics.discrimination_stats([r[3] for r in rows], [r[4] for r in rows])
    return rows, stats


def cmd_discriminate(checkpoint, manifest, exclusions, out_dir, cfg: ExperimentConfig):
    params = network.load_weights(checkpoint)
    m = data_io.read_manifest(manifest)
    missing = [e for e in m.entries if e.label is None and e.infection_mask_path is None]
    if missing:
        raise DataError(f"{len(missing)} slices lack labels, first ({missing[0].patient_id}, {missing[0].slice_id})")
    if exclusions:
        m = m.excluding(data_io.read_exclusions(exclusions))
    rows, stats = discriminate(params, data_io.load_slices(m), cfg)
    out = Path(out_dir)
    write_snapshot(out, cfg)
    lines = ["patient_id\tslice_id\trate_pred\tverdict\tlabel"]
    lines += [f"{p}\t{s}\t{r:.10f}\t{v}\t{metrics.INFECTED if y else metrics.CLEAN}" for p, s, r, v, y in rows]
    fmt = lambda x: "NA" if x is None else f"{x:.10f}"  # noqa: E731
    lines += ["", f"# accuracy\t{fmt(stats.accuracy)}", f"# sensitivity\t{fmt(stats.sensitivity)}",
              f"# ppv\t{fmt(stats.ppv)}", f"# threshold\t{cfg.thresholds.discriminate}"]
    (out / "discrimination.tsv").write_text("\n".join(lines) + "\n")
    return stats


# ---------------------------------------------------------------------------
# augment


def synthetic_corpus(infected: Sequence[CtSlice], healthy: Sequence[CtSlice], cfg: ExperimentConfig,
                     count: int | None = None, seed: int | None = None):
    n = count if count is not None else (cfg.augment.count or len(infected))
    return augment.generate_corpus(infected, healthy, n, cfg.augment.seed if seed is None else seed,
                                   cfg.thresholds.synthetic_min_rate)


def cmd_augment(cfg: ExperimentConfig, out_dir) -> Path:
    infected_path = cfg.resolve(cfg.paths.infected_manifest) or cfg.resolve(cfg.paths.manifest)
    healthy_path = cfg.resolve(cfg.paths.healthy_manifest)
    if infected_path is None or healthy_path is None:
        raise DataError("augment needs paths.infected_manifest (or paths.manifest) and paths.healthy_manifest")
    infected = data_io.load_slices(data_io.read_manifest(infected_path))
    healthy = data_io.load_slices(data_io.read_manifest(healthy_path))
    out = Path(out_dir)
    write_snapshot(out, cfg)
    pairs = synthetic_corpus(infected, healthy, cfg)
    return augment.write_corpus(out / "corpus", pairs)


# ---------------------------------------------------------------------------
# param-count


@dataclass
class ParamCountResult:
    ledger: network.ParamLedger
    target: float
    tolerance: float

    @property
    def deviation(self) -> float:
        return abs(self.ledger.total - self.target) / self.target

    @property
    def ok(self) -> bool:
        return self.deviation <= self.tolerance

    def to_text(self) -> str:
        flag = "OK" if self.ok else "DEVIATION"
        return (self.ledger.to_text()
                + f"TARGET\t{self.target:.0f}\nDEVIATION\t{self.deviation:.4%}\tlimit {self.tolerance:.0%}\t{flag}\n")


def cmd_param_count(base_width: int = 32, cpb_enabled: bool = True) -> ParamCountResult:
    params = network.build_model(base_width=base_width, cpb_enabled=cpb_enabled)
    target = REFERENCE_PARAM_TARGETS[cpb_enabled] * (base_width / 32) ** 2
    tol = PARAM_TOLERANCE_FULL if base_width == 32 else PARAM_TOLERANCE_SCALED
    return ParamCountResult(network.count_params(params), target, tol)


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(seed: int = 0) -> list:
    return gradsuite.run_suite(seed)


# ---------------------------------------------------------------------------
# train


@dataclass
class RunReport:
    text: str
    fold_scores: list[list[metrics.SliceScore]]
    checkpoints: list[Path]


def _fold_plan(cfg: ExperimentConfig, manifest: DatasetManifest) -> data_io.FoldPlan:
    if cfg.split.mode == "kfold":
        plan = data_io.kfold(manifest, cfg.split.k, cfg.split.val_fraction, cfg.split.seed)
    else:
        plan = data_io.split(manifest, cfg.split.ratios, cfg.split.seed)
    plan.check()
    return plan


def cmd_train(cfg: ExperimentConfig, out_dir) -> RunReport:
    manifest_path = cfg.resolve(cfg.paths.manifest)
    if manifest_path is None:
        raise DataError("train needs paths.manifest")
    manifest = data_io.read_manifest(manifest_path)
    slices = data_io.load_slices(manifest)
    healthy = []
    if cfg.augment.synthetic:
        hp = cfg.resolve(cfg.paths.healthy_manifest)
        if hp is None:
            raise DataError("augment.synthetic needs paths.healthy_manifest")
        healthy = data_io.load_slices(data_io.read_manifest(hp))
    plan = _fold_plan(cfg, manifest)
    out = Path(out_dir)
    write_snapshot(out, cfg)
    ranges = augment.AffineRanges((cfg.augment.zoom_min, cfg.augment.zoom_max),
                                  cfg.augment.shift_fraction, cfg.augment.shear_degrees)

    fold_scores, checkpoints, fold_lines = [], [], []
    for i, fold in enumerate(plan.folds):
        fold_dir = out / f"fold{i:02d}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        params = network.build_model(base_width=cfg.model.base_width, cpb_enabled=cfg.model.cpb_enabled,
                                     seed=cfg.model.seed)
        extra = []
        if cfg.augment.synthetic:
            infected_train = [s for s in slices if s.patient_id in set(fold.train)
                              and s.infection_mask is not None and s.infection_mask.any()]
            n_train = sum(1 for s in slices if s.patient_id in set(fold.train))
            pairs = synthetic_corpus(infected_train, healthy, cfg, count=cfg.augment.count or n_train,
                                     seed=cfg.augment.seed * 1000 + i)
            extra = augment.corpus_slices(pairs)
        result = train(params, fold, cfg.schedule, slices, cfg.loss, extra_train=extra,
                       log_path=fold_dir / "train_log.tsv", ranges=ranges)
        ckpt = fold_dir / "checkpoint.lswt"
        network.save_weights(ckpt, result.params)
        checkpoints.append(ckpt)
        test = [s for s in slices if s.patient_id in set(fold.test)]
        report = evaluate(result.params, test, "slice", cfg)
        (fold_dir / "metrics_slice.tsv").write_text(report.to_text())
        fold_scores.append(report.scores)
        fold_lines.append(
            f"fold {i}: train {len(fold.train)} val {len(fold.val)} test {len(fold.test)} patients; "
            f"synthetic {len(extra)}; best epoch {result.best_epoch} of {result.epochs_run}"
        )
    text = _run_report_text(cfg, plan, fold_scores, fold_lines)
    (out / "run_report.txt").write_text(text)
    return RunReport(text, fold_scores, checkpoints)


def _run_report_text(cfg, plan, fold_scores, fold_lines) -> str:
    lines = ["# run report", "", "## configuration"]
    lines += [ln for ln in dump_config(cfg, include_paths=False).splitlines() if ln]
    ledger_cpb = network.count_params(network.build_model(base_width=cfg.model.base_width, cpb_enabled=True)).total
    ledger_plain = network.count_params(network.build_model(base_width=cfg.model.base_width, cpb_enabled=False)).total
    lines += ["", "## trainable parameters", f"with_cpb\t{ledger_cpb}", f"without_cpb\t{ledger_plain}",
              f"cpb_delta\t{ledger_cpb - ledger_plain}", "", f"## folds (k={plan.k})"]
    lines += fold_lines
    lines += ["", "## per-fold test metrics (mean, std over slices)"]
    fold_means = []
    for i, scores in enumerate(fold_scores):
        if not scores:
            lines.append(f"fold {i}: no lesion-bearing test slices")
            continue
        agg = metrics.aggregate(scores, "mean")
        fold_means.append({k: v.mean for k, v in agg.items()})
        lines.append(f"fold {i}\t" + "\t".join(f"{k} {v.mean:.6f} +- {v.std:.6f}" for k, v in agg.items()))
    if fold_means:
        lines += ["", "## across folds (mean +- std of fold means)"]
        for k in metrics.METRIC_FIELDS:
            vals = np.array([m[k] for m in fold_means])
            lines.append(f"{k}\t{vals.mean():.6f} +- {vals.std():.6f}")
    pooled = [s for scores in fold_scores for s in scores]
    lines += ["", "## pooled test slices"]
    lines += metrics.format_summary(pooled, "pooled").splitlines()
    return "\n".join(lines) + "\n"

"""Training, evaluation and the (alpha, beta) sweep."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, unet
from .data import LabeledVolume, SynthConfig, generate_subject, generate_subjects, two_fold_split
from .errors import ConfigError, TrainingError
from .loss import TverskyParams, one_hot_planes, tversky_loss_backward, tversky_loss_forward
from .optim import AdamState, adam_step
from .unet import NetConfig, NetParams

log = logging.getLogger(__name__)

TABLE1_PAIRS = [(0.5, 0.5), (0.4, 0.6), (0.3, 0.7), (0.2, 0.8), (0.1, 0.9)]
METRIC_NAMES = ("dsc", "sensitivity", "specificity", "f2", "apr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    tversky: TverskyParams = field(default_factory=TverskyParams)
    net: NetConfig = field(default_factory=NetConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    threshold: float = 0.5
    seeds: tuple[int, ...] = (1, 2, 3)
    n_subjects: int = 10
    base_lr: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 1000
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.net.in_channels != self.synth.channels:
            raise ConfigError(
                f"net expects {self.net.in_channels} channels, synth makes {self.synth.channels}"
            )
        if self.net.input_shape != self.synth.volume_shape:
            raise ConfigError(
                f"net input {self.net.input_shape} != synth volume {self.synth.volume_shape}"
            )

    def with_tversky(self, alpha: float, beta: float) -> "TrainConfig":
        return _replace(self, tversky=TverskyParams(alpha, beta, self.tversky.epsilon))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "tversky": {"alpha": self.tversky.alpha, "beta": self.tversky.beta,
                        "epsilon": self.tversky.epsilon},
            "net": self.net.to_dict(),
            "synth": self.synth.to_dict(),
            "threshold": self.threshold,
            "seeds": list(self.seeds),
            "n_subjects": self.n_subjects,
            "base_lr": self.base_lr,
            "decay_factor": self.decay_factor,
            "decay_every": self.decay_every,
            "augment": self.augment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "tversky" in d:
            d["tversky"] = TverskyParams(**d["tversky"])
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        if "synth" in d:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _replace(cfg, **changes):
    from dataclasses import replace
    return replace(cfg, **changes)


def derive_seed(seed: int, tag: str) -> int:
    """Independent 32-bit seed for a named purpose (data, init, split, shuffle)."""
    tag_key = int.from_bytes(tag.encode(), "little")
    return int(np.random.SeedSequence([seed, tag_key]).generate_state(1)[0])


def seeded_configs(config: TrainConfig, seed: int) -> tuple[SynthConfig, NetConfig, int, int]:
    synth = _replace(config.synth, seed=derive_seed(seed, "data"))
    net = _replace(config.net, seed=derive_seed(seed, "init"))
    return synth, net, derive_seed(seed, "split"), derive_seed(seed, "shuffle")


@dataclass
class TrainResult:
    params: NetParams
    losses: list[float]


def loss_and_grads(params: NetParams, vol: LabeledVolume, tversky: TverskyParams):
    probs, cache = unet.forward(params, vol.image)
    g0, g1 = one_hot_planes(vol.labels)
    p0, p1 = probs[..., 0], probs[..., 1]
    loss, _ = tversky_loss_forward(p0, p1, g0, g1, tversky)
    d0, d1 = tversky_loss_backward(p0, p1, g0, g1, tversky)
    return loss, unet.backward(params, cache, d0, d1)


def augmented(vol: LabeledVolume, rng) -> LabeledVolume:
    """Random circular shift plus random axis flips, applied to image and labels alike."""
    axes = (0, 1, 2)
    offsets = [int(rng.integers(n)) for n in vol.labels.shape]
    flips = tuple(a for a in axes if rng.random() < 0.5)
    image = np.flip(np.roll(vol.image, offsets, axis=axes), flips)
    labels = np.flip(np.roll(vol.labels, offsets, axis=axes), flips)
    return LabeledVolume(np.ascontiguousarray(image), np.ascontiguousarray(labels), vol.subject_id)


def train_fold(train_subjects: list[LabeledVolume], config: TrainConfig,
               net: NetConfig | None = None, shuffle_seed: int = 0) -> TrainResult:
    """One whole-volume Adam step per subject per epoch.

    With ``augment`` each step sees the subject circularly shifted and flipped
    at random, so lesion positions cannot be memorised through the zero-padded
    borders. Returns the final parameters and the mean loss of
    every epoch.
    """
    if not train_subjects:
        raise ConfigError("train_fold needs at least one training subject")
    params = unet.init_params(net or config.net)
    state = AdamState(base_lr=config.base_lr, decay_factor=config.decay_factor,
                      decay_every=config.decay_every)
    rng = np.random.default_rng(shuffle_seed)
    history = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in rng.permutation(len(train_subjects)):
            vol = train_subjects[idx]
            if config.augment:
                vol = augmented(vol, rng)
            loss, grads = loss_and_grads(params, vol, config.tversky)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, subject {vol.subject_id}: loss={loss}, "
                    f"alpha={config.tversky.alpha}, beta={config.tversky.beta}"
                )
            adam_step(params, grads, state)
            total += loss
        history.append(total / len(train_subjects))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return TrainResult(params, history)


@dataclass
class SubjectMetrics:
    subject_id: str
    counts: metrics.ConfusionCounts
    dsc: float
    sensitivity: float
    specificity: float
    f2: float
    apr: float
    curve: metrics.PRCurve = field(repr=False)

    def row(self) -> dict:
        return {"subject_id": self.subject_id, "tp": self.counts.tp, "fp": self.counts.fp,
                "fn": self.counts.fn, "tn": self.counts.tn,
                **{m: getattr(self, m) for m in METRIC_NAMES}}


def predict(params: NetParams, image) -> np.ndarray:
    probs, _ = unet.forward(params, image)
    return probs[..., 0]


def score_subject(p0: np.ndarray, vol: LabeledVolume, threshold: float) -> SubjectMetrics:
    counts = metrics.confusion(metrics.binarize(p0, threshold), vol.labels)
    curve = metrics.pr_curve(p0, vol.labels)
    return SubjectMetrics(vol.subject_id, counts, metrics.dsc(counts),
                          metrics.sensitivity(counts), metrics.specificity(counts),
                          metrics.f2(counts), curve.apr, curve)


def evaluate_fold(params: NetParams, test_subjects: list[LabeledVolume],
                  threshold: float = 0.5, predictor=None) -> list[SubjectMetrics]:
    """Segment each test volume and score it. ``predictor(image) -> p0`` overrides the network."""
    predictor = predictor or (lambda image: predict(params, image))
    return [score_subject(predictor(vol.image), vol, threshold) for vol in test_subjects]


def macro_average(rows: list[SubjectMetrics]) -> dict[str, float]:
    return {m: float(np.mean([getattr(r, m) for r in rows])) for m in METRIC_NAMES}


def micro_average(rows: list[SubjectMetrics]) -> dict[str, float]:
    total = rows[0].counts
    for r in rows[1:]:
        total = total + r.counts
    return {"dsc": metrics.dsc(total), "sensitivity": metrics.sensitivity(total),
            "specificity": metrics.specificity(total), "f2": metrics.f2(total)}


@dataclass
class SweepRow:
    alpha: float
    beta: float
    mean: dict[str, float]  # percent, mean over seeds of the per-seed macro average
    per_seed: dict[int, dict[str, float]]
    micro: dict[int, dict[str, float]]
    subjects: dict[int, list[SubjectMetrics]]
    pooled_curve: metrics.PRCurve


@dataclass
class SweepReport:
    config: TrainConfig
    rows: list[SweepRow]
    models: dict = field(default_factory=dict)  # (alpha, beta, seed, fold) -> NetParams
    losses: dict = field(default_factory=dict)

    def row(self, alpha: float, beta: float) -> SweepRow:
        for r in self.rows:
            if (r.alpha, r.beta) == (alpha, beta):
                return r
        raise KeyError((alpha, beta))

    def table_csv(self) -> str:
        lines = ["alpha,beta,dsc,sensitivity,specificity,f2,apr"]
        for r in self.rows:
            vals = ",".join(f"{r.mean[m]:.4f}" for m in METRIC_NAMES)
            lines.append(f"{r.alpha:g},{r.beta:g},{vals}")
        return "\n".join(lines) + "\n"

    def table_markdown(self) -> str:
        lines = ["| Penalties | DSC | Sensitivity | Specificity | F2 score | APR score |",
                 "|---|---|---|---|---|---|"]
        for r in self.rows:
            cells = " | ".join(f"{r.mean[m]:.2f}" for m in METRIC_NAMES)
            lines.append(f"| alpha={r.alpha:g}, beta={r.beta:g} | {cells} |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "conventions": {
                "aggregation": "macro average over test subjects of both folds, then mean over seeds",
                "units": "percent",
                "apr": "step-wise average precision",
                "precision_no_predictions": 1.0,
                "dsc_f2_empty_prediction_and_truth": 1.0,
            },
            "rows": [
                {"alpha": r.alpha, "beta": r.beta, "mean": r.mean,
                 "per_seed": {str(s): v for s, v in r.per_seed.items()},
                 "micro": {str(s): v for s, v in r.micro.items()},
                 "subjects": {str(s): [m.row() for m in rows] for s, rows in r.subjects.items()}}
                for r in self.rows
            ],
        }


def pair_tag(alpha: float, beta: float) -> str:
    return f"{alpha:g}_{beta:g}"


def run_sweep(config: TrainConfig, pairs=None, seeds=None, out_dir=None,
              keep_models: bool = False, progress=None) -> SweepReport:
    """Train and test both folds for every (alpha, beta) pair and seed.

    For a given seed all pairs share the same subjects, split and initial
    weights, so rows differ only through the loss.
    """
    pairs = [tuple(map(float, p)) for p in (pairs or TABLE1_PAIRS)]
    seeds = tuple(seeds if seeds is not None else config.seeds)
    if not pairs or not seeds:
        raise ConfigError("sweep needs at least one (alpha, beta) pair and one seed")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "ckpt").mkdir(parents=True, exist_ok=True)

    results = {p: {} for p in pairs}
    pooled = {p: ([], []) for p in pairs}
    report = SweepReport(config, [])
    for seed in seeds:
        synth, net, split_seed, shuffle_seed = seeded_configs(config, seed)
        subjects = generate_subjects(synth, config.n_subjects)
        fold_a, fold_b = two_fold_split(subjects, split_seed)
        for alpha, beta in pairs:
            cfg = config.with_tversky(alpha, beta)
            tested = []
            for fold, train, test in (("a", fold_a, fold_b), ("b", fold_b, fold_a)):
                if progress:
                    progress(f"seed {seed} alpha {alpha:g} beta {beta:g} fold {fold}")
                res = train_fold(train, cfg, net, shuffle_seed)
                for vol in test:
                    p0 = predict(res.params, vol.image)
                    tested.append(score_subject(p0, vol, config.threshold))
                    pooled[(alpha, beta)][0].append(p0.ravel())
                    pooled[(alpha, beta)][1].append(vol.labels.ravel())
                report.losses[(alpha, beta, seed, fold)] = res.losses
                if keep_models:
                    report.models[(alpha, beta, seed, fold)] = res.params
                if out is not None:
                    unet.save_checkpoint(
                        out / "ckpt" / f"net_{pair_tag(alpha, beta)}_s{seed}_{fold}.tvnet", res.params)
            results[(alpha, beta)][seed] = tested

    for (alpha, beta), by_seed in results.items():
        per_seed = {s: {m: 100 * v for m, v in macro_average(rows).items()}
                    for s, rows in by_seed.items()}
        micro = {s: {m: 100 * v for m, v in micro_average(rows).items()}
                 for s, rows in by_seed.items()}
        mean = {m: float(np.mean([v[m] for v in per_seed.values()])) for m in METRIC_NAMES}
        scores, labels = pooled[(alpha, beta)]
        curve = metrics.pr_curve(np.concatenate(scores), np.concatenate(labels))
        report.rows.append(SweepRow(alpha, beta, mean, per_seed, micro, by_seed, curve))

    if out is not None:
        write_sweep_outputs(report, out)
    return report


PR_CSV_MAX_POINTS = 2000


def write_sweep_outputs(report: SweepReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(report.table_csv())
    (out / "table.md").write_text(report.table_markdown())
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    for r in report.rows:
        metrics.write_pr_csv(out / f"pr_{pair_tag(r.alpha, r.beta)}.csv",
                             r.pooled_curve.thinned(PR_CSV_MAX_POINTS))
    (out / "pr.svg").write_text(pr_svg(report))


def pr_svg(report: SweepReport, size: int = 360) -> str:
    """Pooled test-set PR curves of every pair as a small standalone SVG."""
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    pad = 40
    span = size - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">precision</text>',
    ]
    for i, r in enumerate(report.rows):
        c = r.pooled_curve.thinned(400)
        pts = " ".join(f"{pad + rec * span:.1f},{pad + (1 - p) * span:.1f}"
                       for p, rec in zip(c.precision, c.recall))
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad + 14 + 14 * i}" font-size="11" fill="{color}">'
                     f'a={r.alpha:g} b={r.beta:g} APR={100 * c.apr:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


LOW_DENSITY_MAX_FRACTION = 0.0005


def low_density_subjects(synth: SynthConfig, n: int, first_index: int = 1000,
                         max_fraction: float = LOW_DENSITY_MAX_FRACTION) -> list[LabeledVolume]:
    """``n`` single-small-lesion subjects with foreground fraction <= ``max_fraction``.

    Indices start at ``first_index`` so they never coincide with training subjects.
    """
    cfg = _replace(synth, foreground_fraction_target=0.6 * max_fraction,
                   lesion_count_range=(1, 1), lesion_radius_range=(1.0, 1.5))
    out = []
    idx = first_index
    while len(out) < n:
        vol = generate_subject(cfg, idx)
        if vol.foreground_fraction <= max_fraction:
            out.append(vol)
        idx += 1
        if idx > first_index + 100 * n:
            raise ConfigError(f"could not draw {n} subjects below fraction {max_fraction}")
    return out


def low_density_sensitivity(report: SweepReport, alpha: float, beta: float,
                            n_subjects: int = 3) -> dict[int, float]:
    """Mean sensitivity per seed on unseen low-density subjects, both fold models.

    Needs a report produced with ``keep_models=True``.
    """
    out = {}
    seeds = sorted({key[2] for key in report.models if key[:2] == (alpha, beta)})
    if not seeds:
        raise ConfigError(f"no stored models for ({alpha}, {beta}); run the sweep with keep_models=True")
    for seed in seeds:
        synth = seeded_configs(report.config, seed)[0]
        vols = low_density_subjects(synth, n_subjects)
        sens = []
        for fold in ("a", "b"):
            params = report.models[(alpha, beta, seed, fold)]
            sens += [r.sensitivity for r in evaluate_fold(params, vols, report.config.threshold)]
        out[seed] = float(np.mean(sens))
    return out

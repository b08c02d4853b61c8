"""Experiment configuration, model construction and the three desk-scale experiments."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import (
    ImageTask,
    KernelSpec,
    Task,
    bundled_digits,
    cubic_gap_task,
    downsample,
    gp_meta_dataset,
    gp_sample_task,
    linear_interp_baseline,
    load_idx,
    make_image_task,
)
from .errors import TrainingAborted
from .neural_processes import CNPModel, ConvCNPModel
from .posteriors import (
    AMFVIModel,
    APOVIModel,
    BernoulliLikelihood,
    BNNConfig,
    BNNModel,
    GaussianLikelihood,
    MFVIModel,
    MFVIPosterior,
    POVIModel,
    POVIPosterior,
    predict,
)
from .svg import emit_svg_images, emit_svg_plot
from .training import TrainConfig, elbo_objective, meta_train

log = logging.getLogger(__name__)

EXPERIMENT_MODELS = {
    "elbo_table": ("povi", "apovi"),
    "regress_1d": ("mfvi", "amfvi", "povi", "apovi", "cnp", "convcnp"),
    "image_complete": ("apovi", "convcnp", "lininterp"),
    "train": ("mfvi", "amfvi", "povi", "apovi", "cnp", "convcnp"),
}


@dataclass
class ExperimentConfig:
    experiment: str = "regress_1d"
    model: str = "apovi"
    objective: str = "elbo"
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    data_seed: int = 1234
    out_dir: str = "runs/out"
    # data
    kernel: dict = field(default_factory=lambda: {"kind": "se", "lengthscale": 0.5, "variance": 1.0})
    meta_size: int = 10
    n_range: list = field(default_factory=lambda: [10, 50])
    interval: list = field(default_factory=lambda: [-2.0, 2.0])
    noise_sd: float = 0.05
    eval_task: str = "se"
    n_test_tasks: int = 5
    repetitions: int = 5
    image_path: str | None = None
    image_size: int = 16
    n_test_images: int = 10
    binarise: bool = True
    train_p_range: list = field(default_factory=lambda: [0.05, 0.95])
    test_p_range: list = field(default_factory=lambda: [0.1, 0.3])
    # model
    hidden: list = field(default_factory=lambda: [16, 16])
    inference_hidden: list = field(default_factory=lambda: [50, 50])
    activation: str = "relu"
    prior_var: float = 1.0
    noise_var: float = 0.05**2
    trainable_noise: bool = False
    num_inducing: int = 10
    cnp_rep_dim: int = 32
    convcnp: dict = field(default_factory=lambda: {"points_per_unit": 32, "channels": [16, 32, 16],
                                                   "kernel_size": 11, "grid_channels": 16, "depth": 3})
    predict_samples: int = 100
    eval_samples: int = 100

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.experiment not in EXPERIMENT_MODELS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.model not in EXPERIMENT_MODELS[self.experiment]:
            raise ValueError(f"model {self.model!r} is not available for {self.experiment}; "
                             f"choose from {EXPERIMENT_MODELS[self.experiment]}")
        if self.objective not in ("elbo", "npml", "npvi"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.model in ("cnp", "convcnp") and self.objective != "npml":
            raise ValueError("neural-process baselines train with the npml objective")
        if self.meta_size < 0 or self.repetitions < 1:
            raise ValueError("meta_size must be >= 0 and repetitions >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = dataclasses.asdict(self.train)
        return d

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(**self.kernel)


@dataclass
class MetricsRecord:
    """Raw per-(repetition, item) values plus mean and sd over per-repetition means."""

    name: str
    metric: str
    raw: list = field(default_factory=list)  # rows of (repetition, item, value)

    def add(self, rep: int, item: int, value: float) -> None:
        self.raw.append((int(rep), int(item), float(value)))

    def repetition_means(self) -> np.ndarray:
        reps = sorted({r for r, _, _ in self.raw})
        return np.array([np.mean([v for r2, _, v in self.raw if r2 == r]) for r in reps])

    @property
    def mean(self) -> float:
        return float(np.mean(self.repetition_means()))

    @property
    def sd(self) -> float:
        m = self.repetition_means()
        return float(np.std(m, ddof=1)) if m.size > 1 else 0.0

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        raw_path, agg_path = out / f"{self.name}_raw.csv", out / f"{self.name}_aggregate.csv"
        with raw_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repetition", "item", self.metric])
            for r, i, v in self.raw:
                w.writerow([r, i, repr(v)])
        with agg_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "mean", "sd", "repetitions"])
            w.writerow([self.metric, repr(self.mean), repr(self.sd), len(self.repetition_means())])
        return raw_path, agg_path


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def rep_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def bnn_config(cfg: ExperimentConfig, in_dim: int, out_dim: int, bernoulli: bool = False) -> BNNConfig:
    lik = BernoulliLikelihood() if bernoulli else GaussianLikelihood(cfg.noise_var, cfg.trainable_noise)
    return BNNConfig([in_dim, *cfg.hidden, out_dim], cfg.activation, cfg.prior_var, lik)


def build_model(cfg: ExperimentConfig, in_dim: int, out_dim: int, rng: np.random.Generator,
                bernoulli: bool = False, grid_shape=None, povi_task: Task | None = None):
    kind = cfg.model
    if kind in ("mfvi", "amfvi", "povi", "apovi"):
        bc = bnn_config(cfg, in_dim, out_dim, bernoulli)
        if kind == "mfvi":
            return MFVIModel(bc, MFVIPosterior.init(bc, rng))
        if kind == "amfvi":
            return AMFVIModel.init(bc, cfg.inference_hidden, rng)
        if kind == "povi":
            return POVIModel(bc, POVIPosterior.init(bc, cfg.num_inducing, rng, povi_task))
        return APOVIModel.init(bc, cfg.inference_hidden, rng)
    if kind == "cnp":
        return CNPModel.init(in_dim, out_dim, cfg.cnp_rep_dim, cfg.inference_hidden, rng)
    if kind == "convcnp":
        cc = cfg.convcnp
        if grid_shape is not None:
            return ConvCNPModel.on_grid_2d(rng, grid_shape, channels=cc.get("grid_channels", 16),
                                           depth=cc.get("depth", 3), out_dim=out_dim)
        return ConvCNPModel.off_grid_1d(rng, channels=tuple(cc.get("channels", (16, 32, 16))),
                                        kernel_size=cc.get("kernel_size", 11),
                                        points_per_unit=cc.get("points_per_unit", 32), out_dim=out_dim)
    raise ValueError(f"cannot build model {kind!r}")


def predictive(model, context: Task, x, samples: int, rng: np.random.Generator):
    """Predictive mean and variance (numpy) at ``x`` given ``context``."""
    if isinstance(model, BNNModel):
        return predict(model.sampler(context), x, model.cfg, S=samples, rng=rng)
    with T.no_grad():
        mean, var = model.predict(context, x)
    return mean.data, var.data


def evaluate_elbo(model: BNNModel, task: Task, samples: int, rng: np.random.Generator) -> float:
    with T.no_grad():
        return float(elbo_objective(model, task, samples, rng).data)


def _train(model, meta, cfg: ExperimentConfig, seed: int, what: str, checkpoint=None):
    tc = dataclasses.replace(cfg.train, seed=seed)

    def progress(epoch, raw, smoothed):
        if epoch % 500 == 0:
            log.info("%s epoch %d objective %.4f (smoothed %.4f)", what, epoch, raw, smoothed)

    try:
        return meta_train(model, meta, cfg.objective, tc, checkpoint_path=checkpoint, progress=progress)
    except TrainingAborted as exc:
        raise TrainingAborted(f"{what}: {exc}") from exc


def _echo_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _gp_kwargs(cfg: ExperimentConfig) -> dict:
    return {"n_range": tuple(cfg.n_range), "interval": tuple(cfg.interval), "noise_sd": cfg.noise_sd}


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_elbo_table(cfg: ExperimentConfig) -> MetricsRecord:
    """Held-out-task ELBO for POVI (fitted per task) or APOVI (trained on a meta-dataset).

    A meta-dataset of size 0 means APOVI trains on the test tasks themselves.
    """
    if cfg.model not in ("povi", "apovi"):
        raise ValueError("the ELBO table compares povi and apovi only")
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    spec = cfg.kernel_spec
    test_rng = rep_rng(cfg.data_seed, 0)
    tests = [gp_sample_task(spec, rng=test_rng, **_gp_kwargs(cfg)) for _ in range(cfg.n_test_tasks)]
    rec = MetricsRecord(f"elbo_table_{cfg.model}_meta{cfg.meta_size}", "elbo")
    for rep in range(cfg.repetitions):
        seed = int(rep_rng(cfg.seed, rep).integers(2**31))
        if cfg.model == "povi":
            for i, task in enumerate(tests):
                model = build_model(cfg, task.in_dim, task.out_dim, rep_rng(seed, 1, i), povi_task=task)
                _train(model, [task], cfg, seed + i, f"povi rep {rep} task {i}")
                rec.add(rep, i, evaluate_elbo(model, task, cfg.eval_samples, rep_rng(seed, 2, i)))
            continue
        model = build_model(cfg, 1, 1, rep_rng(seed, 1))
        meta = tests if cfg.meta_size == 0 else gp_meta_dataset(spec, cfg.meta_size, rep_rng(seed, 3), **_gp_kwargs(cfg))
        _train(model, meta, cfg, seed, f"apovi rep {rep}")
        for i, task in enumerate(tests):
            rec.add(rep, i, evaluate_elbo(model, task, cfg.eval_samples, rep_rng(seed, 2, i)))
    rec.write(out)
    return rec


def regression_eval_task(cfg: ExperimentConfig) -> Task:
    rng = rep_rng(cfg.data_seed, 1)
    if cfg.eval_task == "cubic":
        return cubic_gap_task(rng)
    return gp_sample_task(cfg.kernel_spec, rng=rng, **_gp_kwargs(cfg))


def run_regress_1d(cfg: ExperimentConfig, grid_points: int = 200) -> dict:
    """Train on a GP meta-dataset, then predict on one unseen task with a 95% band.

    Writes ``predictions.csv`` (x, mean, sd, lower, upper) and ``regression.svg``.
    """
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    meta = gp_meta_dataset(cfg.kernel_spec, max(cfg.meta_size, 1), rep_rng(cfg.seed, 3), **_gp_kwargs(cfg))
    model = build_model(cfg, 1, 1, rep_rng(cfg.seed, 1))
    run = _train(model, meta, cfg, cfg.seed, f"{cfg.model} regression", checkpoint=out / "model.ckpt")
    task = regression_eval_task(cfg)
    lo, hi = float(task.X.min()), float(task.X.max())
    span = hi - lo
    xs = np.linspace(lo - 0.25 * span, hi + 0.25 * span, grid_points)[:, None]
    mean, var = predictive(model, task, xs, cfg.predict_samples, rep_rng(cfg.seed, 4))
    mean, sd = mean[:, 0], np.sqrt(var[:, 0])
    lower, upper = mean - 1.96 * sd, mean + 1.96 * sd
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "mean", "sd", "lower", "upper"])
        for row in zip(xs[:, 0], mean, sd, lower, upper):
            w.writerow([repr(float(v)) for v in row])
    emit_svg_plot([(xs[:, 0], mean)], [(xs[:, 0], lower, upper)], [(task.X[:, 0], task.Y[:, 0])],
                  out / "regression.svg", title=f"{cfg.model} predictive, meta-dataset size {cfg.meta_size}")
    return {"x": xs[:, 0], "mean": mean, "sd": sd, "lower": lower, "upper": upper, "run": run, "task": task}


def image_pool(cfg: ExperimentConfig) -> np.ndarray:
    """Images in [0, 1] at ``image_size``, in a fixed shuffled order."""
    if cfg.image_path:
        imgs = load_idx(cfg.image_path)
        if imgs.shape[1] != cfg.image_size:
            imgs = downsample(imgs, cfg.image_size)
    else:
        imgs = bundled_digits(cfg.image_size)
    return imgs[rep_rng(cfg.data_seed, 5).permutation(len(imgs))]


def image_test_tasks(cfg: ExperimentConfig, pool: np.ndarray) -> list:
    rng = rep_rng(cfg.data_seed, 6)
    test = pool[-cfg.n_test_images:]
    return [make_image_task(img, rng.uniform(*cfg.test_p_range), cfg.binarise, rng) for img in test]


def image_meta_dataset(cfg: ExperimentConfig, pool: np.ndarray, rng: np.random.Generator) -> list:
    train_pool = pool[:-cfg.n_test_images]
    idx = rng.choice(len(train_pool), size=max(cfg.meta_size, 1), replace=False)
    tasks = []
    for i in idx:
        it = make_image_task(train_pool[i], rng.uniform(*cfg.train_p_range), cfg.binarise, rng)
        tasks.append(it.task)
    return tasks


def complete_image(model, it: ImageTask, cfg: ExperimentConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Predicted mean and variance images for one masked image."""
    h, w = it.image.shape
    if model == "lininterp":
        return linear_interp_baseline(it), np.zeros((h, w))
    mean, var = predictive(model, it.context(), it.task.X, cfg.predict_samples, rng)
    return mean.reshape(h, w), var.reshape(h, w)


def run_image_complete(cfg: ExperimentConfig) -> MetricsRecord:
    """Per-image sum of squared errors of the predicted mean on held-out masked digits."""
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    pool = image_pool(cfg)
    tests = image_test_tasks(cfg, pool)
    rec = MetricsRecord(f"image_complete_{cfg.model}_meta{cfg.meta_size}", "sse")
    h, w = pool.shape[1:]
    for rep in range(cfg.repetitions):
        seed = int(rep_rng(cfg.seed, rep).integers(2**31))
        if cfg.model == "lininterp":
            model = "lininterp"
        else:
            model = build_model(cfg, 2, 1, rep_rng(seed, 1), bernoulli=(cfg.model == "apovi" and cfg.binarise),
                                grid_shape=(h, w) if cfg.model == "convcnp" else None)
            meta = image_meta_dataset(cfg, pool, rep_rng(seed, 3))
            _train(model, meta, cfg, seed, f"{cfg.model} images rep {rep}")
        for i, it in enumerate(tests):
            mean, var = complete_image(model, it, cfg, rep_rng(seed, 4, i))
            rec.add(rep, i, float(np.sum((mean - it.image) ** 2)))
            if rep == 0:
                masked = np.where(it.mask, it.image, np.nan)
                emit_svg_images([("original", it.image), ("context", masked), ("mean", mean),
                                 ("sd", np.sqrt(var))], out / f"image_{i:02d}.svg")
    rec.write(out)
    return rec


def run_train(cfg: ExperimentConfig) -> dict:
    """Train one model on a GP meta-dataset and checkpoint it."""
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    meta = gp_meta_dataset(cfg.kernel_spec, max(cfg.meta_size, 1), rep_rng(cfg.seed, 3), **_gp_kwargs(cfg))
    model = build_model(cfg, 1, 1, rep_rng(cfg.seed, 1), povi_task=meta[0])
    run = _train(model, meta, cfg, cfg.seed, f"{cfg.model} train", checkpoint=out / "model.ckpt")
    with (out / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "objective", "smoothed"])
        for e, (r, s) in enumerate(zip(run.raw, run.smoothed)):
            w.writerow([e, repr(r), repr(s)])
    return {"run": run, "model": model}


def save_model(model, path) -> None:
    save_checkpoint(model.parameters(), path, model_id=getattr(model, "kind", "model"))


"""Training, evaluation, (s, t) grid search and attention-report export."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, AttentionTrace
from .data import Dataset, augment_batch, load_split, make_synthetic, split_dataset, subset
from .errors import CheckpointError, ConfigError, NonFiniteError, SataError
from .optim import AdamW, ParamGroup, cosine_factor
from .suppression import ABSOLUTE, SataConfig, attention_stats, trivial_mask, twist, verify_mass_bound
from .vit import ModelState, ViTConfig

log = logging.getLogger(__name__)

REFERENCE_S_VALUES = (1.0, 0.75, 0.5, 0.25, 0.1, 0.0)
REFERENCE_T_VALUES = (0.1, 0.05, 0.025, 0.01, 0.0)
# suppression-scale learning rates reported for ViT, keyed by dataset
REFERENCE_LR2 = {"cifar100": 7e-5, "tiny-imagenet": 1e-3}


@dataclass
class RunConfig:
    # model
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 9
    num_heads: int = 12
    mlp_ratio: float = 2.0
    init_std: float = 0.02
    temperature_multiplier: float = 1.0
    lsa: bool = False
    lsa_learnable_temperature: bool = False
    # suppression
    sata: bool = True
    sata_mode: str = "relative"
    t: float = 0.1
    s: float = 0.5
    s_learnable: bool = True
    renormalize: bool = False
    clamp_s: bool = False
    # optimisation
    lr1: float = 0.003
    lr2: float = 0.001
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    schedule: str = "constant"
    batch_size: int = 128
    micro_batch: int = 32  # gradient-accumulation chunk; 0 = whole batch at once
    epochs: int = 100
    seed: int = 0
    augment: bool = False
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    classes: list[int] = field(default_factory=list)
    per_class: int = 0
    val_per_class: int = 0
    synthetic_n: int = 200
    synthetic_classes: int = 2
    synthetic_noise: float = 40.0
    val_fraction: float = 0.2
    data_seed: int = 0
    norm_mean: list[float] = field(default_factory=list)
    norm_std: list[float] = field(default_factory=list)
    # outputs and reports
    out: str = "runs/default"
    s_values: list[float] = field(default_factory=lambda: list(REFERENCE_S_VALUES))
    t_values: list[float] = field(default_factory=lambda: list(REFERENCE_T_VALUES))
    threshold: float = 0.05
    bin_width: float = 0.01
    report_images: int = 1

    def __post_init__(self):
        if self.lr1 < 0 or self.lr2 < 0:
            raise ConfigError(f"learning rates must be >= 0, got lr1={self.lr1}, lr2={self.lr2}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")

    def sata_config(self) -> SataConfig | None:
        if not self.sata:
            return None
        return SataConfig(
            mode=self.sata_mode,
            t=self.t,
            s=self.s,
            learnable_s=self.s_learnable,
            renormalize_rows=self.renormalize,
            clamp_s=self.clamp_s,
        )

    def vit_config(self, num_classes: int) -> ViTConfig:
        attention = AttentionConfig.for_embed_dim(
            self.embed_dim,
            self.num_heads,
            temperature_multiplier=self.temperature_multiplier,
            lsa_diagonal_mask=self.lsa,
            lsa_learnable_temperature=self.lsa_learnable_temperature,
        )
        return ViTConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=num_classes,
            attention=attention,
            sata=self.sata_config(),
            init_std=self.init_std,
        )

    def with_(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- config files

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, kind, text: str):
    text = text.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if kind in ("list[int]", "list[float]"):
            item = int if kind == "list[int]" else float
            return [item(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, _FIELDS[key], value)
    return values


def config_from_overrides(values: dict) -> RunConfig:
    converted = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        converted[key] = _convert(key, _FIELDS[key], value) if isinstance(value, str) else value
    return RunConfig(**converted)


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_overrides(values)


def dump_config(config: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, list):
            value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- data


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset | None]:
    mean = config.norm_mean or None
    std = config.norm_std or None
    if config.dataset == "synthetic":
        full = make_synthetic(
            config.synthetic_n,
            config.synthetic_classes,
            config.image_size,
            config.data_seed,
            noise=config.synthetic_noise,
        )
        if config.val_fraction > 0:
            return split_dataset(full, config.val_fraction, config.data_seed)
        return full, None
    if config.dataset not in ("cifar10", "cifar100"):
        raise ConfigError(f"unknown dataset {config.dataset!r}")
    train_set = load_split(config.data_dir, config.dataset, "train", image_size=config.image_size, mean=mean, std=std)
    val_set = load_split(
        config.data_dir, config.dataset, "test", image_size=config.image_size, mean=train_set.mean, std=train_set.std
    )
    if config.classes:
        train_set = subset(train_set, config.classes, config.per_class or None, config.data_seed)
        val_set = subset(val_set, config.classes, config.val_per_class or None, config.data_seed)
    return train_set, val_set


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    s_trajectory: list[list[float]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Path | None = None
    model: ModelState | None = field(default=None, repr=False)

    @property
    def final_val_acc(self) -> float | None:
        return self.epochs[-1]["val_acc"] if self.epochs else None


def _no_decay(name: str) -> bool:
    return (
        name.endswith(".bias")
        or name in ("pos_embed", "cls_token")
        or ".norm" in name
        or name.startswith("norm.")
        or name.endswith("log_temperature")
    )


class Trainer:
    """One model plus its dual-group AdamW optimizer.

    Groups: ``decay`` (matrices, lr1, weight decay), ``no_decay`` (biases,
    norms, positional embedding, class token, log-temperature; lr1) and
    ``scale`` (per-layer suppression scales; lr2, never decayed).
    """

    def __init__(self, config: RunConfig, num_classes: int, model: ModelState | None = None):
        self.config = config
        self.model = model or ModelState.initialize(config.vit_config(num_classes), config.seed)
        decay, no_decay, scales = [], [], []
        for name, p in self.model.named_parameters().items():
            p.name = name
            if name.endswith("sata_scale"):
                scales.append(p)
            elif _no_decay(name):
                no_decay.append(p)
            else:
                decay.append(p)
        sata = self.model.cfg.sata
        self.optimizer = AdamW(
            [
                ParamGroup("decay", decay, config.lr1, config.weight_decay),
                ParamGroup("no_decay", no_decay, config.lr1, 0.0),
                ParamGroup("scale", scales, config.lr2, 0.0, clamp_min=0.0 if sata and sata.clamp_s else None),
            ],
            betas=(config.beta1, config.beta2),
        )

    def step(self, images: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
        """One optimizer step on the batch; gradients accumulate over micro-batches."""
        n = len(labels)
        chunk = self.config.micro_batch or n
        total, correct = 0.0, 0
        for i in range(0, n, chunk):
            x, y = images[i:i + chunk], labels[i:i + chunk]
            with ad.Tape() as tape:
                logits = self.model(x)
                loss = ad.cross_entropy_loss(logits, y)
                if len(y) != n:
                    loss = ad.mul(loss, len(y) / n)
                ad.backward(loss, tape)
            total += loss.item()
            correct += int((logits.data.argmax(axis=1) == y).sum())
        self.optimizer.step()
        self.optimizer.zero_grad()
        return total, correct

    def first_non_finite(self) -> str | None:
        for name, p in self.model.named_parameters().items():
            if not np.all(np.isfinite(p.data)):
                return name
        return None


def predict(model: ModelState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            preds.append(model(images[i:i + batch_size]).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: ModelState, dataset: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with ad.no_grad():
        for i in range(0, len(dataset), batch_size):
            logits = model(dataset.normalized(slice(i, i + batch_size)))
            correct += int((logits.data.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def train(config: RunConfig, train_set: Dataset | None = None, val_set: Dataset | None = None) -> TrainReport:
    """Train one model; writes report.csv, s_trajectory.csv, config.txt and checkpoint.npz under ``config.out``."""
    if train_set is None:
        train_set, val_set = load_datasets(config)
    if config.image_size != train_set.image_size:
        raise ConfigError(f"config image_size {config.image_size} but data has {train_set.image_size}")
    config = config.with_(norm_mean=[float(v) for v in train_set.mean], norm_std=[float(v) for v in train_set.std])
    trainer = Trainer(config, train_set.class_count)
    model = trainer.model
    rng = np.random.default_rng([config.seed, 1])
    n = len(train_set)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    report = TrainReport(model=model)
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
            images = train_set.normalized(idx)
            if config.augment:
                images = augment_batch(images, rng)
            labels = train_set.labels[idx]
            if config.schedule == "cosine":
                trainer.optimizer.set_lr_factor(cosine_factor(step, total_steps))
            try:
                loss, hits = trainer.step(images, labels)
            except NonFiniteError as exc:
                culprit = trainer.first_non_finite() or "activations"
                raise NonFiniteError(f"epoch {epoch} step {b}: {exc}; first non-finite tensor: {culprit}") from None
            step += 1
            report.step_losses.append(loss)
            loss_sum += loss * len(idx)
            correct += hits
        row = {
            "epoch": epoch + 1,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "val_acc": accuracy(model, val_set) if val_set is not None else float("nan"),
            "lr1": config.lr1,
            "lr2": config.lr2,
            "seconds": time.perf_counter() - t0,
        }
        report.epochs.append(row)
        report.s_trajectory.append(model.s_values())
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch + 1, row["train_loss"], row["train_acc"], row["val_acc"])
    report.wall_time = time.perf_counter() - start
    if config.out:
        report.checkpoint = write_run_outputs(config, report)
    return report


def write_run_outputs(config: RunConfig, report: TrainReport) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    fields = ["epoch", "train_loss", "train_acc", "val_acc", "lr1", "lr2", "seconds"]
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in report.epochs:
            writer.writerow(row)
    depth = report.model.cfg.depth if report.model.scales() else 0
    with open(out / "s_trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"layer{i}" for i in range(depth)])
        for epoch, values in enumerate(report.s_trajectory, 1):
            writer.writerow([epoch] + [repr(v) for v in values])
    return report.model.save(out / "checkpoint.npz")


def _as_model(checkpoint) -> ModelState:
    return checkpoint if isinstance(checkpoint, ModelState) else ModelState.load(checkpoint)


def evaluate(checkpoint, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of a checkpoint (path or in-memory model) on ``dataset``."""
    model = _as_model(checkpoint)
    cfg = model.cfg
    if dataset.image_size != cfg.image_size or dataset.pixels.shape[1] != cfg.in_channels:
        raise CheckpointError(
            f"model expects {cfg.in_channels}x{cfg.image_size}x{cfg.image_size} images, "
            f"dataset has {tuple(dataset.pixels.shape[1:])}"
        )
    if dataset.class_count > cfg.num_classes:
        raise CheckpointError(f"model has {cfg.num_classes} classes, dataset has {dataset.class_count}")
    return accuracy(model, dataset, batch_size)


# ---------------------------------------------------------------- grid search


@dataclass
class GridResult:
    s_values: list[float]
    t_values: list[float]
    accuracy: np.ndarray  # len(t_values) x len(s_values)
    baseline: float
    errors: dict = field(default_factory=dict)
    cell_losses: dict = field(default_factory=dict)
    baseline_losses: list[float] = field(default_factory=list)
    path: Path | None = None


def _score(report: TrainReport, train_set: Dataset, val_set: Dataset | None) -> float:
    if val_set is not None:
        return report.epochs[-1]["val_acc"] if report.epochs else accuracy(report.model, val_set)
    return accuracy(report.model, train_set)


def _run_cell(config: RunConfig, train_set: Dataset, val_set: Dataset | None):
    try:
        report = train(config, train_set, val_set)
        return _score(report, train_set, val_set), report.step_losses, None
    except SataError as exc:
        return float("nan"), [], f"{exc.category}: {exc}"


def grid_search(
    config: RunConfig,
    s_values=None,
    t_values=None,
    train_set: Dataset | None = None,
    val_set: Dataset | None = None,
    jobs: int = 1,
) -> GridResult:
    """One fixed-s run per (t, s) cell plus a suppression-off baseline, all identically seeded."""
    s_values = list(config.s_values if s_values is None else s_values)
    t_values = list(config.t_values if t_values is None else t_values)
    if not s_values or not t_values:
        raise ConfigError("grid search needs non-empty s and t lists")
    if train_set is None:
        train_set, val_set = load_datasets(config)
    cells = [(t, s) for t in t_values for s in s_values]
    configs = [config.with_(sata=True, s_learnable=False, s=s, t=t, out="") for t, s in cells]
    configs.append(config.with_(sata=False, out=""))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, configs, [train_set] * len(configs), [val_set] * len(configs)))
    else:
        results = [_run_cell(c, train_set, val_set) for c in configs]
    acc = np.full((len(t_values), len(s_values)), np.nan)
    result = GridResult(s_values, t_values, acc, float("nan"))
    for (t, s), (score, losses, err) in zip(cells, results[:-1]):
        i, j = t_values.index(t), s_values.index(s)
        acc[i, j] = score
        result.cell_losses[(t, s)] = losses
        if err:
            result.errors[(t, s)] = err
    result.baseline, result.baseline_losses, base_err = results[-1]
    if base_err:
        result.errors["baseline"] = base_err
    if config.out:
        result.path = write_grid_csv(result, Path(config.out) / "grid.csv")
    return result


def write_grid_csv(result: GridResult, path: Path) -> Path:
    """t rows x s columns; header row of s values; a final ``baseline`` row (suppression off)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t\\s"] + [repr(float(s)) for s in result.s_values])
        for t, row in zip(result.t_values, result.accuracy):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        writer.writerow(["baseline"] + [repr(float(result.baseline))] * len(result.s_values))
    if result.errors:
        with open(path.with_name("grid_errors.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell", "error"])
            for cell, err in result.errors.items():
                writer.writerow([cell, err])
    return path


def read_grid_csv(path) -> tuple[list[float], list[float], np.ndarray, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    s_values = [float(v) for v in rows[0][1:]]
    t_values = [float(r[0]) for r in rows[1:-1]]
    acc = np.array([[float(v) for v in r[1:]] for r in rows[1:-1]])
    if rows[-1][0] != "baseline":
        raise ConfigError(f"{path}: last row is not the baseline row")
    return s_values, t_values, acc, float(rows[-1][1])


# ---------------------------------------------------------------- attention report

ATTN_COLUMNS = [
    "sample", "row", "max_weight", "trivial_count", "trivial_mass", "hist_mass_below",
    "suppress_count", "suppress_mass_before", "suppress_mass_after", "scale", "bound", "bound_ok",
]
HIST_COLUMNS = ["bin_lo", "bin_hi", "count_before", "mass_before", "count_after", "mass_after"]


@dataclass
class AttentionReport:
    files: list[Path]
    rows: dict  # (layer, head) -> structured per-row arrays
    bound_ok: bool


def export_attention_report(
    checkpoint,
    batch: np.ndarray,
    threshold: float,
    bin_width: float,
    out_dir=None,
    sata: SataConfig | None = None,
) -> AttentionReport:
    """Per-layer, per-head attention statistics before and after suppression.

    Suppression uses ``sata`` if given, else the model's own setting (with
    each layer's scale); a model trained without suppression is reported
    against an absolute threshold equal to ``threshold`` at ``s = 1``.
    """
    model = _as_model(checkpoint)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    traces: list[AttentionTrace] = []
    with ad.no_grad():
        model(batch, trace=traces)
    fallback = sata or SataConfig(mode=ABSOLUTE, t=threshold, s=1.0, learnable_s=False)
    files: list[Path] = []
    rows = {}
    all_ok = True
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for layer, tr in enumerate(traces):
        A = tr.weights  # B x H x N x N
        cfg = sata or model.cfg.sata or fallback
        scale = tr.scale if (sata is None and tr.scale is not None) else cfg.s
        mask = trivial_mask(A, cfg)
        after = twist(ad.Tensor(A), mask, scale, epsilon=cfg.epsilon).data
        check = verify_mass_bound(A, mask, scale, out=after, epsilon=cfg.epsilon)
        all_ok &= check.passed
        before_stats = attention_stats(A, threshold, bin_width)
        after_stats = attention_stats(after, threshold, bin_width)
        hist_below = before_stats.histogram_mass_below()
        b, h, n, _ = A.shape
        for head in range(h):
            data = {
                "sample": np.repeat(np.arange(b), n),
                "row": np.tile(np.arange(n), b),
                "max_weight": before_stats.row_max[:, head].reshape(-1),
                "trivial_count": before_stats.trivial_count[:, head].reshape(-1),
                "trivial_mass": before_stats.trivial_mass[:, head].reshape(-1),
                "hist_mass_below": hist_below[:, head].reshape(-1),
                "suppress_count": mask[:, head].sum(axis=-1).reshape(-1),
                "suppress_mass_before": np.where(mask, A, 0.0)[:, head].sum(axis=-1).reshape(-1),
                "suppress_mass_after": check.trivial_sum_after[:, head].reshape(-1),
                "scale": np.full(b * n, float(scale)),
                "bound": check.bound[:, head].reshape(-1),
                "bound_ok": check.row_pass[:, head].reshape(-1),
            }
            rows[(layer, head)] = data
            if out:
                path = out / f"attn_layer{layer}_head{head}.csv"
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(ATTN_COLUMNS)
                    for i in range(b * n):
                        writer.writerow([_fmt(data[c][i]) for c in ATTN_COLUMNS])
                files.append(path)
                hpath = out / f"attn_layer{layer}_head{head}_hist.csv"
                cb = before_stats.row_counts[:, head].reshape(-1, before_stats.num_bins).sum(axis=0)
                mb = before_stats.row_mass[:, head].reshape(-1, before_stats.num_bins).sum(axis=0)
                ca = after_stats.row_counts[:, head].reshape(-1, after_stats.num_bins).sum(axis=0)
                ma = after_stats.row_mass[:, head].reshape(-1, after_stats.num_bins).sum(axis=0)
                with open(hpath, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(HIST_COLUMNS)
                    for k in range(before_stats.num_bins):
                        lo, hi = before_stats.bin_edges[k], before_stats.bin_edges[k + 1]
                        writer.writerow([_fmt(lo), _fmt(hi), int(cb[k]), _fmt(mb[k]),
                                         int(ca[k]) if k < len(ca) else 0, _fmt(ma[k]) if k < len(ma) else 0])
                files.append(hpath)
    return AttentionReport(files, rows, bool(all_ok))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))

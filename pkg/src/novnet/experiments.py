"""Experiment assembly and orchestration shared by the CLI and the test
suite: config parsing, dataset assembly, the bundled synthetic Gaussian
benchmark, single training runs, and the ablation matrix.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import data_io, novelty_eval
from .data_io import ClusterSpec, Dataset, SplitSpec, SyntheticSpec
from .dual_trainer import (
    DualBranchModel,
    EpochStats,
    TrainingConfig,
    build_dual_model,
    train,
)
from .errors import ConfigError, ProtocolError
from .nn_core import NetworkSpec, spec_from_dicts

ABLATION_MODES = ("ce-only", "ce+membership", "dual-ce", "dual-full")

# Geometry of the bundled benchmark. All clusters sit around a common
# positive center (so many features activate broadly, like shared image
# statistics). Known centers occupy orthonormal directions at a fixed
# radius; novel centers take one fresh orthogonal direction plus three
# midpoints between known centers (same problem domain, genuinely
# confusable for max-activation thresholding); reference centers cover the
# surrounding shell on balanced signed directions at a slightly wider
# radius (out-of-distributional data).
BENCHMARK_DIMENSION = 8
BENCHMARK_SAMPLES_PER_CLUSTER = 200
BENCHMARK_RADIUS = 2.0
BENCHMARK_CENTER_RATIO = 2.5  # center norm / cluster radius
KNOWN_CLUSTER_STDDEV = 0.75
REFERENCE_CLUSTER_STDDEV = 1.0
REFERENCE_RADIUS_SCALE = 1.15
BENCHMARK_JITTER = 0.25


@dataclass(frozen=True)
class EvalConfig:
    target_fnr: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.target_fnr < 1.0:
            raise ConfigError(f"target_fnr must be in (0, 1), got {self.target_fnr}")


@dataclass
class ExperimentConfig:
    dataset: dict
    backbone: NetworkSpec
    training: TrainingConfig
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": {"backbone": {"input_shape": list(self.backbone.input_shape),
                                   "layers": self.backbone.to_dicts()}},
            "training": self.training.to_dict(),
            "evaluation": {"target_fnr": self.evaluation.target_fnr},
        }


@dataclass
class ExperimentData:
    train_T: Dataset
    test_T: Dataset
    novel: Dataset | None
    reference: Dataset | None


def parse_experiment_config(source) -> ExperimentConfig:
    """Build an ExperimentConfig from a JSON file path or a parsed dict.

    Referenced data files must exist at parse time.
    """
    if isinstance(source, dict):
        raw = source
    else:
        if not os.path.exists(source):
            raise ConfigError(f"config file not found: {source}")
        with open(source) as fh:
            raw = json.load(fh)
    for section in ("dataset", "model", "training"):
        if section not in raw:
            raise ConfigError(f"config is missing the {section!r} section")
    dataset = raw["dataset"]
    for key in ("csv", "idx", "reference_csv"):
        entry = dataset.get(key)
        if entry is None:
            continue
        for path_key in ("path", "images", "labels"):
            path = entry.get(path_key)
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"dataset file not found: {path}")
    model_section = raw["model"]
    if "backbone" not in model_section:
        raise ConfigError("model section needs a 'backbone' entry")
    backbone = spec_from_dicts(model_section["backbone"]["input_shape"],
                               model_section["backbone"]["layers"])
    training = TrainingConfig.from_dict(raw["training"])
    evaluation = EvalConfig(**raw.get("evaluation", {}))
    return ExperimentConfig(dataset=dataset, backbone=backbone,
                            training=training, evaluation=evaluation)


def _parse_split(section: dict | None) -> SplitSpec:
    section = dict(section or {})
    return SplitSpec(
        known_fraction=float(section.get("known_fraction", 0.5)),
        train_fraction=float(section.get("train_fraction", 0.5)),
        seed=int(section.get("seed", 0)),
    )


def _synthetic_spec_from_dict(section: dict) -> SyntheticSpec:
    clusters = tuple(
        ClusterSpec(mean=tuple(float(v) for v in c["mean"]), stddev=float(c["stddev"]),
                    count=int(c["count"]), role=str(c["role"]))
        for c in section["clusters"]
    )
    return SyntheticSpec(dimension=int(section["dimension"]), clusters=clusters,
                         seed=int(section.get("seed", 0)))


def assemble_datasets(dataset_section: dict) -> ExperimentData:
    """Turn the config's dataset section into train/test/novel/reference
    datasets following the split protocol.

    Sources: `synthetic` (explicit clusters), `benchmark` (the bundled
    generator), or `csv`/`idx` files with an alphabetical known/novel
    split. A reference dataset may come from synthetic roles or from
    `reference_csv`; its class names must not intersect the known ones.
    An optional `reshape` entry recasts every sample tensor (e.g. flat
    synthetic vectors into [channels, h, w] images for conv backbones).
    """
    split = _parse_split(dataset_section.get("split"))
    reference = None
    if "benchmark" in dataset_section:
        section = dataset_section["benchmark"]
        spec = make_benchmark_spec(
            seed=int(section.get("seed", 0)),
            reference_clusters=int(section.get("reference_clusters", 8)),
        )
        known, novel, reference = data_io.synth_gaussian(spec)
    elif "synthetic" in dataset_section:
        spec = _synthetic_spec_from_dict(dataset_section["synthetic"])
        known, novel, reference = data_io.synth_gaussian(spec)
    elif "csv" in dataset_section or "idx" in dataset_section:
        if "csv" in dataset_section:
            full = data_io.load_csv(dataset_section["csv"]["path"])
        else:
            entry = dataset_section["idx"]
            full = data_io.load_idx(entry["images"], entry["labels"])
        known, novel = data_io.split_known_novel(full, split)
    else:
        raise ConfigError("dataset section needs one of: benchmark, synthetic, csv, idx")

    if "reference_csv" in dataset_section:
        reference = data_io.load_csv(dataset_section["reference_csv"]["path"])
    if reference is not None:
        overlap = set(reference.class_names) & set(known.class_names)
        if overlap:
            raise ProtocolError(f"reference classes must not intersect known classes: {sorted(overlap)}")

    train_t, test_t = data_io.split_train_test(known, split.seed, split.train_fraction)
    data = ExperimentData(train_T=train_t, test_T=test_t, novel=novel, reference=reference)
    if "reshape" in dataset_section:
        shape = tuple(int(s) for s in dataset_section["reshape"])
        data = ExperimentData(*[_reshape_dataset(ds, shape) for ds in
                                (data.train_T, data.test_T, data.novel, data.reference)])
    return data


def _reshape_dataset(dataset: "Dataset | None", shape: tuple[int, ...]) -> "Dataset | None":
    if dataset is None:
        return None
    first = dataset.samples[0][0]
    if int(np.prod(shape)) != first.size:
        raise ConfigError(f"cannot reshape samples of {first.size} values to {shape}")
    return Dataset([(x.reshape(shape), y) for x, y in dataset.samples],
                   list(dataset.class_names), provenance=dataset.provenance)


def make_benchmark_spec(seed: int, reference_clusters: int = 8,
                        samples_per_cluster: int = BENCHMARK_SAMPLES_PER_CLUSTER) -> SyntheticSpec:
    """The bundled Gaussian benchmark for one seed: 4 known, 4 novel, and
    `reference_clusters` reference clusters in 8 dimensions.

    All placement and sampling randomness derives from `seed`.
    """
    rng = np.random.default_rng([seed, 17])
    dim = BENCHMARK_DIMENSION
    radius = BENCHMARK_RADIUS
    jitter = BENCHMARK_JITTER
    center = BENCHMARK_CENTER_RATIO * radius * np.ones(dim) / np.sqrt(dim)
    frame, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    known_means = [center + radius * frame[:, i] for i in range(4)]
    clusters = [ClusterSpec(tuple(m), KNOWN_CLUSTER_STDDEV, samples_per_cluster, "known")
                for m in known_means]
    novel_bases = [
        center + radius * frame[:, 4],
        0.5 * (known_means[0] + known_means[1]),
        0.5 * (known_means[2] + known_means[3]),
        0.5 * (known_means[1] + known_means[2]),
    ]
    for base in novel_bases:
        mean = base + rng.normal(0.0, jitter, dim)
        clusters.append(ClusterSpec(tuple(mean), KNOWN_CLUSTER_STDDEV, samples_per_cluster, "novel"))
    ref_frame, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    directions = [sign * ref_frame[:, i] for i in range(4) for sign in (+1.0, -1.0)]
    while len(directions) < reference_clusters:
        u = rng.standard_normal(dim)
        directions.append(u / np.linalg.norm(u))
    for u in directions[:reference_clusters]:
        mean = center + REFERENCE_RADIUS_SCALE * radius * u + rng.normal(0.0, jitter, dim)
        clusters.append(ClusterSpec(tuple(mean), REFERENCE_CLUSTER_STDDEV,
                                    samples_per_cluster, "reference"))
    return SyntheticSpec(dimension=dim, clusters=tuple(clusters), seed=seed)


def benchmark_backbone() -> NetworkSpec:
    """Small dense backbone matched to the benchmark's 8-dim inputs."""
    return spec_from_dicts([BENCHMARK_DIMENSION], [
        {"kind": "dense", "in": BENCHMARK_DIMENSION, "out": 20},
        {"kind": "relu"},
    ])


def benchmark_config(data_seed: int = 0, reference_clusters: int = 8,
                     mode: str = "dual-full", training_seed: int = 0,
                     epochs: int = 100) -> ExperimentConfig:
    """Ready-to-run configuration for the bundled benchmark."""
    training = TrainingConfig(mode=mode, epochs=epochs, lr=0.05, momentum=0.9,
                              batch_size_T=32, batch_size_R=32, seed=training_seed)
    return ExperimentConfig(
        dataset={"benchmark": {"seed": data_seed, "reference_clusters": reference_clusters},
                 "split": {"train_fraction": 0.5, "seed": data_seed}},
        backbone=benchmark_backbone(),
        training=training,
        evaluation=EvalConfig(),
    )


@dataclass
class ExperimentResult:
    mode: str
    training_seed: int
    auc: float
    accuracy: float
    model: DualBranchModel
    history: list[EpochStats]
    data: ExperimentData


def run_experiment(cfg: ExperimentConfig, mode: str | None = None,
                   seed: int | None = None, epoch_callback=None,
                   data: ExperimentData | None = None) -> ExperimentResult:
    """Assemble data, build and train a model, and evaluate novelty AUC
    plus closed-set accuracy on the held-out splits.

    Pass pre-assembled `data` to share one draw across several runs."""
    if data is None:
        data = assemble_datasets(cfg.dataset)
    training = TrainingConfig.from_dict(cfg.training.to_dict())
    if mode is not None:
        training = TrainingConfig.from_dict({**training.to_dict(), "mode": mode})
    if seed is not None:
        training = TrainingConfig.from_dict({**training.to_dict(), "seed": seed})

    if training.uses_reference and data.reference is None:
        raise ConfigError(f"mode {training.mode!r} needs a reference dataset")
    reference = data.reference if training.uses_reference else None
    num_reference = reference.n_classes if reference is not None else 0

    model = build_dual_model(cfg.backbone, data.train_T.n_classes, num_reference,
                             seed=training.seed, combined_head=training.mode == "finetune-cC")
    model, history = train(model, data.train_T, reference, training, epoch_callback=epoch_callback)

    auc, accuracy = evaluate_detection(model, data)
    return ExperimentResult(mode=training.mode, training_seed=training.seed, auc=auc,
                            accuracy=accuracy, model=model, history=history, data=data)


def evaluate_detection(model: DualBranchModel, data: ExperimentData) -> tuple[float, float]:
    """(novelty AUC, closed-set accuracy) on the test splits."""
    if data.novel is None or len(data.novel) == 0:
        raise ProtocolError("evaluation needs novel samples; AUC is undefined without them")
    known_records = novelty_eval.score_dataset(model, data.test_T, is_novel=False)
    novel_records = novelty_eval.score_dataset(model, data.novel, is_novel=True,
                                               start_id=len(known_records))
    roc = novelty_eval.roc_auc([r.score for r in known_records],
                               [r.score for r in novel_records])
    accuracy = novelty_eval.closed_set_accuracy(model, data.test_T)
    return roc.auc, accuracy


@dataclass
class AblationRow:
    mode: str
    seed: int
    auc: float
    accuracy: float


def ablation_seed(base_seed: int, rep: int, mode_index: int, n_modes: int) -> int:
    """Per-row training seed: modes fan out from the rep's base seed."""
    return base_seed + n_modes * rep + mode_index


def _reseed_dataset_section(dataset_section: dict, rep: int) -> dict:
    """Shift every seed in the dataset section by the rep index so each
    rep draws fresh data while all modes within the rep share it."""
    section = json.loads(json.dumps(dataset_section))
    for key in ("benchmark", "synthetic"):
        if key in section:
            section[key]["seed"] = int(section[key].get("seed", 0)) + rep
    split = section.setdefault("split", {})
    split["seed"] = int(split.get("seed", 0)) + rep
    return section


def run_ablation(cfg: ExperimentConfig, modes=ABLATION_MODES, n_seeds: int = 10,
                 base_seed: int | None = None) -> list[AblationRow]:
    """Run every mode n_seeds times.

    Within a rep, all modes share one data draw and split (so modes are
    compared on identical data); across reps both the data seed and the
    training seeds advance deterministically.
    """
    modes = tuple(modes)
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ConfigError(f"ablation mode must be one of {ABLATION_MODES}, got {mode!r}")
    if base_seed is None:
        base_seed = cfg.training.seed
    rows = []
    for rep in range(n_seeds):
        data = assemble_datasets(_reseed_dataset_section(cfg.dataset, rep))
        for mode in modes:
            # canonical mode index, so a restricted run reproduces the
            # exact rows of the full matrix
            seed = ablation_seed(base_seed, rep, ABLATION_MODES.index(mode), len(ABLATION_MODES))
            result = run_experiment(cfg, mode=mode, seed=seed, data=data)
            rows.append(AblationRow(mode=mode, seed=seed, auc=result.auc, accuracy=result.accuracy))
    return rows


def ablation_means(rows: list[AblationRow]) -> dict[str, float]:
    means: dict[str, float] = {}
    for mode in {row.mode for row in rows}:
        aucs = [row.auc for row in rows if row.mode == mode]
        means[mode] = float(np.mean(aucs))
    return means

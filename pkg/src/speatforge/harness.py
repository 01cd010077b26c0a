"""Experiment harness: configs, extraction, trajectories, compression runs.

Everything here is deterministic given the config's root seed: corpus
generation, model init, mask draws, and batch order all pull from named
sub-streams of that one seed, so a run reproduces byte-identical CSV output
on one machine configuration.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
import json
import math
from pathlib import Path

import numpy as np
import torch

from speatforge import speat
from speatforge.acoustics import (
    DEFAULT_N_MFCC,
    SpectralParams,
    Waveform,
    extract_features,
    log_mel_spectrogram,
    mfcc,
    read_wav,
)
from speatforge import compression as comp
from speatforge import fileio
from speatforge.model import (
    MaskParams,
    ModelConfig,
    NAMED_CONFIGS,
    TransformerModel,
    assign_clusters,
    extract_representations,
    fit_cluster_targets,
    init_model,
    make_train_state,
    masked_prediction_loss,
    pretrain_step,
    sample_mask,
    DEFAULT_PRETRAIN_BATCH,
    DEFAULT_PRETRAIN_LR,
)
from speatforge.seeding import substream, substream_seed
from speatforge import synthcorpus

SCHEMA_VERSION = 1
PRETRAIN_TOTAL_STEPS = 421000

# Trajectory evaluation grid before scaling (training-step axis ticks).
TRAJECTORY_GRID = (
    0, 500, 1000, 2000, 3000, 4000, 6000, 8000, 10000,
    20000, 30000, 40000, 50000, 60000, 70000, 80000,
    100000, 120000, 160000, 200000, 240000, 280000, 320000, 360000, 400000,
)

# Desk-scale config for smoke studies; ffw_dim divisible by 24 keeps the
# row-pruning grid on exact ticks.
TINY_CONFIG = ModelConfig(
    n_layers=2, hidden_dim=32, ffw_dim=48, n_heads=4, n_clusters=16, input_dim=40
)

CONTAINER_SUFFIX = ".speb"


@dataclass(frozen=True)
class CategorySpec:
    name: str
    planted_bias: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    model: str = "tiny"
    model_dims: dict | None = None  # overrides `model` when given
    categories: tuple = (CategorySpec("planted", 1.0),)
    targets_per_group: int = 30
    attributes_per_group: int = 12
    pretrain_utterances: int = 100
    pretrain_steps: int | None = None  # default: PRETRAIN_TOTAL_STEPS // scale
    scale: int = 100
    seed: int = 0
    out_dir: str = "runs/out"
    workers: int = 1
    layer_agg: str = "mean"

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        cats = tuple(
            c if isinstance(c, CategorySpec) else CategorySpec(**c)
            for c in self.categories
        )
        object.__setattr__(self, "categories", cats)
        self.model_config()  # fail early on unresolvable names

    def model_config(self) -> ModelConfig:
        if self.model_dims is not None:
            return ModelConfig.from_dict(self.model_dims)
        if self.model == "tiny":
            return TINY_CONFIG
        if self.model in NAMED_CONFIGS:
            return NAMED_CONFIGS[self.model]
        raise ValueError(f"unknown model config name: {self.model}")

    def total_pretrain_steps(self) -> int:
        if self.pretrain_steps is not None:
            return self.pretrain_steps
        return max(1, PRETRAIN_TOTAL_STEPS // self.scale)

    def to_json(self) -> str:
        d = asdict(self)
        d["categories"] = [asdict(c) for c in self.categories]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        if "categories" in data:
            data["categories"] = tuple(CategorySpec(**c) for c in data["categories"])
        return cls(**data)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TrajectoryRecord:
    """One evaluation point: bias per category plus model/loss bookkeeping."""

    point: float
    step: int
    d: dict
    classification: dict
    loss: float
    nonzero_params: int

    def __post_init__(self):
        if not math.isfinite(self.loss) or not math.isfinite(self.point):
            raise ValueError("non-finite values in trajectory record")
        for v in self.d.values():
            if not math.isfinite(v):
                raise ValueError("non-finite effect size in trajectory record")


def _categories_of(records) -> list:
    cats = sorted({c for r in records for c in r.d})
    return cats


def write_trajectory_csv(path, records) -> None:
    """CSV that round-trips exactly (floats serialized via repr)."""
    cats = _categories_of(records)
    cols = ["point", "step", "loss", "nonzero_params"]
    for c in cats:
        cols += [f"d_{c}", f"class_{c}"]
    lines = [",".join(cols)]
    for r in records:
        row = [repr(float(r.point)), str(r.step), repr(float(r.loss)),
               str(r.nonzero_params)]
        for c in cats:
            row += [repr(float(r.d[c])), r.classification[c]]
        lines.append(",".join(row))
    fileio.atomic_write_text(path, "\n".join(lines) + "\n")


def read_trajectory_csv(path) -> list:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    cats = [c[2:] for c in header if c.startswith("d_")]
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        base = dict(zip(header[:4], parts[:4]))
        d, cls = {}, {}
        for i, c in enumerate(cats):
            d[c] = float(parts[4 + 2 * i])
            cls[c] = parts[5 + 2 * i]
        records.append(TrajectoryRecord(
            point=float(base["point"]), step=int(base["step"]),
            d=d, classification=cls, loss=float(base["loss"]),
            nonzero_params=int(base["nonzero_params"]),
        ))
    return records


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def model_input_features(w: Waveform, cfg: ModelConfig) -> np.ndarray:
    """Log-mel frames matching the model's input width."""
    return log_mel_spectrogram(w, SpectralParams(), n_mels=cfg.input_dim).frames


def embed_stimuli(waveforms: dict, extractor, workers: int = 1) -> dict:
    """Map stimulus id -> EmbeddingSequence for a feature kind or a model."""
    if isinstance(extractor, TransformerModel):
        out = {}
        for sid, w in waveforms.items():
            reps = extract_representations(
                extractor, model_input_features(w, extractor.config)
            )
            out[sid] = speat.EmbeddingSequence(layers=tuple(reps), stimulus_id=sid)
        return out

    def one(item):
        sid, w = item
        return sid, speat.EmbeddingSequence(
            layers=(extract_features(w, extractor),), stimulus_id=sid
        )

    items = list(waveforms.items())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return dict(pool.map(one, items))
    return dict(one(i) for i in items)


def extract_to_containers(manifest, extractor, out_dir, waveforms=None,
                          workers: int = 1) -> dict:
    """Write one SPEB container per stimulus; returns id -> path.

    Waveforms are read from the manifest paths unless given inline.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if waveforms is None:
        waveforms = {s.stimulus_id: read_wav(s.path) for s in manifest.stimuli}
    embedded = embed_stimuli(waveforms, extractor, workers=workers)
    paths = {}
    for sid, seq in embedded.items():
        path = out_dir / f"{sid}{CONTAINER_SUFFIX}"
        fileio.write_embedding(path, np.stack(seq.layers))
        paths[sid] = str(path)
    return paths


def load_embedded_stimuli(manifest, container_dir) -> dict:
    out = {}
    for s in manifest.stimuli:
        tensor = fileio.read_embedding(
            Path(container_dir) / f"{s.stimulus_id}{CONTAINER_SUFFIX}"
        )
        out[s.stimulus_id] = speat.EmbeddingSequence(
            layers=tuple(tensor), stimulus_id=s.stimulus_id, group_label=s.group
        )
    return out


def bias_test_from_embeddings(manifest, embedded: dict) -> speat.BiasTest:
    def role(name):
        return tuple(embedded[s.stimulus_id] for s in manifest.by_role(name))

    return speat.BiasTest(
        category=manifest.category,
        X=role("target_X"), Y=role("target_Y"),
        A=role("attr_A"), B=role("attr_B"),
    )


# ---------------------------------------------------------------------------
# corpora and pretraining data
# ---------------------------------------------------------------------------

def build_bias_corpora(cfg: ExperimentConfig) -> dict:
    """Per-category (manifest, waveforms) with seeds derived per category."""
    counts = synthcorpus.CorpusCounts(
        targets_per_group=cfg.targets_per_group,
        attributes_per_group=cfg.attributes_per_group,
    )
    out = {}
    for cat in cfg.categories:
        out[cat.name] = synthcorpus.build_corpus(
            category=cat.name, counts=counts, planted_bias=cat.planted_bias,
            seed=cfg.seed,
        )
    return out


@dataclass
class PretrainData:
    mels: list
    targets: list
    centroids: np.ndarray


def build_pretraining_data(cfg: ExperimentConfig) -> PretrainData:
    """Synthesize the pretraining set and fit k-means MFCC targets."""
    mcfg = cfg.model_config()
    specs = synthcorpus.pretraining_specs(cfg.pretrain_utterances, cfg.seed)
    params = SpectralParams()
    mels, mfccs = [], []
    for spec in specs:
        w = synthcorpus.synth_stimulus(spec)
        mels.append(model_input_features(w, mcfg))
        mfccs.append(mfcc(w, params, n_mels=mcfg.input_dim,
                          n_coeffs=min(DEFAULT_N_MFCC, mcfg.input_dim)).frames)
    all_frames = np.concatenate(mfccs, axis=0)
    km = fit_cluster_targets(
        all_frames, mcfg.n_clusters, seed=substream_seed(cfg.seed, "kmeans")
    )
    targets = [assign_clusters(f, km.centroids) for f in mfccs]
    return PretrainData(mels=mels, targets=targets, centroids=km.centroids)


def _batch(items, batch_size, step):
    n = len(items)
    start = (step * batch_size) % n
    return [items[(start + j) % n] for j in range(min(batch_size, n))]


def _train_one(model, state, data: PretrainData, batch_size: int):
    """One training step; a batch with no masked frame still consumes a step."""
    mels = _batch(data.mels, batch_size, state.step)
    targets = _batch(data.targets, batch_size, state.step)
    loss = pretrain_step(model, state, mels, targets)
    if loss is None:
        state.step += 1
    return loss


def _eval_loss(model, data: PretrainData, cfg: ExperimentConfig) -> float:
    """Masked-prediction loss on a fixed batch, no update."""
    mels = data.mels[: min(DEFAULT_PRETRAIN_BATCH, len(data.mels))]
    targets = data.targets[: len(mels)]
    rng = substream(cfg.seed, "evalmask")
    masks = [sample_mask(m.shape[0], MaskParams().mask_prob, MaskParams().span, rng)
             for m in mels]
    with torch.no_grad():
        loss, n = masked_prediction_loss(model, mels, targets, masks)
    return float(loss) if n else 0.0


def _evaluate(model_like, corpora, cfg: ExperimentConfig):
    d, cls = {}, {}
    for name, (manifest, waveforms) in corpora.items():
        embedded = embed_stimuli(waveforms, model_like)
        test = bias_test_from_embeddings(manifest, embedded)
        report = speat.effect_size(test, layer_agg=cfg.layer_agg)
        d[name] = report.d_aggregate
        cls[name] = report.classification
    return d, cls


# ---------------------------------------------------------------------------
# trajectory experiment
# ---------------------------------------------------------------------------

def checkpoint_grid(scale: int, total_steps: int) -> list:
    pts = sorted({math.ceil(v / scale) for v in TRAJECTORY_GRID})
    return [p for p in pts if p <= total_steps]


def run_trajectory(cfg: ExperimentConfig, progress=None) -> list:
    """Pretrain from scratch, evaluating bias at the scaled step grid."""
    mcfg = cfg.model_config()
    corpora = build_bias_corpora(cfg)
    data = build_pretraining_data(cfg)
    model = init_model(mcfg, substream_seed(cfg.seed, "init"))
    state = make_train_state(model, DEFAULT_PRETRAIN_LR,
                             substream_seed(cfg.seed, "train"))
    total = cfg.total_pretrain_steps()
    grid = checkpoint_grid(cfg.scale, total)
    records = []
    for target_step in grid:
        while state.step < target_step:
            _train_one(model, state, data, DEFAULT_PRETRAIN_BATCH)
        d, cls = _evaluate(model, corpora, cfg)
        records.append(TrajectoryRecord(
            point=float(state.step), step=state.step, d=d, classification=cls,
            loss=_eval_loss(model, data, cfg),
            nonzero_params=model.nonzero_parameters(),
        ))
        if progress:
            progress(records[-1])
    return records


def pretrain_model(cfg: ExperimentConfig):
    """Plain pretraining run; returns (model, pretrain data, loss history)."""
    mcfg = cfg.model_config()
    data = build_pretraining_data(cfg)
    model = init_model(mcfg, substream_seed(cfg.seed, "init"))
    state = make_train_state(model, DEFAULT_PRETRAIN_LR,
                             substream_seed(cfg.seed, "train"))
    total = cfg.total_pretrain_steps()
    while state.step < total:
        _train_one(model, state, data, DEFAULT_PRETRAIN_BATCH)
    return model, data, state.loss_history


# ---------------------------------------------------------------------------
# compression experiments
# ---------------------------------------------------------------------------

def _finetune(model, state, data: PretrainData, n_steps: int):
    for _ in range(n_steps):
        _train_one(model, state, data, comp.FINETUNE_BATCH)


def run_head_pruning(model, data, cfg: ExperimentConfig, corpora=None):
    """Iterative head pruning with finetuning; records at every event."""
    if corpora is None:
        corpora = build_bias_corpora(cfg)
    mcfg = model.config
    state = make_train_state(model, comp.HEAD_FINETUNE_LR,
                             substream_seed(cfg.seed, "finetune-head"))
    events, records = [], []
    d, cls = _evaluate(model, corpora, cfg)
    records.append(TrajectoryRecord(
        point=float(comp.remaining_heads(model)), step=0, d=d, classification=cls,
        loss=_eval_loss(model, data, cfg), nonzero_params=model.nonzero_parameters(),
    ))
    for step in comp.head_event_steps(mcfg.n_layers, mcfg.n_heads, cfg.scale):
        _finetune(model, state, data, step - state.step)
        removed = comp.prune_heads(model, 1)
        events.append(comp.PruneEvent(
            step=state.step, method="head", units=1.0,
            sparsity_after=model.sparsity(), removed=tuple(tuple(r) for r in removed),
        ))
        d, cls = _evaluate(model, corpora, cfg)
        records.append(TrajectoryRecord(
            point=float(comp.remaining_heads(model)), step=state.step, d=d,
            classification=cls, loss=_eval_loss(model, data, cfg),
            nonzero_params=model.nonzero_parameters(),
        ))
    return records, events


def run_row_pruning(model, data, cfg: ExperimentConfig, corpora=None):
    """Iterative FFW row pruning; records at the sparse evaluation ticks."""
    if corpora is None:
        corpora = build_bias_corpora(cfg)
    mcfg = model.config
    event_size = comp.row_event_size(mcfg.ffw_dim)
    stop = comp.row_stop_remaining(mcfg.ffw_dim)
    ticks = set(comp.row_count_grid(mcfg.ffw_dim))
    interval = max(1, comp.ROW_PRUNE_INTERVAL // cfg.scale)
    state = make_train_state(model, comp.ROW_FINETUNE_LR,
                             substream_seed(cfg.seed, "finetune-row"))
    events, records = [], []
    d, cls = _evaluate(model, corpora, cfg)
    per_layer_rows = int(model.row_mask[0].sum())
    records.append(TrajectoryRecord(
        point=float(per_layer_rows), step=0, d=d, classification=cls,
        loss=_eval_loss(model, data, cfg), nonzero_params=model.nonzero_parameters(),
    ))
    while int(model.row_mask[0].sum()) > stop:
        _finetune(model, state, data, interval)
        removed = comp.prune_rows(model, event_size)
        events.append(comp.PruneEvent(
            step=state.step, method="row", units=float(event_size),
            sparsity_after=model.sparsity(), removed=tuple(tuple(r) for r in removed),
        ))
        remaining = int(model.row_mask[0].sum())
        if remaining in ticks or remaining <= stop:
            d, cls = _evaluate(model, corpora, cfg)
            records.append(TrajectoryRecord(
                point=float(remaining), step=state.step, d=d, classification=cls,
                loss=_eval_loss(model, data, cfg),
                nonzero_params=model.nonzero_parameters(),
            ))
    return records, events


def run_weight_pruning(model, data, cfg: ExperimentConfig, corpora=None,
                       replay_events=None):
    """EMA-gated global magnitude pruning along the sparsity ladder.

    In replay mode the recorded event steps and fractions are applied to the
    model verbatim and the gate is bypassed.
    """
    if corpora is None:
        corpora = build_bias_corpora(cfg)
    window = max(2, comp.GATE_WINDOW_STEPS // cfg.scale)
    patience = 2 * window
    state = make_train_state(model, comp.WEIGHT_FINETUNE_LR,
                             substream_seed(cfg.seed, "finetune-weight"))
    gate_state = comp.CompressionState(window_steps=window)
    events, records = [], []
    d, cls = _evaluate(model, corpora, cfg)
    records.append(TrajectoryRecord(
        point=0.0, step=0, d=d, classification=cls,
        loss=_eval_loss(model, data, cfg), nonzero_params=model.nonzero_parameters(),
    ))
    pending_grid = list(comp.WEIGHT_EVAL_GRID)

    def record_if_due():
        while pending_grid and gate_state.current_sparsity >= pending_grid[0] - 1e-12:
            point = pending_grid.pop(0)
            d, cls = _evaluate(model, corpora, cfg)
            records.append(TrajectoryRecord(
                point=point, step=state.step, d=d, classification=cls,
                loss=_eval_loss(model, data, cfg),
                nonzero_params=model.nonzero_parameters(),
            ))

    def apply_event(fraction, forced):
        target = 1.0 - (1.0 - gate_state.current_sparsity) * (1.0 - fraction)
        comp.weight_prune_event(model, fraction, target_sparsity=target)
        gate_state.current_sparsity = target
        gate_state.events_done += 1
        gate_state.reset_window()
        events.append(comp.PruneEvent(
            step=state.step, method="weight", units=fraction,
            sparsity_after=target, forced=forced,
        ))
        record_if_due()

    if replay_events is not None:
        for ev in replay_events:
            _finetune(model, state, data, ev.step - state.step)
            apply_event(ev.units, ev.forced)
        return records, events

    steps_since_event = 0
    while True:
        fraction = comp.sparsity_schedule(gate_state.current_sparsity)
        if fraction is None:
            break
        loss = _train_one(model, state, data, comp.FINETUNE_BATCH)
        steps_since_event += 1
        triggered = loss is not None and comp.weight_prune_gate(gate_state, loss)
        forced = steps_since_event >= patience
        if triggered or forced:
            apply_event(fraction, forced and not triggered)
            steps_since_event = 0
    return records, events


def run_distillation(teacher, data, cfg: ExperimentConfig, student_layers=(2, 4, 6),
                     steps: int = 200, corpora=None):
    """Distill students of the given depths; one record per student."""
    if corpora is None:
        corpora = build_bias_corpora(cfg)
    records = []
    d, cls = _evaluate(teacher, corpora, cfg)
    records.append(TrajectoryRecord(
        point=float(teacher.config.n_layers), step=0, d=d, classification=cls,
        loss=0.0, nonzero_params=teacher.nonzero_parameters(),
    ))
    students = {}
    for n in student_layers:
        student, history = comp.distill(
            teacher, n, data.mels, steps=steps, lr=comp.DISTILL_LR,
            seed=substream_seed(cfg.seed, "distill", str(n)),
            batch_size=comp.DISTILL_BATCH,
        )
        d, cls = _evaluate(student.encoder, corpora, cfg)
        records.append(TrajectoryRecord(
            point=float(n), step=steps, d=d, classification=cls,
            loss=history[-1], nonzero_params=student.encoder.nonzero_parameters(),
        ))
        students[n] = student
    return records, students


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def report(records, out_dir) -> dict:
    """Write a JSON summary, per-category CSV, and gnuplot-ready .dat files."""
    if not records:
        raise ValueError("empty_records: nothing to report")
    steps = [r.step for r in records]
    if any(b < a for a, b in zip(steps, steps[1:])):
        raise ValueError("unsorted_records: records must be in step order")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cats = _categories_of(records)
    summary = {"categories": {}, "n_records": len(records)}
    for c in cats:
        series = [(r.point, r.d[c], r.classification[c]) for r in records]
        summary["categories"][c] = {
            "first_d": series[0][1],
            "final_d": series[-1][1],
            "final_classification": series[-1][2],
            "max_abs_d": max(abs(s[1]) for s in series),
        }
        csv_lines = ["point,d,classification"]
        csv_lines += [f"{repr(float(p))},{repr(float(d))},{c2}" for p, d, c2 in series]
        fileio.atomic_write_text(out_dir / f"{c}.csv", "\n".join(csv_lines) + "\n")
        dat_lines = [f"# point d ({c})"]
        dat_lines += [f"{repr(float(p))} {repr(float(d))}" for p, d, _ in series]
        fileio.atomic_write_text(out_dir / f"{c}.dat", "\n".join(dat_lines) + "\n")
    fileio.atomic_write_text(out_dir / "summary.json",
                             json.dumps(summary, indent=2, sort_keys=True))
    return summary

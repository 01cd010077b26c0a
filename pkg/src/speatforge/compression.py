"""Compression procedures: head/row/weight pruning and distillation.

All pruning is mask-based (no tensor shrinking) and monotone: masks only ever
shrink the live set. Selection rules:

- head pruning removes an equal number of heads per layer, choosing the
  smallest L1 score over the head's Q/K/V row slices, its O column slice, and
  the matching bias entries; ties break toward the lower head index.
- row pruning jointly masks row i of FFW1 and column i of FFW2 by the summed
  L1 norm of that pair (weights only); ties break toward the lower index.
- weight pruning masks the globally smallest-|value| fraction of the still
  unpruned block-linear weights and biases, gated by an EMA loss plateau.

Step counts from the reference schedules are divided by a scale factor so the
whole ladder completes at desk scale; the plateau tolerance is not scaled.
"""

from collections import deque
from dataclasses import dataclass, replace
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from speatforge.model import (
    ModelConfig,
    TransformerModel,
    init_model,
)
from speatforge.seeding import substream

EMA_DECAY = 0.9998
GATE_TOLERANCE = 0.001
GATE_WINDOW_STEPS = 15000

HEAD_PRUNE_INTERVAL = 25000
HEAD_PRUNE_INTERVAL_LATE = 40000
ROW_PRUNE_INTERVAL = 25000

HEAD_FINETUNE_LR = 5e-5
ROW_FINETUNE_LR = 1e-5
WEIGHT_FINETUNE_LR = 1e-5
DISTILL_LR = 2e-4
DISTILL_BATCH = 24
DISTILL_TOTAL_STEPS = 200000
FINETUNE_BATCH = 4

# (upper sparsity bound, fraction of remaining weights pruned per event)
SPARSITY_LADDER = (
    (0.20, 0.20),
    (0.50, 0.10),
    (0.65, 0.05),
    (0.70, 0.025),
    (0.80, 0.01),
)
SPARSITY_HALT = 0.80

# Evaluation grid for weight pruning (sparsity axis ticks).
WEIGHT_EVAL_GRID = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


# ---------------------------------------------------------------------------
# head pruning
# ---------------------------------------------------------------------------

def head_l1_scores(model: TransformerModel, layer_index: int) -> np.ndarray:
    """Per-head L1 score: Q/K/V row slices + O column slice, biases included."""
    layer = model.layers[layer_index]
    dh = model.config.head_dim
    scores = np.zeros(model.config.n_heads)
    with torch.no_grad():
        for h in range(model.config.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            total = 0.0
            for lin in (layer.q, layer.k, layer.v):
                total += float(lin.weight[sl, :].abs().sum())
                total += float(lin.bias[sl].abs().sum())
            total += float(layer.o.weight[:, sl].abs().sum())
            scores[h] = total
    return scores


def _mask_head(model: TransformerModel, layer_index: int, head: int) -> None:
    layer = model.layers[layer_index]
    dh = model.config.head_dim
    sl = slice(head * dh, (head + 1) * dh)
    model.head_mask[layer_index, head] = False
    for lin in (layer.q, layer.k, layer.v):
        lin.weight_mask[sl, :] = False
        lin.bias_mask[sl] = False
    layer.o.weight_mask[:, sl] = False


def prune_heads(model: TransformerModel, heads_per_layer: int) -> list:
    """Mask the `heads_per_layer` lowest-L1 live heads in every layer.

    Returns the per-layer lists of removed head indices.
    """
    if heads_per_layer < 0:
        raise ValueError("heads_per_layer must be >= 0")
    removed = []
    if heads_per_layer == 0:
        return [[] for _ in model.layers]
    for li in range(model.config.n_layers):
        alive = np.nonzero(model.head_mask[li].numpy())[0]
        if alive.shape[0] < heads_per_layer:
            raise ValueError(
                f"cannot prune {heads_per_layer} heads in layer {li}: "
                f"only {alive.shape[0]} remain"
            )
        scores = head_l1_scores(model, li)
        ranked = alive[np.argsort(scores[alive], kind="stable")]
        removed.append(sorted(int(h) for h in ranked[:heads_per_layer]))
    for li, heads in enumerate(removed):
        for h in heads:
            _mask_head(model, li, h)
    model.apply_masks()
    return removed


def remaining_heads(model: TransformerModel) -> int:
    return int(model.head_mask.sum())


# ---------------------------------------------------------------------------
# row pruning
# ---------------------------------------------------------------------------

def row_l1_scores(model: TransformerModel, layer_index: int) -> np.ndarray:
    """Summed L1 of FFW1 row i and FFW2 column i (weights only)."""
    layer = model.layers[layer_index]
    with torch.no_grad():
        fc1 = layer.fc1.weight.abs().sum(dim=1)
        fc2 = layer.fc2.weight.abs().sum(dim=0)
        return (fc1 + fc2).numpy().astype(np.float64)


def prune_rows(model: TransformerModel, n_rows: int) -> list:
    """Mask the n lowest-score live FFW row/column pairs in every layer."""
    if n_rows < 0:
        raise ValueError("n_rows must be >= 0")
    removed = []
    if n_rows == 0:
        return [[] for _ in model.layers]
    for li in range(model.config.n_layers):
        alive = np.nonzero(model.row_mask[li].numpy())[0]
        if alive.shape[0] <= n_rows:
            raise ValueError(
                f"cannot prune {n_rows} rows in layer {li}: "
                f"only {alive.shape[0]} remain and at least one must survive"
            )
        scores = row_l1_scores(model, li)
        ranked = alive[np.argsort(scores[alive], kind="stable")]
        removed.append(sorted(int(r) for r in ranked[:n_rows]))
    for li, rows in enumerate(removed):
        layer = model.layers[li]
        for r in rows:
            model.row_mask[li, r] = False
            layer.fc1.weight_mask[r, :] = False
            layer.fc1.bias_mask[r] = False
            layer.fc2.weight_mask[:, r] = False
    model.apply_masks()
    return removed


def remaining_rows(model: TransformerModel) -> int:
    return int(model.row_mask.sum())


# ---------------------------------------------------------------------------
# weight pruning
# ---------------------------------------------------------------------------

def sparsity_schedule(current_sparsity: float):
    """Fraction of remaining weights to prune next, or None to halt.

    Tier boundaries are compared with a 1e-12 slack so the float recurrence
    s' = 1-(1-s)(1-f) lands on the intended tier at exact boundaries.
    """
    if not (0.0 <= current_sparsity < 1.0):
        raise ValueError(f"sparsity must be in [0, 1), got {current_sparsity}")
    for bound, fraction in SPARSITY_LADDER:
        if current_sparsity < bound - 1e-12:
            return fraction
    return None


def sparsity_ladder_sequence(start: float = 0.0) -> list:
    """Scheduled sparsities after each event: s' = 1 - (1-s)(1-f), to halt."""
    seq = []
    s = start
    while True:
        f = sparsity_schedule(s)
        if f is None:
            break
        s = 1.0 - (1.0 - s) * (1.0 - f)
        seq.append(s)
    return seq


def _flat_pool(model: TransformerModel):
    """Concatenated |values| and live flags over block linears, declared order."""
    values, alive, tensors = [], [], []
    for _, lin in model.prunable_linears():
        for tensor, mask in ((lin.weight, lin.weight_mask), (lin.bias, lin.bias_mask)):
            values.append(tensor.detach().abs().reshape(-1).numpy())
            alive.append(mask.reshape(-1).numpy())
            tensors.append((tensor, mask))
    return np.concatenate(values), np.concatenate(alive), tensors


def weight_prune_event(
    model: TransformerModel,
    fraction: float,
    target_sparsity: float | None = None,
) -> int:
    """Globally mask the smallest-|value| share of still-unpruned entries.

    With `target_sparsity` given, masks however many entries bring the total
    masked count to round(total * target_sparsity); otherwise masks
    round(fraction * n_unpruned). Returns the number of entries masked.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    values, alive, tensors = _flat_pool(model)
    alive_idx = np.nonzero(alive)[0]
    if target_sparsity is None:
        n_mask = int(round(fraction * alive_idx.shape[0]))
    else:
        masked_now = values.shape[0] - alive_idx.shape[0]
        n_mask = int(round(target_sparsity * values.shape[0])) - masked_now
    n_mask = max(0, min(n_mask, alive_idx.shape[0]))
    if n_mask == 0:
        return 0
    ranked = alive_idx[np.argsort(values[alive_idx], kind="stable")]
    victims = np.zeros(values.shape[0], dtype=bool)
    victims[ranked[:n_mask]] = True
    offset = 0
    with torch.no_grad():
        for tensor, mask in tensors:
            n = tensor.numel()
            hit = victims[offset : offset + n]
            if hit.any():
                flat = mask.reshape(-1)
                flat[torch.as_tensor(np.nonzero(hit)[0])] = False
            offset += n
    model.apply_masks()
    return n_mask


@dataclass
class CompressionState:
    """EMA plateau tracker and schedule cursor for weight pruning."""

    window_steps: int = GATE_WINDOW_STEPS
    ema_decay: float = EMA_DECAY
    tolerance: float = GATE_TOLERANCE
    compare_raw: bool = False  # compare raw losses instead of EMA values
    ema_loss: float | None = None
    ring: deque = None
    current_sparsity: float = 0.0
    events_done: int = 0

    def __post_init__(self):
        if self.window_steps < 2:
            raise ValueError("window_steps must be >= 2")
        if self.ring is None:
            self.ring = deque(maxlen=self.window_steps)

    def reset_window(self):
        self.ring.clear()


def weight_prune_gate(state: CompressionState, new_loss: float) -> bool:
    """Update the EMA and return True when the loss has plateaued.

    True requires a full window and the tracked value moving by at most
    `tolerance` across it. The EMA is seeded with the first observed loss.
    """
    if state.ema_loss is None:
        state.ema_loss = float(new_loss)
    else:
        state.ema_loss = (
            state.ema_decay * state.ema_loss + (1.0 - state.ema_decay) * float(new_loss)
        )
    state.ring.append(float(new_loss) if state.compare_raw else state.ema_loss)
    if len(state.ring) < state.window_steps:
        return False
    return abs(state.ring[-1] - state.ring[0]) <= state.tolerance


# ---------------------------------------------------------------------------
# schedules (pure arithmetic, shared by runners and tests)
# ---------------------------------------------------------------------------

def head_count_grid(n_layers: int, n_heads: int) -> list:
    """Remaining-head counts from the full model down to one head per layer."""
    return [n_layers * h for h in range(n_heads, 0, -1)]


def head_event_steps(n_layers: int, n_heads: int, scale: int = 1) -> list:
    """Training steps at which head-prune events fire (one head per layer).

    Events run at the early interval while more than half the heads remain,
    then at the late interval until one head per layer is left.
    """
    early = max(1, HEAD_PRUNE_INTERVAL // scale)
    late = max(1, HEAD_PRUNE_INTERVAL_LATE // scale)
    total = n_layers * n_heads
    switch = total // 2
    steps, t, remaining = [], 0, total
    while remaining > n_layers:
        t += early if remaining > switch else late
        steps.append(t)
        remaining -= n_layers
    return steps


def row_event_size(ffw_dim: int) -> int:
    """Rows removed per event; the reference ratio is ffw_dim / 24."""
    return max(1, ffw_dim // 24)


def row_stop_remaining(ffw_dim: int) -> int:
    """Rows left when row pruning stops; the reference ratio is ffw_dim / 6."""
    return max(row_event_size(ffw_dim), ffw_dim // 6)


def row_count_grid(ffw_dim: int) -> list:
    """Remaining-row evaluation ticks: every 4th event down to the stop."""
    event = row_event_size(ffw_dim)
    stop = row_stop_remaining(ffw_dim)
    grid = []
    count = ffw_dim - 4 * event
    while count >= stop:
        grid.append(count)
        count -= 4 * event
    return grid


@dataclass(frozen=True)
class PruneEvent:
    """One prune event; the JSONL sequence of these is the replay artifact."""

    step: int
    method: str
    units: float
    sparsity_after: float
    removed: tuple = ()
    forced: bool = False

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "method": self.method,
            "units": self.units,
            "sparsity_after": self.sparsity_after,
            "removed": [list(r) for r in self.removed],
            "forced": self.forced,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneEvent":
        return cls(
            step=d["step"], method=d["method"], units=d["units"],
            sparsity_after=d["sparsity_after"],
            removed=tuple(tuple(r) for r in d.get("removed", [])),
            forced=d.get("forced", False),
        )


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def default_distill_targets(teacher_layers: int) -> tuple:
    """Teacher layers a student predicts: layers 4 and 12 of a 12-layer
    teacher, generalized to {ceil(n/3), n} for shorter ones."""
    return (math.ceil(teacher_layers / 3), teacher_layers)


class StudentModel(nn.Module):
    """Shallow encoder plus one prediction head per target teacher layer."""

    def __init__(self, cfg: ModelConfig, teacher_hidden: int, target_layers):
        super().__init__()
        self.encoder = TransformerModel(cfg)
        self.target_layers = tuple(int(t) for t in target_layers)
        self.heads = nn.ModuleList(
            nn.Linear(cfg.hidden_dim, teacher_hidden) for _ in self.target_layers
        )

    def forward(self, mel):
        return self.encoder(mel)

    def predictions(self, mel):
        final = self.encoder(mel)[-1]
        return [head(final) for head in self.heads]


def distill_loss(student: StudentModel, teacher: TransformerModel, mels):
    """Sum over target layers of frame-mean (L1 distance + 1 - cosine)."""
    dtype = next(student.parameters()).dtype
    total = 0.0
    for mel in mels:
        mel_t = torch.as_tensor(np.asarray(mel), dtype=dtype)
        with torch.no_grad():
            teacher_reps = teacher(mel_t.to(next(teacher.parameters()).dtype))
        preds = student.predictions(mel_t)
        for pred, layer in zip(preds, student.target_layers):
            tgt = teacher_reps[layer].to(dtype)
            l1 = (pred - tgt).abs().mean()
            cos = F.cosine_similarity(pred, tgt, dim=-1).mean()
            total = total + l1 + (1.0 - cos)
    return total / len(mels)


def distill(
    teacher: TransformerModel,
    student_layers: int,
    mels,
    steps: int,
    lr: float = DISTILL_LR,
    seed: int = 0,
    batch_size: int = DISTILL_BATCH,
    target_layers=None,
):
    """Train a shallow student to predict teacher layer representations.

    The teacher is frozen (evaluated under no_grad and never updated).
    Returns (student, loss_history).
    """
    if len(mels) == 0:
        raise ValueError("empty corpus: nothing to distill from")
    if target_layers is None:
        target_layers = default_distill_targets(teacher.config.n_layers)
    if max(target_layers) > teacher.config.n_layers:
        raise ValueError(
            f"target layer {max(target_layers)} exceeds teacher depth "
            f"{teacher.config.n_layers}"
        )
    cfg = replace(teacher.config, n_layers=student_layers)
    student = StudentModel(cfg, teacher.config.hidden_dim, target_layers)
    seeded = init_model(cfg, seed, dtype=next(teacher.parameters()).dtype)
    student.encoder.load_state_dict(seeded.state_dict())
    gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
    with torch.no_grad():
        for head in student.heads:
            head.weight.normal_(0.0, 0.02, generator=gen)
            head.bias.zero_()
    student = student.to(next(teacher.parameters()).dtype)
    teacher.eval()
    opt = torch.optim.Adam(student.parameters(), lr=lr, betas=(0.9, 0.999))
    rng = substream(seed, "distill")
    history = []
    for _ in range(steps):
        idx = rng.choice(len(mels), size=min(batch_size, len(mels)), replace=False)
        batch = [mels[i] for i in idx]
        loss = distill_loss(student, teacher, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return student, history

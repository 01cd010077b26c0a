"""Desk-scale masked-prediction transformer encoder over mel frames.

The encoder is convolution-free on the waveform side: mel (or log-mel) frames
are linearly projected, given a grouped-convolution positional encoding, and
passed through pre-norm transformer blocks. Pretraining predicts k-means
cluster ids of MFCC frames with cross-entropy over masked positions only.

Pruning works through boolean masks: every block linear carries weight/bias
masks, and structured head/row masks project into them. Masked entries are
kept exactly zero by re-applying masks after each optimizer step.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from speatforge.seeding import float64_enabled, substream

POS_CONV_KERNEL = 128
POS_CONV_GROUPS = 16
INIT_STD = 0.02

DEFAULT_N_CLUSTERS = 64
DEFAULT_MASK_PROB = 0.08
DEFAULT_MASK_SPAN = 10
DEFAULT_PRETRAIN_LR = 1e-4
DEFAULT_PRETRAIN_BATCH = 12

ADAM_BETAS = (0.9, 0.999)


def resolve_dtype(dtype=None) -> torch.dtype:
    """Model compute dtype; SPEATFORGE_F64=1 switches to 64-bit."""
    if dtype is not None:
        return dtype
    return torch.float64 if float64_enabled() else torch.float32


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden_dim: int
    ffw_dim: int
    n_heads: int
    n_clusters: int = DEFAULT_N_CLUSTERS
    input_dim: int = 80

    def __post_init__(self):
        for name in ("n_layers", "hidden_dim", "ffw_dim", "n_heads",
                     "n_clusters", "input_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "hidden_dim": self.hidden_dim,
            "ffw_dim": self.ffw_dim, "n_heads": self.n_heads,
            "n_clusters": self.n_clusters, "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


NAMED_CONFIGS = {
    "small": ModelConfig(n_layers=3, hidden_dim=640, ffw_dim=2048, n_heads=8),
    "slim": ModelConfig(n_layers=12, hidden_dim=384, ffw_dim=768, n_heads=8),
    "base": ModelConfig(n_layers=12, hidden_dim=768, ffw_dim=3072, n_heads=12),
}


class MaskedLinear(nn.Linear):
    """Linear layer with persistent prune masks over weight and bias."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__(in_features, out_features)
        self.register_buffer(
            "weight_mask", torch.ones(out_features, in_features, dtype=torch.bool)
        )
        self.register_buffer("bias_mask", torch.ones(out_features, dtype=torch.bool))

    @torch.no_grad()
    def apply_masks(self):
        self.weight.mul_(self.weight_mask.to(self.weight.dtype))
        self.bias.mul_(self.bias_mask.to(self.bias.dtype))

    def masked_count(self) -> int:
        return int((~self.weight_mask).sum()) + int((~self.bias_mask).sum())


class EncoderLayer(nn.Module):
    """Pre-norm block: masked multi-head attention + masked feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.ln1 = nn.LayerNorm(d)
        self.q = MaskedLinear(d, d)
        self.k = MaskedLinear(d, d)
        self.v = MaskedLinear(d, d)
        self.o = MaskedLinear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = MaskedLinear(d, cfg.ffw_dim)
        self.fc2 = MaskedLinear(cfg.ffw_dim, d)

    def forward(self, h, head_mask, row_mask):
        t, d = h.shape
        x = self.ln1(h)
        q = self.q(x).view(t, self.n_heads, self.head_dim).transpose(0, 1)
        k = self.k(x).view(t, self.n_heads, self.head_dim).transpose(0, 1)
        v = self.v(x).view(t, self.n_heads, self.head_dim).transpose(0, 1)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (att @ v) * head_mask.to(h.dtype)[:, None, None]
        h = h + self.o(out.transpose(0, 1).reshape(t, d))
        x = self.ln2(h)
        hidden = F.gelu(self.fc1(x)) * row_mask.to(h.dtype)[None, :]
        return h + self.fc2(hidden)

    def prunable_linears(self):
        yield from (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o),
                    ("fc1", self.fc1), ("fc2", self.fc2))


class TransformerModel(nn.Module):
    """Encoder with per-layer representations and prune-mask bookkeeping."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        d = cfg.hidden_dim
        self.input_proj = nn.Linear(cfg.input_dim, d)
        self.mask_emb = nn.Parameter(torch.zeros(d))
        groups = math.gcd(POS_CONV_GROUPS, d)
        self.pos_conv = nn.Conv1d(
            d, d, POS_CONV_KERNEL, padding=POS_CONV_KERNEL // 2, groups=groups
        )
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d)
        self.pred_head = nn.Linear(d, cfg.n_clusters)
        self.register_buffer(
            "head_mask", torch.ones(cfg.n_layers, cfg.n_heads, dtype=torch.bool)
        )
        self.register_buffer(
            "row_mask", torch.ones(cfg.n_layers, cfg.ffw_dim, dtype=torch.bool)
        )

    def forward(self, mel, frame_mask=None):
        """Representations per level: projection output, then each block.

        `mel` is (n_frames x input_dim); `frame_mask` marks frames whose
        projected input is replaced by the learned mask embedding (training
        only). Returns a list of n_layers+1 (n_frames x hidden_dim) tensors.
        """
        if mel.shape[1] != self.config.input_dim:
            raise ValueError(
                f"input has {mel.shape[1]} features, model expects {self.config.input_dim}"
            )
        h = self.input_proj(mel)
        if frame_mask is not None:
            h = torch.where(frame_mask[:, None], self.mask_emb.expand_as(h), h)
        pos = self.pos_conv(h.transpose(0, 1)[None])[0, :, : h.shape[0]]
        h = h + F.gelu(pos.transpose(0, 1))
        reps = [h]
        for i, layer in enumerate(self.layers):
            h = layer(h, self.head_mask[i], self.row_mask[i])
            reps.append(h)
        return reps

    def logits(self, mel, frame_mask=None):
        reps = self.forward(mel, frame_mask)
        return self.pred_head(self.final_norm(reps[-1]))

    def prunable_linears(self):
        """Block linears in declared order: per layer q,k,v,o,fc1,fc2."""
        for i, layer in enumerate(self.layers):
            for name, lin in layer.prunable_linears():
                yield f"layers.{i}.{name}", lin

    @torch.no_grad()
    def apply_masks(self):
        for _, lin in self.prunable_linears():
            lin.apply_masks()

    def total_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def prunable_parameters(self) -> int:
        return sum(
            lin.weight.numel() + lin.bias.numel()
            for _, lin in self.prunable_linears()
        )

    def masked_parameters(self) -> int:
        return sum(lin.masked_count() for _, lin in self.prunable_linears())

    def nonzero_parameters(self) -> int:
        return self.total_parameters() - self.masked_parameters()

    def sparsity(self) -> float:
        """Masked fraction of the pruning-eligible (block linear) parameters."""
        return self.masked_parameters() / self.prunable_parameters()


def init_model(cfg: ModelConfig, seed: int, dtype=None) -> TransformerModel:
    """Deterministically initialized model: N(0, 0.02) matrices, zero biases."""
    model = TransformerModel(cfg)
    gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2 or name.endswith("mask_emb"):
                p.normal_(0.0, INIT_STD, generator=gen)
            elif "norm" in name or ".ln" in name:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                p.zero_()
    return model.to(resolve_dtype(dtype))


def extract_representations(model: TransformerModel, frames: np.ndarray) -> list:
    """Numpy-in/numpy-out forward pass for embedding extraction."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        reps = model(torch.as_tensor(np.asarray(frames), dtype=dtype))
    return [r.numpy().astype(np.float64) for r in reps]


def sample_mask(n_frames: int, mask_prob: float, span: int, seed) -> np.ndarray:
    """Span mask: starts drawn i.i.d. at mask_prob, each covering `span` frames."""
    if span < 1:
        raise ValueError(f"span must be >= 1, got {span}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = np.zeros(n_frames, dtype=bool)
    for start in np.nonzero(rng.random(n_frames) < mask_prob)[0]:
        mask[start : start + span] = True
    return mask


@dataclass(frozen=True)
class MaskParams:
    mask_prob: float = DEFAULT_MASK_PROB
    span: int = DEFAULT_MASK_SPAN


@dataclass
class TrainState:
    """Step counter, Adam state, and the seed feeding per-step mask draws."""

    optimizer: torch.optim.Adam
    seed: int
    step: int = 0
    loss_history: list = field(default_factory=list)


def make_train_state(model: TransformerModel, lr: float, seed: int) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS)
    return TrainState(optimizer=opt, seed=seed)


def masked_prediction_loss(model, mels, targets, frame_masks):
    """Mean cross-entropy over masked frames across a batch of utterances.

    Returns (loss tensor or None, total masked frames). Utterances are
    processed one at a time, so results are batch-composition independent.
    """
    dtype = next(model.parameters()).dtype
    parts = []
    n_masked = 0
    for mel, tgt, fm in zip(mels, targets, frame_masks):
        fm = np.asarray(fm, dtype=bool)
        if not fm.any():
            continue
        mel_t = torch.as_tensor(np.asarray(mel), dtype=dtype)
        fm_t = torch.as_tensor(fm)
        logits = model.logits(mel_t, frame_mask=fm_t)
        tgt_t = torch.as_tensor(np.asarray(tgt), dtype=torch.long)
        parts.append(F.cross_entropy(logits[fm_t], tgt_t[fm_t], reduction="sum"))
        n_masked += int(fm.sum())
    if n_masked == 0:
        return None, 0
    return sum(parts) / n_masked, n_masked


def pretrain_step(
    model: TransformerModel,
    state: TrainState,
    mels,
    targets,
    mask_params: MaskParams = MaskParams(),
):
    """One masked-prediction Adam step; returns the pre-update loss.

    Returns None (and leaves the model untouched) when the sampled masks hit
    no frame at all. Prune masks are re-applied after the update so masked
    weights stay exactly zero.
    """
    rng = substream(state.seed, "mask", str(state.step))
    frame_masks = [
        sample_mask(np.asarray(mel).shape[0], mask_params.mask_prob,
                    mask_params.span, rng)
        for mel in mels
    ]
    loss, n_masked = masked_prediction_loss(model, mels, targets, frame_masks)
    if loss is None:
        return None
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    model.apply_masks()
    state.step += 1
    value = float(loss.detach())
    state.loss_history.append(value)
    return value


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: tuple

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _kmeans_plus_plus(frames: np.ndarray, k: int, rng) -> np.ndarray:
    n = frames.shape[0]
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[rng.integers(n)]
    d2 = ((frames - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total == 0.0:
            # remaining points coincide with chosen centroids
            centroids[i:] = centroids[0]
            break
        probs = d2 / total
        idx = rng.choice(n, p=probs)
        centroids[i] = frames[idx]
        d2 = np.minimum(d2, ((frames - centroids[i]) ** 2).sum(axis=1))
    return centroids


def fit_cluster_targets(
    frames: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    rel_tol: float = 1e-4,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, deterministic per seed."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("empty corpus: need a non-empty (n_frames x dim) matrix")
    if k < 1 or k > frames.shape[0]:
        raise ValueError(f"k must be in [1, {frames.shape[0]}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(frames, k, rng)
    history = []
    assignments = np.zeros(frames.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = d2.argmin(axis=1)
        inertia = float(d2[np.arange(frames.shape[0]), assignments].sum())
        history.append(inertia)
        if len(history) >= 2:
            prev = history[-2]
            if inertia == 0.0 or (prev - inertia) <= rel_tol * max(prev, 1e-300):
                break
        for c in range(k):
            members = frames[assignments == c]
            if members.shape[0] > 0:
                centroids[c] = members.mean(axis=0)
    return KMeansResult(
        centroids=centroids, assignments=assignments, inertia_history=tuple(history)
    )


def assign_clusters(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels for new frames."""
    frames = np.asarray(frames, dtype=np.float64)
    d2 = ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)

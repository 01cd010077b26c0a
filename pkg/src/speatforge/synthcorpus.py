"""Deterministic synthetic stimuli with plantable group/attribute coupling.

Each stimulus is a harmonic stack (fundamental + 3 harmonics, amplitudes
1/h) under sinusoidal amplitude modulation, plus white noise. Group identity
is carried by the fundamental frequency band (targets X high, Y low) and
attribute identity by the modulation rate (A fast, B slow). `planted_bias`
couples attribute stimuli to the f0 of their associated target group: with
probability `planted_bias` an attribute draws the coupled group's f0, else
the neutral midpoint.

Calibration notes (the standardized effect size is brutally sensitive to
corpus geometry, so these are deliberate):

- The AM envelope is divided by its geometric mean, so modulation is
  invisible to time-averaged log-spectra (no rate/phase/duration leakage
  into the time-mean features) while remaining plainly visible in frame
  dynamics. The AM phase is randomized per stimulus.
- Attribute f0 is pinned exactly (no jitter): attribute-set sampling noise
  along the f0 axis projects straight onto the group axis and inflates null
  effect sizes otherwise.
- Per-stimulus noise level is drawn log-uniform over a wide range. This is
  the main within-group diversity axis; it keeps the score spread across
  targets dominated by group-independent variation, which is what keeps
  null-corpus effect sizes near zero.
"""

from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np

from speatforge.acoustics import Waveform, write_wav
from speatforge.seeding import substream

ROLES = ("target_X", "target_Y", "attr_A", "attr_B")

F0_MIN, F0_MAX = 60.0, 400.0
MIN_DURATION = 0.3

X_F0_RANGE = (225.0, 235.0)
Y_F0_RANGE = (125.0, 135.0)
X_F0_CENTER = 230.0
Y_F0_CENTER = 130.0
NEUTRAL_F0 = 180.0
A_AM_RANGE = (5.0, 7.0)
B_AM_RANGE = (1.5, 3.0)
NEUTRAL_AM_RANGE = (1.5, 7.0)
DURATION_RANGE = (0.5, 1.0)  # jittered to avoid frame-count confounds
TARGET_NOISE_RANGE = (0.01, 0.35)
ATTR_NOISE_RANGE = (0.02, 0.30)

N_HARMONICS = 3
AM_DEPTH = 0.5
HARMONIC_GAIN = 0.15
EDGE_FADE_SECONDS = 0.010


@dataclass(frozen=True)
class StimulusSpec:
    """Parameters that fully determine one synthetic stimulus."""

    stimulus_id: str
    group: str
    role: str
    f0: float
    am_rate: float
    duration: float
    noise_level: float
    seed: int

    def __post_init__(self):
        if not (F0_MIN <= self.f0 <= F0_MAX):
            raise ValueError(f"f0 {self.f0} outside [{F0_MIN}, {F0_MAX}] Hz")
        if self.duration < MIN_DURATION:
            raise ValueError(f"duration {self.duration} < {MIN_DURATION} s")
        if self.role not in ROLES and self.role != "pretrain":
            raise ValueError(f"unknown role: {self.role}")


def synth_stimulus(spec: StimulusSpec, sample_rate: int = 16000) -> Waveform:
    """Render a stimulus; bit-identical for the same spec and sample rate."""
    n = int(round(spec.duration * sample_rate))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(spec.seed)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    sig = np.zeros(n)
    for h in range(1, N_HARMONICS + 2):
        sig += np.sin(2.0 * np.pi * h * spec.f0 * t) / h
    envelope = 1.0 + AM_DEPTH * np.sin(2.0 * np.pi * spec.am_rate * t + am_phase)
    envelope = envelope / np.exp(np.mean(np.log(envelope)))
    sig = sig * envelope * HARMONIC_GAIN
    fade = min(int(EDGE_FADE_SECONDS * sample_rate), n // 2)
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade)
        sig[:fade] *= ramp
        sig[-fade:] *= ramp[::-1]
    if spec.noise_level > 0.0:
        sig = sig + rng.normal(0.0, spec.noise_level, n)
    return Waveform(samples=np.clip(sig, -1.0, 1.0), sample_rate=sample_rate)


@dataclass(frozen=True)
class CorpusCounts:
    targets_per_group: int = 60
    attributes_per_group: int = 24

    def __post_init__(self):
        if self.targets_per_group < 2 or self.attributes_per_group < 2:
            raise ValueError("need at least 2 stimuli per role")


@dataclass(frozen=True)
class ManifestEntry:
    stimulus_id: str
    role: str
    group: str
    path: str = ""


@dataclass(frozen=True)
class CorpusManifest:
    """Index of a generated corpus: who plays which role, and where."""

    category: str
    stimuli: tuple
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.stimulus_id for s in self.stimuli]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate stimulus ids in manifest")

    def by_role(self, role: str):
        return tuple(s for s in self.stimuli if s.role == role)

    def to_json(self) -> str:
        return json.dumps(
            {
                "category": self.category,
                "counts": dict(self.counts),
                "stimuli": [
                    {
                        "id": s.stimulus_id,
                        "path": s.path,
                        "role": s.role,
                        "group": s.group,
                    }
                    for s in self.stimuli
                ],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        data = json.loads(text)
        stimuli = tuple(
            ManifestEntry(
                stimulus_id=s["id"], role=s["role"], group=s["group"],
                path=s.get("path", ""),
            )
            for s in data["stimuli"]
        )
        return cls(category=data["category"], stimuli=stimuli,
                   counts=data.get("counts", {}))


def _log_uniform(rng, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(math.log(lo), math.log(hi))))


def _draw_specs(category, counts, planted_bias, rng):
    specs = []

    def stimulus_seed():
        return int(rng.integers(0, 2**63 - 1))

    for i in range(counts.targets_per_group):
        specs.append(StimulusSpec(
            stimulus_id=f"{category}_x{i:03d}", group="high_f0", role="target_X",
            f0=rng.uniform(*X_F0_RANGE), am_rate=rng.uniform(*NEUTRAL_AM_RANGE),
            duration=rng.uniform(*DURATION_RANGE),
            noise_level=_log_uniform(rng, *TARGET_NOISE_RANGE),
            seed=stimulus_seed(),
        ))
    for i in range(counts.targets_per_group):
        specs.append(StimulusSpec(
            stimulus_id=f"{category}_y{i:03d}", group="low_f0", role="target_Y",
            f0=rng.uniform(*Y_F0_RANGE), am_rate=rng.uniform(*NEUTRAL_AM_RANGE),
            duration=rng.uniform(*DURATION_RANGE),
            noise_level=_log_uniform(rng, *TARGET_NOISE_RANGE),
            seed=stimulus_seed(),
        ))
    # Attribute duration and am-rate quantile are drawn as matched A/B pairs:
    # each stimulus still jitters, but the A-vs-B sampling asymmetry on those
    # axes is zero by construction (it projects onto the group axis otherwise).
    for i in range(counts.attributes_per_group):
        am_q = rng.random()
        duration = rng.uniform(*DURATION_RANGE)
        for role, group, am_range, coupled_f0, tag in (
            ("attr_A", "am_fast", A_AM_RANGE, X_F0_CENTER, "a"),
            ("attr_B", "am_slow", B_AM_RANGE, Y_F0_CENTER, "b"),
        ):
            coupled = rng.random() < planted_bias
            specs.append(StimulusSpec(
                stimulus_id=f"{category}_{tag}{i:03d}", group=group, role=role,
                f0=coupled_f0 if coupled else NEUTRAL_F0,
                am_rate=am_range[0] + am_q * (am_range[1] - am_range[0]),
                duration=duration,
                noise_level=_log_uniform(rng, *ATTR_NOISE_RANGE),
                seed=stimulus_seed(),
            ))
    return specs


def build_corpus(
    category: str,
    counts: CorpusCounts = CorpusCounts(),
    planted_bias: float = 0.0,
    seed: int = 0,
    sample_rate: int = 16000,
):
    """Generate a corpus in memory; returns (manifest, {id: Waveform})."""
    if not (0.0 <= planted_bias <= 1.0):
        raise ValueError(f"planted_bias must be in [0, 1], got {planted_bias}")
    rng = substream(seed, "corpus", category)
    specs = _draw_specs(category, counts, planted_bias, rng)
    waveforms = {s.stimulus_id: synth_stimulus(s, sample_rate) for s in specs}
    manifest = CorpusManifest(
        category=category,
        stimuli=tuple(
            ManifestEntry(stimulus_id=s.stimulus_id, role=s.role, group=s.group)
            for s in specs
        ),
        counts={
            "target_X": counts.targets_per_group,
            "target_Y": counts.targets_per_group,
            "attr_A": counts.attributes_per_group,
            "attr_B": counts.attributes_per_group,
        },
    )
    return manifest, waveforms


def write_corpus(manifest: CorpusManifest, waveforms: dict, out_dir) -> CorpusManifest:
    """Write WAV files plus manifest.json; returns the manifest with paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in manifest.stimuli:
        wav_path = out_dir / f"{s.stimulus_id}.wav"
        write_wav(wav_path, waveforms[s.stimulus_id])
        entries.append(ManifestEntry(
            stimulus_id=s.stimulus_id, role=s.role, group=s.group,
            path=str(wav_path),
        ))
    written = CorpusManifest(
        category=manifest.category, stimuli=tuple(entries), counts=manifest.counts
    )
    (out_dir / "manifest.json").write_text(written.to_json())
    return written


def load_manifest(path) -> CorpusManifest:
    return CorpusManifest.from_json(Path(path).read_text())


def pretraining_specs(n_utterances: int, seed: int) -> list:
    """Specs for a pretraining set spanning the full parameter ranges."""
    rng = substream(seed, "corpus", "pretrain")
    specs = []
    for i in range(n_utterances):
        specs.append(StimulusSpec(
            stimulus_id=f"pretrain_{i:04d}", group="pretrain", role="pretrain",
            f0=rng.uniform(80.0, 280.0), am_rate=rng.uniform(1.0, 8.0),
            duration=rng.uniform(*DURATION_RANGE),
            noise_level=_log_uniform(rng, 0.01, 0.35),
            seed=int(rng.integers(0, 2**63 - 1)),
        ))
    return specs

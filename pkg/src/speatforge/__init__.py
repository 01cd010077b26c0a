"""Bias measurement for speech representation models under compression.

Subpackages group by pipeline stage: `acoustics` (classic DSP front-ends),
`speat` (the association effect-size metric), `model` (a desk-scale
masked-prediction transformer encoder), `compression` (head/row/weight
pruning and distillation), `synthcorpus` (deterministic synthetic stimuli),
and `harness`/`cli` (experiment orchestration and file formats).
"""

__version__ = "0.1.0"

from speatforge.speat import (
    BiasTest,
    EffectSizeReport,
    EmbeddingSequence,
    aggregate_embedding,
    association_score,
    classify_bias,
    effect_size,
    permutation_test,
)

__all__ = [
    "BiasTest",
    "EffectSizeReport",
    "EmbeddingSequence",
    "aggregate_embedding",
    "association_score",
    "classify_bias",
    "effect_size",
    "permutation_test",
]

"""Transfer-learning regimes as freeze masks over the parameter groups.

The network splits into three subnetworks: ARNN (filterbank, epoch-level GRU
with its output projection, attention), SeqRNN (sequence-level GRU with its
output projection), and the softmax classifier. A regime chooses which of
these stay trainable during finetuning on the target cohort:

    direct          nothing trainable; the pretrained network is used as-is
    softmax         softmax.*
    softmax-arnn    softmax.* + filterbank.V + ernn.* + att.*
    softmax-seqrnn  softmax.* + seqrnn.*
    all             everything

The attention parameters and the per-subnetwork output projections belong to
their subnetwork's group, not to the softmax group.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import evaluation, training
from .dataio import Recording
from .network import HyperParams, ModelParams, param_shapes


class Regime(Enum):
    DIRECT_TRANSFER = "direct"
    SOFTMAX_ONLY = "softmax"
    SOFTMAX_PLUS_ARNN = "softmax-arnn"
    SOFTMAX_PLUS_SEQRNN = "softmax-seqrnn"
    ENTIRE_NETWORK = "all"

    @classmethod
    def from_cli(cls, name: str) -> "Regime":
        for regime in cls:
            if regime.value == name:
                return regime
        raise ValueError(
            f"unknown regime {name!r}; expected one of "
            f"{', '.join(r.value for r in cls)}"
        )


ARNN_PREFIXES = ("filterbank.", "ernn.", "att.")
SEQRNN_PREFIXES = ("seqrnn.",)
SOFTMAX_PREFIXES = ("softmax.",)

_TRAINABLE_PREFIXES = {
    Regime.DIRECT_TRANSFER: (),
    Regime.SOFTMAX_ONLY: SOFTMAX_PREFIXES,
    Regime.SOFTMAX_PLUS_ARNN: SOFTMAX_PREFIXES + ARNN_PREFIXES,
    Regime.SOFTMAX_PLUS_SEQRNN: SOFTMAX_PREFIXES + SEQRNN_PREFIXES,
    Regime.ENTIRE_NETWORK: SOFTMAX_PREFIXES + ARNN_PREFIXES + SEQRNN_PREFIXES,
}


def mask_for(regime: Regime, hp: HyperParams | None = None) -> dict[str, bool]:
    """Trainability per canonical parameter name for one regime."""
    hp = hp or HyperParams()
    prefixes = _TRAINABLE_PREFIXES[regime]
    return {
        name: name.startswith(prefixes) if prefixes else False
        for name in param_shapes(hp)
    }


@dataclass
class CohortSplit:
    train: list[Recording]
    val: list[Recording]
    test: list[Recording]


def run_regime(
    regime: Regime,
    pretrained: ModelParams,
    split: CohortSplit,
    cfg: training.TrainConfig,
    log_fn=None,
):
    """Finetune under ``regime`` (direct transfer skips finetuning entirely)
    and evaluate on the held-out test recordings."""
    if regime is Regime.DIRECT_TRANSFER:
        adapted = pretrained.copy()
    else:
        adapted = training.finetune(
            pretrained,
            mask_for(regime, pretrained.hp),
            split.train,
            split.val,
            cfg,
            log_fn=log_fn,
        )
    report, _ = evaluation.evaluate_cohort(adapted, split.test)
    return adapted, report

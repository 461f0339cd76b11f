"""Trained model bundle: frozen backbone + head chain + fusion stages.

Also owns the per-sample cost table. Exiting at stage m is charged the
backbone prefix up to tap m plus every head evaluated on the way (1..m)
and, when fusion stages are in play, every stage up to m; falling through
to the full network pays for the whole backbone plus all heads (and all
stages). Nothing evaluated is ever free, including heads that did not
produce the exit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneModel
from .ensembles import ensemble_flops, stage_outputs
from .exceptions import ConfigError
from .heads import cascade_forward_all


@dataclass
class BundleOutputs:
    """Numpy views of everything the exit policies consume."""

    head_log_probs: list    # M arrays [N, K]
    head_probs: list        # M arrays [N, K]
    stage_q: list | None    # M arrays [N, K] when fusion stages exist
    final_logits: np.ndarray  # [N, K]


@dataclass
class ModelBundle:
    backbone: BackboneModel
    heads: list
    ensembles: list | None = None
    ensemble_kind: str = "geometric"

    def __post_init__(self):
        if self.ensembles is not None and len(self.ensembles) != len(self.heads):
            raise ConfigError(
                f"{len(self.ensembles)} fusion stages for {len(self.heads)} heads")

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes

    def forward_outputs(self, inputs: np.ndarray, chunk: int = 256) -> BundleOutputs:
        """Head and final outputs for a batch, processed in memory-bounded chunks."""
        m = self.num_heads
        log_parts: list = [[] for _ in range(m)]
        prob_parts: list = [[] for _ in range(m)]
        final_parts = []
        for lo in range(0, inputs.shape[0], chunk):
            taps = self.backbone.forward_with_taps(Tensor(inputs[lo:lo + chunk]))
            outs = cascade_forward_all(self.heads, taps)
            for j, (logit_t, prob_t) in enumerate(zip(outs.logits, outs.probs)):
                z = logit_t.data
                zmax = z.max(axis=-1, keepdims=True)
                shifted = z - zmax
                log_parts[j].append(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
                prob_parts[j].append(prob_t.data)
            final_parts.append(taps.final.data)
        log_probs = [np.concatenate(p) for p in log_parts]
        probs = [np.concatenate(p) for p in prob_parts]
        q = None
        if self.ensembles is not None:
            q = stage_outputs(log_probs, self.ensembles, kind=self.ensemble_kind)
        return BundleOutputs(head_log_probs=log_probs, head_probs=probs,
                             stage_q=q, final_logits=np.concatenate(final_parts))

    def cost_table(self, include_ensembles: bool) -> np.ndarray:
        """costs[m-1] = cost of exiting at stage m; costs[M] = full network."""
        m_total = self.num_heads
        k = self.num_classes
        head_costs = [h.flops() for h in self.heads]
        costs = []
        for m in range(1, m_total + 1):
            c = self.backbone.prefix_flops(m) + sum(head_costs[:m])
            if include_ensembles:
                c += sum(ensemble_flops(j, k) for j in range(1, m + 1))
            costs.append(c)
        full = self.backbone.total_flops() + sum(head_costs)
        if include_ensembles:
            full += sum(ensemble_flops(j, k) for j in range(1, m_total + 1))
        costs.append(full)
        return np.asarray(costs, dtype=np.int64)

    def full_network_flops(self) -> int:
        """Base-network-only cost; budget fractions are relative to this."""
        return self.backbone.total_flops()

    def param_entries(self) -> list:
        entries = list(self.backbone.param_entries())
        for head in self.heads:
            entries.extend(head.param_entries())
        if self.ensembles is not None:
            for params in self.ensembles:
                entries.extend(params.param_entries())
        return entries

    def head_param_bytes(self) -> bytes:
        return b"".join(h.param_bytes() for h in self.heads)

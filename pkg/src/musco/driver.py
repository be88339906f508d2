"""The multi-stage compression loop: select ranks, factorize, fine-tune.

Each iteration proposes ranks for the scheduled layers, compresses them
(first-time layers are decomposed and substituted, already-decomposed layers
are recompressed in factorized form), then fine-tunes the whole model. The
loop stops when a target compression ratio is reached, the step budget is
exhausted, or rank proposals stop changing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .decomp import (
    AlsOptions,
    MultilinearRank2,
    cpd3_decompose,
    cpd3_recompress,
    svd_decompose,
    svd_recompress,
    tucker2_decompose,
    tucker2_recompress,
)
from .modelgraph import (
    CONV2D,
    FC,
    ModelGraph,
    count_flops,
    count_params,
    extract_group_factors,
    substitute_conv_cpd3,
    substitute_conv_tucker2,
    substitute_fc_svd,
    update_group_weights,
)
from .rank_select import (
    LayerState,
    RankStrategy,
    cpd3_params,
    select_ranks,
    svd_params,
    tucker2_params,
)
from .tensor import reshape_kernel
from .trainer import TrainConfig, TrainHistory, evaluate, fine_tune

__all__ = [
    "MuscoConfig",
    "LayerRecord",
    "IterationRecord",
    "CompressionReport",
    "musco_run",
    "one_iteration",
    "check_stop",
    "run_name",
]


@dataclass(frozen=True)
class MuscoConfig:
    """Settings for one compression run."""

    strategy: RankStrategy
    steps: int = 1
    conv_scheme: str = "tucker2"  # "tucker2" | "cpd3"
    fc_scheme: str = "svd"  # "svd" | "skip"
    layer_fraction: float = 1.0
    target_global_ratio: Optional[float] = None
    rank_stabilization_window: int = 2
    finetune: TrainConfig = field(default_factory=TrainConfig)
    als: AlsOptions = field(default_factory=AlsOptions)

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.layer_fraction <= 1.0:
            raise ValueError("layer_fraction must lie in (0, 1]")
        if self.conv_scheme not in ("tucker2", "cpd3"):
            raise ValueError(f"unknown conv scheme {self.conv_scheme!r}")
        if self.fc_scheme not in ("svd", "skip"):
            raise ValueError(f"unknown fc scheme {self.fc_scheme!r}")
        if self.rank_stabilization_window < 1:
            raise ValueError("rank_stabilization_window must be >= 1")


@dataclass
class LayerRecord:
    """What happened to one layer during one iteration."""

    source_id: int
    scheme: str
    action: str  # "decomposed" | "recompressed" | "skipped" | "unchanged"
    reason: str = ""
    ranks_before: tuple[int, ...] = ()
    ranks_after: tuple[int, ...] = ()
    weight_params_before: int = 0
    weight_params_after: int = 0


@dataclass
class IterationRecord:
    index: int
    layers: list[LayerRecord] = field(default_factory=list)
    eval_acc_before_finetune: float = 0.0
    eval_acc_after_finetune: float = 0.0
    weight_params_total: int = 0
    flops_total: int = 0
    any_rank_change: bool = False
    finetune_history: Optional[TrainHistory] = None


@dataclass
class CompressionReport:
    """Full record of a compression run."""

    run_name: str
    baseline_weight_params: int = 0
    baseline_flops: int = 0
    iterations: list[IterationRecord] = field(default_factory=list)
    rank_history: dict[int, list[tuple[int, ...]]] = field(default_factory=dict)
    stop_reason: str = ""

    @property
    def final_weight_params(self) -> int:
        if not self.iterations:
            return self.baseline_weight_params
        return self.iterations[-1].weight_params_total

    @property
    def global_param_ratio(self) -> float:
        return self.baseline_weight_params / max(self.final_weight_params, 1)

    @property
    def global_flops_ratio(self) -> float:
        if not self.iterations:
            return 1.0
        return self.baseline_flops / max(self.iterations[-1].flops_total, 1)


def run_name(cfg: MuscoConfig) -> str:
    """Conventional run label, e.g. MUSCO(nx, 2, 2) or MUSCO(vbmf, 0.7, 3 x 1/3)."""
    if cfg.strategy.mode == "constant_rate":
        mode, param = "nx", f"{cfg.strategy.alpha:g}"
    else:
        mode, param = "vbmf", f"{cfg.strategy.weakening_factor:g}"
    steps = str(cfg.steps)
    if cfg.layer_fraction < 1.0:
        steps += f" x {Fraction(cfg.layer_fraction).limit_denominator(100)}"
    return f"MUSCO({mode}, {param}, {steps})"


# ---------------------------------------------------------------------------
# Layer scheduling and per-layer compression
# ---------------------------------------------------------------------------


def _eligible_source_ids(g: ModelGraph, cfg: MuscoConfig) -> list[int]:
    """Layers the run may compress, in original layer order (stable)."""
    ids = []
    for layer in g.layers:
        if layer.kind == CONV2D and not g.in_group(layer.id):
            ids.append(layer.id)
        elif layer.kind == FC and cfg.fc_scheme != "skip" and not g.in_group(layer.id):
            ids.append(layer.id)
    ids.extend(gr.source_id for gr in g.groups)
    return sorted(ids)


def _scheduled(ids: list[int], fraction: float, iteration: int) -> list[int]:
    """Deterministic round-robin: each layer is visited once per cycle."""
    if fraction >= 1.0:
        return ids
    cycle = max(1, round(1.0 / fraction))
    return [i for pos, i in enumerate(ids) if pos % cycle == iteration % cycle]


def _layer_state(g: ModelGraph, source_id: int, cfg: MuscoConfig) -> LayerState:
    try:
        group = g.group_by_source(source_id)
    except KeyError:
        group = None
    if group is not None:
        factors = extract_group_factors(g, source_id)
        if group.scheme == "svd":
            return LayerState(kind=FC, scheme="svd", l_in=group.l_in,
                              l_out=group.l_out, factors=factors)
        return LayerState(
            kind=CONV2D, scheme=group.scheme, c_in=group.c_in, c_out=group.c_out,
            d=group.d, factors=factors,
        )
    layer = g.layer_by_id(source_id)
    if layer.kind == FC:
        return LayerState(kind=FC, scheme="svd", l_in=layer.l_in, l_out=layer.l_out,
                          weights=layer.weights)
    return LayerState(
        kind=CONV2D, scheme=cfg.conv_scheme, c_in=layer.c_in, c_out=layer.c_out,
        d=layer.d, weights=layer.weights,
    )


def _current_ranks(state: LayerState) -> tuple[int, ...]:
    if state.compressed:
        f = state.factors
        return tuple(f.rank) if hasattr(f.rank, "__len__") else (f.rank,)
    if state.kind == FC:
        return (min(state.l_in, state.l_out),)
    if state.scheme == "tucker2":
        return (state.c_out, state.c_in)
    # A fresh conv layer has no CP rank yet; use the weakening convention.
    return (max(state.c_in, state.c_out),)


def _compress_layer(
    g: ModelGraph, source_id: int, state: LayerState, ranks: tuple[int, ...],
    cfg: MuscoConfig,
) -> ModelGraph:
    if state.scheme == "tucker2":
        rank = MultilinearRank2(*ranks)
        if state.compressed:
            factors = tucker2_recompress(state.factors, rank)
            return update_group_weights(g, source_id, factors)
        factors = tucker2_decompose(state.weights, rank)
        return substitute_conv_tucker2(g, source_id, factors)
    if state.scheme == "cpd3":
        if state.compressed:
            factors, _ = cpd3_recompress(state.factors, ranks[0], cfg.als)
            return update_group_weights(g, source_id, factors)
        factors, _ = cpd3_decompose(reshape_kernel(state.weights), ranks[0], cfg.als)
        return substitute_conv_cpd3(g, source_id, factors)
    if state.scheme == "svd":
        if state.compressed:
            factors = svd_recompress(state.factors, ranks[0])
            return update_group_weights(g, source_id, factors)
        factors = svd_decompose(state.weights, ranks[0])
        return substitute_fc_svd(g, source_id, factors)
    raise ValueError(f"unknown scheme {state.scheme!r}")


def _source_weight_params(g: ModelGraph, source_id: int) -> int:
    counts = count_params(g).per_layer
    try:
        group = g.group_by_source(source_id)
    except KeyError:
        return counts[source_id][0]
    return sum(counts[i][0] for i in group.member_ids)


def _proposed_params(state: LayerState, ranks: tuple[int, ...]) -> int:
    if state.scheme == "tucker2":
        return tucker2_params(state.c_in, state.c_out, state.d, ranks[0], ranks[1])
    if state.scheme == "cpd3":
        return cpd3_params(state.c_in, state.c_out, state.d, ranks[0])
    return svd_params(state.l_in, state.l_out, ranks[0])


# ---------------------------------------------------------------------------
# Iterations and the run loop
# ---------------------------------------------------------------------------


def one_iteration(
    g: ModelGraph,
    train_data,
    eval_data,
    cfg: MuscoConfig,
    iteration_index: int,
) -> tuple[ModelGraph, IterationRecord]:
    """One compress-and-fine-tune pass over the scheduled layers."""
    record = IterationRecord(index=iteration_index)
    scheduled = _scheduled(
        _eligible_source_ids(g, cfg), cfg.layer_fraction, iteration_index
    )

    for source_id in scheduled:
        state = _layer_state(g, source_id, cfg)
        decision = select_ranks(state, cfg.strategy)
        before = _current_ranks(state)
        params_before = _source_weight_params(g, source_id)
        if decision.skip:
            record.layers.append(
                LayerRecord(
                    source_id=source_id, scheme=state.scheme, action="skipped",
                    reason=decision.reason, ranks_before=before, ranks_after=before,
                    weight_params_before=params_before,
                    weight_params_after=params_before,
                )
            )
            continue
        ranks = decision.ranks
        if state.compressed and ranks == before:
            record.layers.append(
                LayerRecord(
                    source_id=source_id, scheme=state.scheme, action="unchanged",
                    reason="proposal equals current ranks", ranks_before=before,
                    ranks_after=before, weight_params_before=params_before,
                    weight_params_after=params_before,
                )
            )
            continue
        if not state.compressed and _proposed_params(state, ranks) >= params_before:
            # Near-full-rank factorizations of a dense layer cost more
            # parameters than they save; leave the layer alone.
            record.layers.append(
                LayerRecord(
                    source_id=source_id, scheme=state.scheme, action="skipped",
                    reason="no parameter reduction at proposed ranks",
                    ranks_before=before, ranks_after=before,
                    weight_params_before=params_before,
                    weight_params_after=params_before,
                )
            )
            continue
        g = _compress_layer(g, source_id, state, ranks, cfg)
        record.any_rank_change = True
        record.layers.append(
            LayerRecord(
                source_id=source_id, scheme=state.scheme,
                action="recompressed" if state.compressed else "decomposed",
                ranks_before=before, ranks_after=ranks,
                weight_params_before=params_before,
                weight_params_after=_source_weight_params(g, source_id),
            )
        )

    record.eval_acc_before_finetune, _ = evaluate(g, eval_data)
    if cfg.finetune.epochs > 0:
        g, history = fine_tune(g, train_data, eval_data, cfg.finetune)
        record.finetune_history = history
    record.eval_acc_after_finetune, _ = evaluate(g, eval_data)
    record.weight_params_total = count_params(g).weight_total
    record.flops_total = count_flops(g).total
    return g, record


def check_stop(report: CompressionReport, cfg: MuscoConfig) -> tuple[bool, str]:
    """Stop decision after the most recent iteration."""
    if not report.iterations:
        raise ValueError("check_stop requires at least one recorded iteration")
    if (
        cfg.target_global_ratio is not None
        and report.global_param_ratio >= cfg.target_global_ratio
    ):
        return True, "ratio_reached"
    window = cfg.rank_stabilization_window
    if len(report.iterations) >= window and all(
        not it.any_rank_change for it in report.iterations[-window:]
    ):
        return True, "ranks_stabilized"
    if len(report.iterations) >= cfg.steps:
        return True, "max_steps"
    return False, ""


def musco_run(
    g: ModelGraph,
    train_data,
    eval_data,
    cfg: MuscoConfig,
) -> tuple[ModelGraph, CompressionReport]:
    """Run the full compression loop and return the final model plus report."""
    report = CompressionReport(
        run_name=run_name(cfg),
        baseline_weight_params=count_params(g).weight_total,
        baseline_flops=count_flops(g).total,
    )
    for source_id in _eligible_source_ids(g, cfg):
        state = _layer_state(g, source_id, cfg)
        report.rank_history[source_id] = [_current_ranks(state)]

    if cfg.target_global_ratio is not None and cfg.target_global_ratio <= 1.0:
        report.stop_reason = "ratio_reached"
        return g, report

    for k in range(cfg.steps):
        g, record = one_iteration(g, train_data, eval_data, cfg, k)
        report.iterations.append(record)
        for rec in record.layers:
            report.rank_history[rec.source_id].append(rec.ranks_after)
        stop, reason = check_stop(report, cfg)
        if stop:
            report.stop_reason = reason
            break
    return g, report

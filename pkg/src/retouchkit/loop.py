"""The closed perception-reasoning-action controller: iterate
perceive -> (if salient) diagnose -> act -> re-perceive until the map max
drops below the threshold or the iteration cap is hit, producing a full
audit trace.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .media_io import ImageBuffer
from .providers import (
    INSTRUCTION_DRIVEN,
    InpaintTool,
    PerceptionProvider,
    ProviderError,
    ReasoningProvider,
    ToolPolicy,
    select_tool,
)
from .saliency import RegionProposal, propose_masks
from .textmetrics import Diagnosis

STOP_CONVERGED = "converged"
STOP_MAX_ITERATIONS = "max_iterations"
STOP_PROVIDER_ERROR = "provider_error"


@dataclass(frozen=True)
class LoopConfig:
    tau_s: float = 0.5
    max_iterations: int = 3
    dilation_radius: int = 1
    min_area: int = 4
    tool_policy: ToolPolicy = field(default_factory=ToolPolicy)
    epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.tau_s <= 1.0:
            raise ValueError("tau_s must lie in [0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class Action:
    region_id: str
    tool: str
    instruction: Optional[str] = None


@dataclass(frozen=True)
class IterationRecord:
    t: int
    max_saliency: float
    regions: tuple[RegionProposal, ...]
    diagnoses: tuple[Diagnosis, ...]
    actions: tuple[Action, ...]
    image_after: ImageBuffer


@dataclass(frozen=True)
class LoopTrace:
    records: tuple[IterationRecord, ...]
    stop_reason: str
    final_image: ImageBuffer
    error: Optional[str] = None


@dataclass(frozen=True)
class LoopProviders:
    perception: PerceptionProvider
    reasoning: ReasoningProvider
    tools: Sequence[InpaintTool]


@dataclass(frozen=True)
class LoopInput:
    """One item of a batch run; each item carries its own providers so
    mock scene state never crosses items."""

    image: ImageBuffer
    prompt: str
    providers: LoopProviders


def run_loop(
    image: ImageBuffer, prompt: str, providers: LoopProviders, cfg: LoopConfig
) -> LoopTrace:
    """Run the retouching state machine to convergence or the iteration cap."""
    records: list[IterationRecord] = []
    current = image
    try:
        for t in range(1, cfg.max_iterations + 1):
            smap = providers.perception.perceive(current, prompt)
            peak = float(smap.to_array().max())
            if peak < cfg.tau_s:
                records.append(
                    IterationRecord(
                        t=t,
                        max_saliency=peak,
                        regions=(),
                        diagnoses=(),
                        actions=(),
                        image_after=current,
                    )
                )
                return LoopTrace(tuple(records), STOP_CONVERGED, current)
            regions = propose_masks(smap, cfg.tau_s, cfg.dilation_radius, cfg.min_area)
            diagnoses = providers.reasoning.diagnose(current, prompt, regions)
            actions: list[Action] = []
            # regions come back in peak-saliency order already
            for region, diagnosis in zip(regions, diagnoses):
                tool = select_tool(providers.tools, diagnosis, cfg.tool_policy)
                instruction = None
                if tool.descriptor.kind == INSTRUCTION_DRIVEN:
                    instruction = "fix %s: %s" % (diagnosis.category.value, diagnosis.description)
                current = tool.inpaint(current, mask=region.mask, instruction=instruction)
                actions.append(
                    Action(
                        region_id=diagnosis.region_id,
                        tool=tool.descriptor.name,
                        instruction=instruction,
                    )
                )
            records.append(
                IterationRecord(
                    t=t,
                    max_saliency=peak,
                    regions=tuple(regions),
                    diagnoses=tuple(diagnoses),
                    actions=tuple(actions),
                    image_after=current,
                )
            )
        return LoopTrace(tuple(records), STOP_MAX_ITERATIONS, current)
    except ProviderError as exc:
        return LoopTrace(tuple(records), STOP_PROVIDER_ERROR, current, error=str(exc))


def run_batch(items: Sequence[LoopInput], cfg: LoopConfig, parallelism: int = 1) -> list[LoopTrace]:
    """Order-preserving batch of independent loop runs; one failing item
    never aborts the others."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(item: LoopInput) -> LoopTrace:
        try:
            return run_loop(item.image, item.prompt, item.providers, cfg)
        except Exception as exc:  # isolate unexpected per-item failures
            return LoopTrace((), STOP_PROVIDER_ERROR, item.image, error=str(exc))

    if parallelism == 1:
        return [one(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, items))


def trace_to_report(trace: LoopTrace) -> dict:
    """Flat summary of a trace, JSON-serializable."""
    return {
        "iterations": len(trace.records),
        "actions_total": sum(len(r.actions) for r in trace.records),
        "initial_max_saliency": trace.records[0].max_saliency if trace.records else None,
        "final_max_saliency": trace.records[-1].max_saliency if trace.records else None,
        "converged": trace.stop_reason == STOP_CONVERGED,
    }


def trace_to_json(trace: LoopTrace, image_ref: str = "final.pnm") -> str:
    """Serialize a trace as deterministic JSON; images appear as file refs."""
    obj = {
        "stop_reason": trace.stop_reason,
        "error": trace.error,
        "final_image": image_ref,
        "records": [
            {
                "t": rec.t,
                "max_saliency": round(rec.max_saliency, 9),
                "regions": [
                    {
                        "bbox": list(r.bbox),
                        "area": r.area,
                        "peak_saliency": round(r.peak_saliency, 9),
                    }
                    for r in rec.regions
                ],
                "diagnoses": [
                    {
                        "region_id": d.region_id,
                        "category": d.category.value,
                        "description": d.description,
                        "severity": round(d.severity, 9),
                    }
                    for d in rec.diagnoses
                ],
                "actions": [
                    {"region_id": a.region_id, "tool": a.tool, "instruction": a.instruction}
                    for a in rec.actions
                ],
            }
            for rec in trace.records
        ],
    }
    return json.dumps(obj, sort_keys=True, indent=2)

import operator
from concurrent.futures import Future
from functools import partial
from typing import Annotated, Any, Dict, Optional, TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from src.guard.domain import AudioBuffer, Decision, EmbeddingSequence, LogMelSpectrogram
from src.guard.workflow.nodes import (
    ClassificationResources,
    decide_node,
    encode_node,
    features_node,
    head_node,
    pool_node,
    prepare_node,
)

# nodes after "prepare" make up the classification path proper
CLASSIFICATION_NODES = ("features", "encode", "pool", "head", "decide")


class ClassificationState(TypedDict, total=False):
    audio_bytes: bytes
    threshold: float
    transcribe: bool
    buffer: AudioBuffer
    spectrogram: LogMelSpectrogram
    transcript_future: Optional[Future]
    embeddings: EmbeddingSequence
    pooled: np.ndarray
    p_malicious: float
    decision: Decision
    timings: Annotated[Dict[str, float], operator.or_]


def create_classification_workflow(resources: ClassificationResources):
    """Create the linear classification graph

    prepare -> features -> encode -> pool -> head -> decide

    Node errors propagate out of invoke() unchanged so callers see the typed
    GuardError of the failing stage.
    """
    workflow = StateGraph(ClassificationState)

    workflow.add_node("prepare", partial(prepare_node, resources=resources))
    workflow.add_node("features", partial(features_node, resources=resources))
    workflow.add_node("encode", partial(encode_node, resources=resources))
    workflow.add_node("pool", partial(pool_node, resources=resources))
    workflow.add_node("head", partial(head_node, resources=resources))
    workflow.add_node("decide", partial(decide_node, resources=resources))

    workflow.add_edge("prepare", "features")
    workflow.add_edge("features", "encode")
    workflow.add_edge("encode", "pool")
    workflow.add_edge("pool", "head")
    workflow.add_edge("head", "decide")
    workflow.add_edge("decide", END)

    workflow.set_entry_point("prepare")

    return workflow.compile()


def classification_latency_ms(state: Dict[str, Any]) -> float:
    timings = state.get("timings", {})
    return float(sum(timings.get(name, 0.0) for name in CLASSIFICATION_NODES))

"""Continual accumulation of per-weight importance across datasets.

The accumulator holds one nonnegative matrix per prunable layer. Every
sample adds ``|W * grad|`` elementwise (W is the base, unmasked weight), so
entries only ever grow, and the total after a sequence of datasets is the
same regardless of the order in which they were visited. Masks derived from
the accumulator at intermediate steps still depend on what has been seen so
far, which is the whole point of keeping the state.

The state is the only artifact carried between datasets; its size depends
on the model, never on how much data has been consumed.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, UsageError
from .model import Network

STATE_MAGIC = b"IMPST001"
STATE_VERSION = 1


@dataclass
class ImportanceState:
    per_layer: dict[int, np.ndarray]
    datasets_seen: list[str] = field(default_factory=list)
    sample_count: dict[str, int] = field(default_factory=dict)


def init_state(net: Network) -> ImportanceState:
    """All-zero accumulator, one matrix per prunable layer."""
    indices = net.prunable_indices()
    if not indices:
        raise UsageError("network has no prunable (linear) layers")
    per_layer = {i: np.zeros_like(net.layers[i].weight) for i in indices}
    return ImportanceState(per_layer=per_layer)


def accumulate(
    state: ImportanceState, layer_index: int, weight: np.ndarray, grad: np.ndarray
) -> ImportanceState:
    """Add ``|weight * grad|`` to one layer's accumulator (in place)."""
    if layer_index not in state.per_layer:
        raise UsageError(f"layer {layer_index} is not tracked by this state")
    acc = state.per_layer[layer_index]
    weight = np.asarray(weight, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if weight.shape != acc.shape or grad.shape != acc.shape:
        raise ShapeError(
            f"layer {layer_index}: weight {weight.shape} / grad {grad.shape} "
            f"not congruent to accumulator {acc.shape}"
        )
    acc += np.abs(weight * grad)
    return state


def finish_dataset(state: ImportanceState, corpus_name: str, n_samples: int) -> ImportanceState:
    """Mark a dataset as consumed; the accumulated matrices carry over as-is."""
    if state.datasets_seen and state.datasets_seen[-1] == corpus_name:
        raise UsageError(f"dataset {corpus_name!r} was already the last one finished")
    state.datasets_seen.append(corpus_name)
    state.sample_count[corpus_name] = state.sample_count.get(corpus_name, 0) + n_samples
    return state


def save_state(state: ImportanceState, path) -> None:
    manifest = {
        "datasets_seen": state.datasets_seen,
        "sample_count": state.sample_count,
        "layers": [
            {"index": i, "rows": a.shape[0], "cols": a.shape[1]}
            for i, a in sorted(state.per_layer.items())
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<II", STATE_VERSION, len(blob)))
    buf.write(blob)
    for i in sorted(state.per_layer):
        buf.write(np.ascontiguousarray(state.per_layer[i], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_state(path, net: Network | None = None) -> ImportanceState:
    """Load an accumulator; validates layer shapes against ``net`` if given."""
    with open(path, "rb") as fh:
        magic = fh.read(len(STATE_MAGIC))
        if magic != STATE_MAGIC:
            raise FormatError(f"bad state magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError("state file truncated in header")
        version, blob_len = struct.unpack("<II", header)
        if version != STATE_VERSION:
            raise FormatError(f"unsupported state version {version}")
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError("state file truncated in manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"state manifest unreadable: {exc}") from exc
        per_layer: dict[int, np.ndarray] = {}
        for entry in manifest["layers"]:
            n = entry["rows"] * entry["cols"]
            data = fh.read(8 * n)
            if len(data) != 8 * n:
                raise FormatError(f"state payload truncated at layer {entry['index']}")
            per_layer[entry["index"]] = (
                np.frombuffer(data, dtype="<f8")
                .astype(np.float64)
                .reshape(entry["rows"], entry["cols"])
            )
    state = ImportanceState(
        per_layer=per_layer,
        datasets_seen=list(manifest["datasets_seen"]),
        sample_count={k: int(v) for k, v in manifest["sample_count"].items()},
    )
    if net is not None:
        _check_against(state, net)
    return state


def _check_against(state: ImportanceState, net: Network) -> None:
    expected = set(net.prunable_indices())
    if set(state.per_layer) != expected:
        raise ShapeError(
            f"state tracks layers {sorted(state.per_layer)}, "
            f"network has prunable layers {sorted(expected)}"
        )
    for i in expected:
        if state.per_layer[i].shape != net.layers[i].weight.shape:
            raise ShapeError(
                f"layer {i}: state shape {state.per_layer[i].shape} != "
                f"weight shape {net.layers[i].weight.shape}"
            )

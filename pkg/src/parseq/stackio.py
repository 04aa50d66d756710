"""On-disk formats for stacks and solver traces.

Binary stack layout (little-endian throughout):

    bytes 0-4   magic b"PSDQ1"
    uint32      S   number of rows
    uint32      D   state dimension
    uint32      T   full chain length the stack was sampled under
    float64     eta noise scale
    S*D float64 row-major payload

CSV stacks carry one row per state as ``k,t,dim0..dim{D-1}`` where k is
the stack index and t the natural timestep of that row.  Residual traces
are ``iter,residual_l2`` with 0-indexed iterations.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .errors import ParseError, ShapeError
from .schedule import TimestepSubsequence

MAGIC = b"PSDQ1"
_HEADER = struct.Struct("<5sIIId")


def write_stack(path: str, states: np.ndarray, chain_T: int, eta: float) -> None:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if states.ndim != 2:
        raise ShapeError(f"stack payload must be 2-d, got shape {states.shape}")
    S, D = states.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, S, D, int(chain_T), float(eta)))
        fh.write(states.astype("<f8").tobytes(order="C"))


def read_stack(path: str) -> tuple[np.ndarray, int, float]:
    """Returns (states of shape (S, D), chain T, eta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ParseError(f"stack file {path} is too short for its header")
    magic, S, D, T, eta = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ParseError(f"stack file {path} has bad magic {magic!r}")
    expected = _HEADER.size + 8 * S * D
    if len(blob) != expected:
        raise ParseError(
            f"stack file {path} holds {len(blob)} bytes, expected {expected}"
        )
    payload = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    return payload.reshape(S, D).astype(np.float64), int(T), float(eta)


def stack_t_labels(subsequence: TimestepSubsequence) -> list[int]:
    """Timestep label of each stack row: row k holds position S - 1 - k, and
    the bottom row is the denoised state at t = 0."""
    taus = list(subsequence.indices)
    return [taus[i] for i in range(len(taus) - 2, -1, -1)] + [0]


def write_stack_csv(path: str, states: np.ndarray, t_labels: list[int]) -> None:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if len(t_labels) != states.shape[0]:
        raise ShapeError(
            f"{len(t_labels)} t labels for {states.shape[0]} stack rows"
        )
    D = states.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "t"] + [f"dim{d}" for d in range(D)])
        for k, (t, row) in enumerate(zip(t_labels, states)):
            writer.writerow([k, t] + [repr(float(v)) for v in row])


def write_residual_csv(path: str, residuals: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "residual_l2"])
        for it, r in enumerate(residuals):
            writer.writerow([it, repr(float(r))])


def write_trace_csv(path: str, traces: list[list[float]]) -> None:
    """Residual traces of several runs side by side plus a min/max envelope.

    Rows cover the longest trace; runs that converged earlier leave their
    cell empty, and the envelope is taken over the cells present.
    """
    if not traces:
        raise ShapeError("need at least one trace")
    depth = max(len(t) for t in traces)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iter"]
            + [f"run{j}" for j in range(len(traces))]
            + ["res_min", "res_max"]
        )
        for it in range(depth):
            present = [t[it] for t in traces if it < len(t)]
            cells = [repr(float(t[it])) if it < len(t) else "" for t in traces]
            writer.writerow(
                [it] + cells + [repr(float(min(present))), repr(float(max(present)))]
            )

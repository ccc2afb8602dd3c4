"""File formats: trajectory batches (CSV and binary), MDP specs, fitted Q-functions."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedInput
from .fqi import FqiResult
from .mdp import MdpSpec, TrajectoryBatch
from .regression import LassoFit

MAGIC = b"RFQI"
BINARY_VERSION = 1
# magic, version, n, T, d, num_actions, 4 pad bytes -> 32 bytes
_HEADER = struct.Struct("<4sIQIII4x")
assert _HEADER.size == 32


def _fmt(x: float) -> str:
    # repr round-trips a float64 exactly
    return repr(float(x))


# -- trajectory batches -----------------------------------------------------


def batch_header(d: int) -> list[str]:
    return ["trajectory_id", "t", *(f"s_{j}" for j in range(d)), "action", "reward", *(f"s'_{j}" for j in range(d))]


def write_batch_csv(batch: TrajectoryBatch, path: str | Path) -> None:
    """One row per transition, plus a ``.meta.json`` sidecar with seed, fingerprint and action count."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(batch_header(batch.d))
        for i in range(batch.n):
            for t in range(batch.horizon):
                w.writerow(
                    [i, t, *map(_fmt, batch.path[i, t]), int(batch.actions[i, t]), _fmt(batch.rewards[i, t]),
                     *map(_fmt, batch.path[i, t + 1])]
                )
    meta = {"seed": batch.seed, "spec_fingerprint": batch.spec_fingerprint, "num_actions": batch.num_actions}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def read_batch_csv(path: str | Path) -> TrajectoryBatch:
    path = Path(path)
    meta = json.loads(_meta_path(path).read_text())
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 6 or (len(header) - 4) % 2:
            raise MalformedInput("batch CSV header is malformed", row=1)
        d = (len(header) - 4) // 2
        if header != batch_header(d):
            raise MalformedInput("batch CSV header does not match the expected columns", row=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MalformedInput(f"expected {len(header)} fields, got {len(row)}", row=lineno)
            try:
                rows.append((int(row[0]), int(row[1]), [float(x) for x in row[2:]]))
            except ValueError as exc:
                raise MalformedInput(str(exc), row=lineno) from None
    if not rows:
        raise MalformedInput("batch CSV has no transitions", row=2)
    n = max(r[0] for r in rows) + 1
    T = max(r[1] for r in rows) + 1
    if len(rows) != n * T:
        raise MalformedInput(f"expected {n * T} transitions for {n} trajectories of length {T}, got {len(rows)}")
    path_arr = np.empty((n, T + 1, d))
    actions = np.empty((n, T), dtype=np.int64)
    rewards = np.empty((n, T))
    for i, t, vals in rows:
        path_arr[i, t] = vals[:d]
        actions[i, t] = int(vals[d])
        rewards[i, t] = vals[d + 1]
        path_arr[i, t + 1] = vals[d + 2 :]
    return TrajectoryBatch(path_arr, actions, rewards, int(meta["num_actions"]), int(meta["seed"]), meta["spec_fingerprint"])


def write_batch_binary(batch: TrajectoryBatch, path: str | Path) -> None:
    """Header, then per transition (row-major, trajectory-major) the row
    ``s, action, reward, s'`` as little-endian float64."""
    n, T, d = batch.n, batch.horizon, batch.d
    rows = np.concatenate(
        [batch.path[:, :-1], batch.actions[..., None].astype(np.float64), batch.rewards[..., None], batch.path[:, 1:]],
        axis=2,
    )
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, BINARY_VERSION, n, T, d, batch.num_actions))
        fh.write(rows.astype("<f8").tobytes())


def read_batch_binary(path: str | Path, seed: int = 0, spec_fingerprint: str = "") -> TrajectoryBatch:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedInput("binary batch is shorter than its header")
    magic, version, n, T, d, A = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedInput(f"bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise MalformedInput(f"unsupported binary version {version}")
    width = 2 * d + 2
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n * T * width:
        raise MalformedInput(f"expected {n * T * width} values, found {body.size}")
    rows = body.reshape(n, T, width).astype(np.float64)
    path_arr = np.empty((n, T + 1, d))
    path_arr[:, :T] = rows[..., :d]
    path_arr[:, T] = rows[:, -1, d + 2 :]
    return TrajectoryBatch(path_arr, rows[..., d].astype(np.int64), rows[..., d + 1].copy(), A, seed, spec_fingerprint)


# -- specs ------------------------------------------------------------------


def write_spec(spec: MdpSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def read_spec(path: str | Path) -> MdpSpec:
    spec = MdpSpec.from_dict(json.loads(Path(path).read_text()))
    spec.check_invariants()
    return spec


# -- fits -------------------------------------------------------------------


def write_qfun_csv(result: FqiResult, path: str | Path) -> None:
    """Rows (t, action, coordinate, coefficient); the intercept is coordinate ``intercept``."""
    q = result.qfun
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "action", "coordinate", "coefficient"])
        for t in range(q.horizon):
            for a in range(q.num_actions):
                for j in range(q.d):
                    w.writerow([t, a, j, _fmt(q.coef[t, a, j])])
                w.writerow([t, a, "intercept", _fmt(q.intercept[t, a])])


def write_diagnostics_csv(result: FqiResult, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "action", "penalty", "threshold", "support_size", "iterations", "kkt_violation"])
        for g in sorted(result.per_timestep_diagnostics, key=lambda g: (g.t, g.action)):
            w.writerow([g.t, g.action, _fmt(g.penalty), _fmt(g.threshold), g.support_size, g.lasso_iterations,
                        _fmt(g.kkt_violation)])


def write_lasso_csv(fit: LassoFit, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "coefficient"])
        for j, c in enumerate(fit.coefficients):
            w.writerow([j, _fmt(c)])
